import numpy as np
import pytest
import torch

from deepmts.checkpoint import (
    CheckpointError,
    MAGIC,
    load_module,
    load_state,
    save_module,
    save_state,
)
from deepmts.models import ArchSpec, build_model, run_model


class TestStateRoundTrip:
    def test_bit_exact_float32(self, tmp_path):
        rng = np.random.default_rng(0)
        state = {
            "conv.weight": rng.standard_normal((4, 2, 3, 3, 3)).astype(np.float32),
            "conv.bias": rng.standard_normal(4).astype(np.float32),
            "bn.count": np.array(7, dtype=np.int64),
            "mask": (rng.random((3, 3)) > 0.5).astype(np.uint8),
        }
        path = tmp_path / "p.mtsw"
        save_state(path, state)
        loaded = load_state(path)
        assert set(loaded) == set(state)
        for k in state:
            assert loaded[k].dtype == state[k].dtype
            assert loaded[k].tobytes() == state[k].tobytes()

    def test_header_magic(self, tmp_path):
        path = tmp_path / "p.mtsw"
        save_state(path, {"x": np.zeros(2, dtype=np.float32)})
        assert path.read_bytes()[:5] == MAGIC == b"MTSW1"

    def test_double_round_trip_identical_bytes(self, tmp_path):
        state = {"a": np.arange(6, dtype=np.float64).reshape(2, 3)}
        p1, p2 = tmp_path / "a.mtsw", tmp_path / "b.mtsw"
        save_state(p1, state)
        save_state(p2, load_state(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.mtsw"
        path.write_bytes(b"NOPE!" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_state(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "p.mtsw"
        save_state(path, {"x": np.zeros(100, dtype=np.float32)})
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_state(path)


class TestModuleRoundTrip:
    def test_model_forward_identical_after_reload(self, tmp_path):
        spec = ArchSpec(variant="DeepMTS", width=0.25, input_extent=(32, 32, 16))
        model = build_model(spec, seed=5)
        x = torch.rand(1, 2, 32, 32, 16, generator=torch.Generator().manual_seed(1))
        clin = torch.zeros(1, 1)
        before = run_model(model, x, clin)

        path = tmp_path / "model.mtsw"
        save_module(path, model)
        clone = build_model(spec, seed=99)  # different init, fully overwritten
        load_module(path, clone)
        after = run_model(clone, x, clin)
        assert torch.equal(before.risk, after.risk)
        assert torch.equal(before.prob_map, after.prob_map)

    def test_key_mismatch_rejected(self, tmp_path):
        spec = ArchSpec(variant="Sur-HS", width=0.25, input_extent=(32, 32, 16))
        model = build_model(spec, seed=0)
        path = tmp_path / "model.mtsw"
        save_module(path, model)
        other = build_model(ArchSpec(variant="DeepMTS", width=0.25,
                                     input_extent=(32, 32, 16)), seed=0)
        with pytest.raises(CheckpointError, match="does not match"):
            load_module(path, other)

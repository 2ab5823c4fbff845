"""Model zoo: the full multi-task survival network and its ablation variants.

The flagship ``DeepMTS`` couples a residual U-shaped segmentation backbone
with a cascaded DenseNet-style survival branch (CSN). Multi-scale encoder
taps provide one feature vector, per-transition CSN taps another, and a
small fully-connected fusion head maps both plus clinical covariates to a
scalar log-relative-hazard. Degraded variants drop components:

    Seg-Backbone  backbone only, segmentation output only
    Sur-HS        encoder + taps + head (no decoder, no CSN)
    Sur-CasNet    CSN + head, mask channel supplied externally
    MT-HS         backbone + taps + head (no CSN)
    MT-CasNet     backbone + CSN + head; encoder taps unused by the head

The CSN input is assembled from PET/CT and a tumor mask channel under one
of four strategies (concatenation, multiplication, pet-ct-only, mask-only).
For variants owning a backbone the mask channel is the live foreground
probability, detached so the survival loss never reshapes the probability
map; Sur-CasNet consumes a provided binary mask instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .nncore import ShapeError, maxpool2, upsample2, gap, softmax_channels

VARIANTS = ("DeepMTS", "Seg-Backbone", "Sur-HS", "Sur-CasNet", "MT-HS", "MT-CasNet")
BACKBONES = ("custom-residual", "plain-unet")
CSN_INPUTS = ("concatenation", "multiplication", "pet-ct-only", "mask-only")

# encoder residual plan (n convs, m channels) per scale; decoder mirrors it
ENC_PLAN = ((1, 16), (2, 32), (2, 64), (2, 128), (2, 256))
DEC_PLAN = ((2, 128), (2, 64), (2, 32), (1, 16))
TAP_WIDTHS = (4, 8, 16, 32, 64)           # per-scale encoder taps, sum 124
UNET_TAP_WIDTH = 64                        # single bottleneck tap of the plain U-net

CSN_INIT_CH = 32
CSN_GROWTH = 16
CSN_BOTTLENECK_FACTOR = 4
CSN_BLOCK_SIZES = (4, 8, 16)
CSN_TRANSITION_WIDTHS = (16, 32, 64)       # transition outputs double as taps, sum 112
CSN_DROPOUT = 0.05

HEAD_UNITS = 64                            # not scaled by the width multiplier
HEAD_DROPOUT = 0.5
SEG_THRESHOLD = 0.5


def scaled(width: float, channels: int) -> int:
    return max(1, math.ceil(width * channels))


@dataclass(frozen=True)
class ArchSpec:
    """Declarative network configuration."""

    variant: str = "DeepMTS"
    backbone: str = "custom-residual"
    csn_input: str = "concatenation"
    width: float = 0.25
    input_extent: tuple[int, int, int] = (32, 32, 16)
    clinical_dim: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.csn_input not in CSN_INPUTS:
            raise ValueError(f"unknown csn_input {self.csn_input!r}")
        if self.width <= 0:
            raise ValueError("width multiplier must be positive")
        if self.clinical_dim < 0:
            raise ValueError("clinical_dim must be nonnegative")
        if len(self.input_extent) != 3 or any(e % 16 != 0 or e <= 0 for e in self.input_extent):
            raise ValueError(
                f"input extents {self.input_extent} must be positive and divisible by 16"
            )
        if self.variant == "Sur-CasNet" and self.backbone == "plain-unet":
            raise ValueError("Sur-CasNet has no backbone to swap")

    @property
    def has_backbone(self) -> bool:
        return self.variant != "Sur-CasNet"

    @property
    def has_decoder(self) -> bool:
        return self.variant in ("DeepMTS", "Seg-Backbone", "MT-HS", "MT-CasNet")

    @property
    def has_csn(self) -> bool:
        return self.variant in ("DeepMTS", "Sur-CasNet", "MT-CasNet")

    @property
    def has_head(self) -> bool:
        return self.variant != "Seg-Backbone"

    @property
    def head_uses_taps(self) -> bool:
        return self.variant in ("DeepMTS", "Sur-HS", "MT-HS")

    @property
    def trains_segmentation(self) -> bool:
        return self.has_decoder

    @property
    def needs_manual_mask(self) -> bool:
        return self.variant == "Sur-CasNet" and self.csn_input != "pet-ct-only"


@dataclass
class ModelOutput:
    """Per-forward results; fields absent from a variant stay None."""

    risk: torch.Tensor | None = None
    prob_map: torch.Tensor | None = None
    features: dict[str, torch.Tensor] = field(default_factory=dict)


def backbone_tap_dims(width: float, backbone: str = "custom-residual") -> tuple[int, ...]:
    if backbone == "plain-unet":
        return (scaled(width, UNET_TAP_WIDTH),)
    return tuple(scaled(width, k) for k in TAP_WIDTHS)


def backbone_feature_dim(width: float, backbone: str = "custom-residual") -> int:
    return sum(backbone_tap_dims(width, backbone))


def csn_feature_dim(width: float) -> int:
    return sum(scaled(width, k) for k in CSN_TRANSITION_WIDTHS)


def fc3_input_dim(spec: ArchSpec) -> int:
    dim = spec.clinical_dim
    if spec.head_uses_taps:
        dim += HEAD_UNITS
    if spec.has_csn:
        dim += HEAD_UNITS
    return dim


def encoder_shape_schedule(extent: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Spatial extents of the five encoder scales (before each pooling)."""
    shapes = [tuple(extent)]
    for _ in range(4):
        shapes.append(tuple(e // 2 for e in shapes[-1]))
    return shapes


def csn_input_channels(strategy: str) -> int:
    return {"concatenation": 3, "multiplication": 2, "pet-ct-only": 2, "mask-only": 1}[strategy]


def assemble_csn_input(
    pet_ct: torch.Tensor,
    mask: torch.Tensor | None,
    strategy: str,
) -> torch.Tensor:
    """Build the survival-branch input from images and a tumor mask channel.

    pet_ct: (batch, 2, D, H, W); mask: (batch, 1, D, H, W) in [0, 1] or None
    for the pet-ct-only strategy.
    """
    if strategy not in CSN_INPUTS:
        raise ValueError(f"unknown csn input strategy {strategy!r}")
    if pet_ct.dim() != 5 or pet_ct.shape[1] != 2:
        raise ShapeError(f"pet_ct must be (batch, 2, D, H, W), got {tuple(pet_ct.shape)}")
    if strategy == "pet-ct-only":
        return pet_ct
    if mask is None:
        raise ValueError(f"strategy {strategy!r} requires a mask channel")
    if mask.dim() == 4:
        mask = mask.unsqueeze(1)
    if mask.shape[0] != pet_ct.shape[0] or mask.shape[2:] != pet_ct.shape[2:]:
        raise ShapeError(
            f"grid mismatch: mask {tuple(mask.shape)} vs pet_ct {tuple(pet_ct.shape)}"
        )
    mask = mask.to(pet_ct.dtype)
    if strategy == "concatenation":
        return torch.cat([pet_ct, mask], dim=1)
    if strategy == "multiplication":
        return pet_ct * mask
    return mask  # mask-only


class ConvBn(nn.Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel, stride=stride, padding=(kernel - 1) // 2)
        self.bn = nn.BatchNorm3d(cout, momentum=0.1)

    def forward(self, x):
        return self.bn(self.conv(x))


class ResidualBlock(nn.Module):
    """n stacked 3x3x3 conv-BN-ReLU layers; the first carries a 1x1x1
    projection shortcut, the rest identity shortcuts."""

    def __init__(self, n: int, cin: int, channels: int):
        super().__init__()
        self.layers = nn.ModuleList(
            [ConvBn(cin if i == 0 else channels, channels) for i in range(n)]
        )
        self.proj = nn.Conv3d(cin, channels, 1)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            shortcut = self.proj(x) if i == 0 else x
            x = torch.relu(layer(x) + shortcut)
        return x


class PlainBlock(nn.Module):
    """Double conv-BN-ReLU without residual connections."""

    def __init__(self, n: int, cin: int, channels: int):
        super().__init__()
        del n  # plain blocks are always double-conv
        self.layers = nn.ModuleList([ConvBn(cin, channels), ConvBn(channels, channels)])

    def forward(self, x):
        for layer in self.layers:
            x = torch.relu(layer(x))
        return x


class Encoder(nn.Module):
    """Downsampling branch: five blocks separated by 2x2x2 max pooling."""

    def __init__(self, width: float, kind: str, in_channels: int = 2):
        super().__init__()
        block = ResidualBlock if kind == "custom-residual" else PlainBlock
        self.channels = [scaled(width, m) for _, m in ENC_PLAN]
        blocks = []
        cin = in_channels
        for (n, _), cout in zip(ENC_PLAN, self.channels):
            blocks.append(block(n, cin, cout))
            cin = cout
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x) -> list[torch.Tensor]:
        outputs = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            outputs.append(x)
            if i < len(self.blocks) - 1:
                x = maxpool2(x)
        return outputs


class Decoder(nn.Module):
    """Upsampling branch with skip concatenation and a softmax map head."""

    def __init__(self, width: float, kind: str, enc_channels: list[int]):
        super().__init__()
        block = ResidualBlock if kind == "custom-residual" else PlainBlock
        self.blocks = nn.ModuleList()
        cin = enc_channels[-1]
        for (n, m), skip in zip(DEC_PLAN, enc_channels[-2::-1]):
            cout = scaled(width, m)
            self.blocks.append(block(n, cin + skip, cout))
            cin = cout
        self.final = nn.Conv3d(cin, 2, 1)

    def forward(self, enc_outputs: list[torch.Tensor]) -> torch.Tensor:
        x = enc_outputs[-1]
        for blk, skip in zip(self.blocks, enc_outputs[-2::-1]):
            x = upsample2(x)
            x = blk(torch.cat([x, skip], dim=1))
        return softmax_channels(self.final(x))


class FeatureTaps(nn.Module):
    """Per-scale 1x1x1 conv -> BN -> ReLU -> GAP, concatenated."""

    def __init__(self, width: float, enc_channels: list[int]):
        super().__init__()
        self.dims = backbone_tap_dims(width)
        self.taps = nn.ModuleList(
            [ConvBn(cin, d, kernel=1) for cin, d in zip(enc_channels, self.dims)]
        )

    def forward(self, enc_outputs: list[torch.Tensor]) -> torch.Tensor:
        feats = [gap(torch.relu(tap(x))) for tap, x in zip(self.taps, enc_outputs)]
        return torch.cat(feats, dim=1)


class BottleneckTap(nn.Module):
    """Single tap at the deepest scale, used by the plain U-net baseline."""

    def __init__(self, width: float, cin: int):
        super().__init__()
        self.dims = backbone_tap_dims(width, "plain-unet")
        self.tap = ConvBn(cin, self.dims[0], kernel=1)

    def forward(self, enc_outputs: list[torch.Tensor]) -> torch.Tensor:
        return gap(torch.relu(self.tap(enc_outputs[-1])))


class DenseLayer(nn.Module):
    """BN-ReLU-1x1x1 conv-BN-ReLU-3x3x3 conv-dropout bottleneck."""

    def __init__(self, cin: int, growth: int, bottleneck: int, p: float):
        super().__init__()
        self.bn1 = nn.BatchNorm3d(cin, momentum=0.1)
        self.conv1 = nn.Conv3d(cin, bottleneck, 1)
        self.bn2 = nn.BatchNorm3d(bottleneck, momentum=0.1)
        self.conv2 = nn.Conv3d(bottleneck, growth, 3, padding=1)
        self.drop = nn.Dropout(p)

    def forward(self, x):
        y = self.conv1(torch.relu(self.bn1(x)))
        y = self.drop(self.conv2(torch.relu(self.bn2(y))))
        return torch.cat([x, y], dim=1)


class DenseBlock(nn.Module):
    def __init__(self, cin: int, n_layers: int, growth: int, bottleneck: int, p: float):
        super().__init__()
        self.layers = nn.ModuleList(
            [DenseLayer(cin + i * growth, growth, bottleneck, p) for i in range(n_layers)]
        )
        self.out_channels = cin + n_layers * growth

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Transition(nn.Module):
    """BN-ReLU-1x1x1 conv-dropout between dense blocks."""

    def __init__(self, cin: int, cout: int, p: float):
        super().__init__()
        self.bn = nn.BatchNorm3d(cin, momentum=0.1)
        self.conv = nn.Conv3d(cin, cout, 1)
        self.drop = nn.Dropout(p)

    def forward(self, x):
        return self.drop(self.conv(torch.relu(self.bn(x))))


class CsnTap(nn.Module):
    """BN -> ReLU -> GAP over a transition output."""

    def __init__(self, channels: int):
        super().__init__()
        self.bn = nn.BatchNorm3d(channels, momentum=0.1)

    def forward(self, x):
        return gap(torch.relu(self.bn(x)))


class Csn(nn.Module):
    """Cascaded survival network: stride-2 stem, three dense blocks with
    transitions; per-transition taps concatenate to the feature vector."""

    def __init__(self, width: float, in_channels: int):
        super().__init__()
        init_ch = scaled(width, CSN_INIT_CH)
        growth = scaled(width, CSN_GROWTH)
        bottleneck = CSN_BOTTLENECK_FACTOR * growth
        self.stem = nn.Conv3d(in_channels, init_ch, 3, stride=2, padding=1)
        self.dense_blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        self.taps = nn.ModuleList()
        cin = init_ch
        for n_layers, t_width in zip(CSN_BLOCK_SIZES, CSN_TRANSITION_WIDTHS):
            db = DenseBlock(cin, n_layers, growth, bottleneck, CSN_DROPOUT)
            cout = scaled(width, t_width)
            self.dense_blocks.append(db)
            self.transitions.append(Transition(db.out_channels, cout, CSN_DROPOUT))
            self.taps.append(CsnTap(cout))
            cin = cout

    def forward(self, x) -> torch.Tensor:
        x = maxpool2(self.stem(x))
        feats = []
        for i, (db, tr, tap) in enumerate(zip(self.dense_blocks, self.transitions, self.taps)):
            x = tr(db(x))
            feats.append(tap(x))
            if i < 2:
                x = torch.nn.functional.avg_pool3d(x, 2)
        return torch.cat(feats, dim=1)


class FusionHead(nn.Module):
    """Fully-connected risk head with input dropout on every layer.

    FC1 embeds backbone features, FC2 embeds CSN features (each 64 ReLU
    units), FC3 maps the concatenation with clinical covariates to one
    linear unit. ``l2_sum`` exposes the accumulated squared weights for the
    regularization term.
    """

    def __init__(self, backbone_dim: int, csn_dim: int, clinical_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(backbone_dim, HEAD_UNITS) if backbone_dim else None
        self.fc2 = nn.Linear(csn_dim, HEAD_UNITS) if csn_dim else None
        fc3_in = clinical_dim + HEAD_UNITS * ((backbone_dim > 0) + (csn_dim > 0))
        self.fc3 = nn.Linear(fc3_in, 1)
        self.drop = nn.Dropout(HEAD_DROPOUT)
        self.clinical_dim = clinical_dim

    def forward(
        self,
        backbone_feats: torch.Tensor | None,
        csn_feats: torch.Tensor | None,
        clinical: torch.Tensor | None,
    ) -> torch.Tensor:
        parts = []
        if self.fc1 is not None:
            parts.append(torch.relu(self.fc1(self.drop(backbone_feats))))
        if self.fc2 is not None:
            parts.append(torch.relu(self.fc2(self.drop(csn_feats))))
        if self.clinical_dim:
            parts.append(clinical)
        joint = torch.cat(parts, dim=1)
        return self.fc3(self.drop(joint)).squeeze(1)

    def l2_sum(self) -> torch.Tensor:
        total = (self.fc3.weight * self.fc3.weight).sum()
        for fc in (self.fc1, self.fc2):
            if fc is not None:
                total = total + (fc.weight * fc.weight).sum()
        return total


class SurvivalSegNet(nn.Module):
    """A built variant; submodules exist only where the variant uses them."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        width = spec.width
        self.encoder = Encoder(width, spec.backbone) if spec.has_backbone else None
        self.decoder = (
            Decoder(width, spec.backbone, self.encoder.channels) if spec.has_decoder else None
        )
        if spec.has_backbone and spec.head_uses_taps:
            if spec.backbone == "plain-unet":
                self.taps = BottleneckTap(width, self.encoder.channels[-1])
            else:
                self.taps = FeatureTaps(width, self.encoder.channels)
        else:
            self.taps = None
        if spec.has_csn:
            self.csn = Csn(width, csn_input_channels(spec.csn_input))
        else:
            self.csn = None
        if spec.has_head:
            backbone_dim = backbone_feature_dim(width, spec.backbone) if self.taps else 0
            csn_dim = csn_feature_dim(width) if self.csn else 0
            self.head = FusionHead(backbone_dim, csn_dim, spec.clinical_dim)
        else:
            self.head = None

    def forward(
        self,
        pet_ct: torch.Tensor,
        clinical: torch.Tensor | None = None,
        manual_mask: torch.Tensor | None = None,
    ) -> ModelOutput:
        spec = self.spec
        if pet_ct.dim() != 5 or pet_ct.shape[1] != 2:
            raise ShapeError(f"expected (batch, 2, D, H, W) input, got {tuple(pet_ct.shape)}")
        if tuple(pet_ct.shape[2:]) != tuple(spec.input_extent):
            raise ShapeError(
                f"input extent {tuple(pet_ct.shape[2:])} does not match "
                f"spec extent {tuple(spec.input_extent)}"
            )
        if spec.clinical_dim:
            if clinical is None or clinical.shape != (pet_ct.shape[0], spec.clinical_dim):
                got = None if clinical is None else tuple(clinical.shape)
                raise ShapeError(
                    f"clinical features must be (batch, {spec.clinical_dim}), got {got}"
                )
        out = ModelOutput()
        backbone_feats = None
        if self.encoder is not None:
            enc_outputs = self.encoder(pet_ct)
            if self.decoder is not None:
                out.prob_map = self.decoder(enc_outputs)
            if self.taps is not None:
                backbone_feats = self.taps(enc_outputs)
                out.features["backbone"] = backbone_feats
        csn_feats = None
        if self.csn is not None:
            mask = self._csn_mask(out.prob_map, manual_mask)
            csn_feats = self.csn(assemble_csn_input(pet_ct, mask, spec.csn_input))
            out.features["csn"] = csn_feats
        if self.head is not None:
            out.risk = self.head(backbone_feats, csn_feats, clinical)
        return out

    def _csn_mask(self, prob_map, manual_mask):
        spec = self.spec
        if spec.csn_input == "pet-ct-only":
            return None
        if spec.variant == "Sur-CasNet":
            if manual_mask is None:
                raise ValueError("Sur-CasNet requires a manual tumor mask input")
            return manual_mask
        # live foreground probability, detached: the survival loss must not
        # steer the segmentation output
        return prob_map[:, 1:2].detach()

    def l2_sum(self) -> torch.Tensor:
        if self.head is None:
            return torch.zeros((), dtype=next(self.parameters()).dtype)
        return self.head.l2_sum()


def init_parameters(model: nn.Module, seed: int | None = None) -> None:
    """He-style normal init for conv/dense kernels, unit BN scale."""
    if seed is not None:
        torch.manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(spec: ArchSpec, seed: int | None = None,
                dtype: torch.dtype = torch.float32) -> SurvivalSegNet:
    model = SurvivalSegNet(spec)
    init_parameters(model, seed)
    return model.to(dtype)


def run_model(
    model: SurvivalSegNet,
    pet_ct: torch.Tensor,
    clinical: torch.Tensor | None = None,
    manual_mask: torch.Tensor | None = None,
    mode: str = "eval",
) -> ModelOutput:
    """Run one forward pass in the requested train/eval mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(pet_ct, clinical, manual_mask)
    return model(pet_ct, clinical, manual_mask)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

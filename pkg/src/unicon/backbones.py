"""U-Net shaped backbones with conditioning hook points.

Hook contract
-------------
Any backbone plugs into the conditioning modules through three hooks:

* ``encode(x, extents)`` returns the list of per-stage encoder features,
  finest first; the last entry is the bottleneck.
* ``condition_bottleneck(feat, ctx)`` is where conditioned self-attention
  rewrites the bottleneck tensor.
* ``decode(feats, ctx, extents)`` walks the decoder stages coarse to fine;
  each stage merges its skip, optionally concatenates coordinate planes and
  runs a block whose last normalisation may be followed by feature
  modulation.

Two reference encoders ship here: a residual multi-scale CNN with summation
skips (``res2``) and a plain double-convolution U-Net with concatenation
skips (``unet``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .conditioning import FiLM, ConditionContext, ConditionEncoder, ConSA, ConSAConfig, TOKEN_SETS
from .errors import AlreadyConditioned, BadSpec, ShapeError
from .hdsc import concat_coord_planes, coord_extents
from .sampling import CropSample

ENCODER_KINDS = ("res2", "unet")
HDSC_PLACEMENTS = ("none", "decoder", "encoder", "encoder+decoder")
FAMILIES = ("none", "consa", "film")

DEFAULT_CHANNELS = {
    "res2": (48, 96, 192, 384, 768),
    "unet": (32, 64, 128, 256, 512),
}


@dataclass
class BackboneSpec:
    encoder_kind: str = "res2"
    stage_channels: tuple[int, ...] = ()
    skip_mode: str = ""
    dropout: float = 0.1
    in_channels: int = 1
    num_classes: int = 2
    scales: int = 4

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise BadSpec(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        if not self.stage_channels:
            self.stage_channels = DEFAULT_CHANNELS[self.encoder_kind]
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if not self.skip_mode:
            self.skip_mode = "sum" if self.encoder_kind == "res2" else "concat"
        if self.skip_mode not in ("sum", "concat"):
            raise BadSpec(f"skip_mode must be sum or concat, got {self.skip_mode!r}")
        if len(self.stage_channels) < 2:
            raise BadSpec("a U-Net needs at least two stages (depth >= 2)")
        if min(self.stage_channels) < 1:
            raise BadSpec("stage channels must be positive")
        if self.encoder_kind == "res2" and any(c % self.scales for c in self.stage_channels):
            raise BadSpec(f"res2 stage channels must be divisible by scales={self.scales}")
        if not 0 <= self.dropout < 1:
            raise BadSpec(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def depth(self) -> int:
        return len(self.stage_channels)


@dataclass
class CondSpec:
    family: str = "none"
    tokens: str = "age+loc"
    hdsc: str = "none"
    hid_dim: int = 64
    heads: int = 4
    num_ages: int = 4
    consa_residual: bool = False
    dropout: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise BadSpec(f"conditioning family must be one of {FAMILIES}, got {self.family!r}")
        if self.tokens not in TOKEN_SETS:
            raise BadSpec(f"tokens must be one of {TOKEN_SETS}, got {self.tokens!r}")
        if self.hdsc not in HDSC_PLACEMENTS:
            raise BadSpec(f"hdsc placement must be one of {HDSC_PLACEMENTS}, got {self.hdsc!r}")

    @property
    def hdsc_encoder(self) -> bool:
        return self.hdsc in ("encoder", "encoder+decoder")

    @property
    def hdsc_decoder(self) -> bool:
        return self.hdsc in ("decoder", "encoder+decoder")

    @property
    def needs_context(self) -> bool:
        return self.family != "none"


_MODES = {
    "none": ("none", "age+loc", "none"),
    "consa": ("consa", "age+loc", "none"),
    "consa_age": ("consa", "age", "none"),
    "consa_age_loc": ("consa", "age+loc", "none"),
    "consa+hdsc": ("consa", "age+loc", "decoder"),
    "consa_age+hdsc": ("consa", "age", "decoder"),
    "film": ("film", "age+loc", "none"),
    "film_age": ("film", "age", "none"),
    "film+hdsc": ("film", "age+loc", "decoder"),
    "hdsc": ("none", "age+loc", "decoder"),
    "hdsc_decoder": ("none", "age+loc", "decoder"),
    "hdsc_encoder": ("none", "age+loc", "encoder"),
    "hdsc_enc_dec": ("none", "age+loc", "encoder+decoder"),
}
MODES = tuple(_MODES)


def parse_mode(mode: str, **overrides) -> CondSpec:
    """Translate a conditioning mode label into a CondSpec."""
    if mode not in _MODES:
        raise BadSpec(f"unknown conditioning mode {mode!r}; choose from {MODES}")
    family, tokens, hdsc = _MODES[mode]
    return CondSpec(family=family, tokens=tokens, hdsc=hdsc, **overrides)


# -- building blocks ---------------------------------------------------------


def conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1, bias=False)


class ConvBlock(nn.Module):
    """conv3x3-BN-ReLU-dropout-conv3x3-BN-[FiLM]-ReLU."""

    def __init__(self, cin: int, cout: int, dropout: float = 0.0):
        super().__init__()
        self.conv1 = conv3(cin, cout)
        self.bn1 = nn.BatchNorm2d(cout)
        self.drop = nn.Dropout2d(dropout) if dropout > 0 else nn.Identity()
        self.conv2 = conv3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = nn.ReLU(inplace=False)

    @property
    def first_conv(self) -> nn.Conv2d:
        return self.conv1

    def forward(self, x, film: FiLM | None = None, cond: torch.Tensor | None = None):
        x = self.drop(self.act(self.bn1(self.conv1(x))))
        x = self.bn2(self.conv2(x))
        if film is not None:
            x = film(x, cond)
        return self.act(x)


class Res2Block(nn.Module):
    """Multi-scale residual block.

    The 1x1-reduced features are split into ``scales`` groups; every group
    after the first passes a 3x3 convolution that also sees the previous
    group's output, widening the receptive field inside one block.
    """

    def __init__(self, cin: int, cout: int, scales: int = 4, dropout: float = 0.0):
        super().__init__()
        self.scales = scales
        width = cout // scales
        self.reduce = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn_reduce = nn.BatchNorm2d(cout)
        self.convs = nn.ModuleList(conv3(width, width) for _ in range(scales - 1))
        self.bns = nn.ModuleList(nn.BatchNorm2d(width) for _ in range(scales - 1))
        self.expand = nn.Conv2d(cout, cout, 1, bias=False)
        self.bn_expand = nn.BatchNorm2d(cout)
        self.shortcut = (
            nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout)) if cin != cout else nn.Identity()
        )
        self.drop = nn.Dropout2d(dropout) if dropout > 0 else nn.Identity()
        self.act = nn.ReLU(inplace=False)

    @property
    def first_conv(self) -> nn.Conv2d:
        return self.reduce

    def forward(self, x):
        # the shortcut reads the block input, so widened inputs reach it too
        identity = self.shortcut(x)
        y = self.act(self.bn_reduce(self.reduce(x)))
        parts = list(y.chunk(self.scales, dim=1))
        outs = [parts[0]]
        prev = None
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            inp = parts[i] if prev is None else parts[i] + prev
            prev = self.act(bn(conv(inp)))
            outs.append(prev)
        y = self.drop(torch.cat(outs, dim=1))
        y = self.bn_expand(self.expand(y))
        return self.act(y + identity)


class UpStage(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = conv3(cin, cout)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.ReLU(inplace=False)

    def forward(self, x, size):
        x = self.up(x)
        if x.shape[-2:] != size:
            x = nn.functional.interpolate(x, size=size, mode="nearest")
        return self.act(self.bn(self.conv(x)))


def widen_conv_in(conv: nn.Conv2d, extra: int) -> nn.Conv2d:
    """Copy of ``conv`` accepting ``extra`` more input channels (appended last)."""
    new = nn.Conv2d(
        conv.in_channels + extra,
        conv.out_channels,
        conv.kernel_size,
        stride=conv.stride,
        padding=conv.padding,
        bias=conv.bias is not None,
    ).to(dtype=conv.weight.dtype, device=conv.weight.device)
    with torch.no_grad():
        new.weight[:, : conv.in_channels] = conv.weight
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


# -- the model ---------------------------------------------------------------


class SegModel(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.cond = CondSpec()
        self.conditioned = False
        chans = spec.stage_channels
        make = (
            (lambda ci, co: Res2Block(ci, co, spec.scales, spec.dropout))
            if spec.encoder_kind == "res2"
            else (lambda ci, co: ConvBlock(ci, co, spec.dropout))
        )
        self.pool = nn.MaxPool2d(2)
        self.enc = nn.ModuleList()
        prev = spec.in_channels
        for c in chans:
            self.enc.append(make(prev, c))
            prev = c
        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(spec.depth - 2, -1, -1):
            self.ups.append(UpStage(chans[i + 1], chans[i]))
            cin = chans[i] if spec.skip_mode == "sum" else 2 * chans[i]
            self.dec.append(ConvBlock(cin, chans[i], spec.dropout))
        self.head = nn.Conv2d(chans[0], spec.num_classes, 1)

        self.cond_encoder: ConditionEncoder | None = None
        self.consa: ConSA | None = None
        self.films: nn.ModuleList | None = None

    # hooks ------------------------------------------------------------------

    def encode(self, x: torch.Tensor, extents: torch.Tensor | None = None) -> list[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = self.pool(x)
            if self.cond.hdsc_encoder:
                x = concat_coord_planes(x, extents)
            x = block(x)
            feats.append(x)
        return feats

    def condition_bottleneck(self, feat: torch.Tensor, ctx: ConditionContext | None) -> torch.Tensor:
        if self.consa is None:
            return feat
        return self.consa(feat, ctx.tokens(self.cond.tokens))

    def decode(self, feats: list[torch.Tensor], ctx: ConditionContext | None, extents: torch.Tensor | None) -> torch.Tensor:
        x = feats[-1]
        cond_vec = ctx.vector(self.cond.tokens) if (ctx is not None and self.films is not None) else None
        for n, (up, block) in enumerate(zip(self.ups, self.dec)):
            skip = feats[-2 - n]
            x = up(x, skip.shape[-2:])
            x = x + skip if self.spec.skip_mode == "sum" else torch.cat([x, skip], dim=1)
            if self.cond.hdsc_decoder:
                x = concat_coord_planes(x, extents)
            film = self.films[n] if self.films is not None else None
            x = block(x, film, cond_vec)
        return self.head(x)

    def decoder_resolutions(self, h: int, w: int) -> list[tuple[int, int]]:
        sizes = [(h, w)]
        for _ in range(self.spec.depth - 1):
            h, w = h // 2, w // 2
            sizes.append((h, w))
        return sizes[-2::-1]

    def forward(
        self,
        image: torch.Tensor,
        age_index: torch.Tensor | None = None,
        rel_center: torch.Tensor | None = None,
        extents: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected [B, {self.spec.in_channels}, h, w] input, got {tuple(image.shape)}")
        factor = 2 ** (self.spec.depth - 1)
        if image.shape[-1] % factor or image.shape[-2] % factor:
            raise ShapeError(f"spatial size {tuple(image.shape[-2:])} must be divisible by {factor}")
        if self.cond.hdsc != "none" and extents is None:
            raise ShapeError("coordinate extents are required when HDSC is attached")
        ctx = None
        if self.cond_encoder is not None:
            if age_index is None or rel_center is None:
                raise ShapeError("age_index and rel_center are required for conditioned models")
            ctx = self.cond_encoder(age_index, rel_center)
        feats = self.encode(image, extents)
        feats[-1] = self.condition_bottleneck(feats[-1], ctx)
        return self.decode(feats, ctx, extents)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def config(self) -> dict:
        return {"backbone": asdict(self.spec), "conditioning": asdict(self.cond)}


def build_backbone(spec: BackboneSpec, seed: int = 0) -> SegModel:
    """Unconditioned model with deterministic initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegModel(spec)
    model.seed = seed
    return model


def attach_conditioning(model: SegModel, mode: str | CondSpec, seed: int | None = None) -> SegModel:
    """Insert the conditioning modules named by ``mode`` into ``model`` in place."""
    if model.conditioned:
        raise AlreadyConditioned("conditioning has already been attached to this model")
    cond = mode if isinstance(mode, CondSpec) else parse_mode(mode)
    seed = getattr(model, "seed", 0) if seed is None else seed
    chans = model.spec.stage_channels
    ref = next(model.parameters())
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 7919)
        if cond.family != "none":
            model.cond_encoder = ConditionEncoder(cond.hid_dim, cond.num_ages, location=cond.tokens != "age")
        if cond.family == "consa":
            model.consa = ConSA(ConSAConfig(chans[-1], cond.hid_dim, cond.heads, cond.dropout, cond.consa_residual))
        elif cond.family == "film":
            cond_dim = cond.hid_dim if cond.tokens == "age" else 2 * cond.hid_dim
            model.films = nn.ModuleList(FiLM(cond_dim, chans[i], cond.hid_dim) for i in range(model.spec.depth - 2, -1, -1))
        if cond.hdsc_decoder:
            for block in model.dec:
                block.conv1 = widen_conv_in(block.conv1, 3)
        if cond.hdsc_encoder:
            for block in model.enc:
                if isinstance(block, Res2Block):
                    block.reduce = widen_conv_in(block.reduce, 3)
                    if isinstance(block.shortcut, nn.Identity):
                        cout = block.reduce.out_channels
                        block.shortcut = nn.Sequential(
                            nn.Conv2d(cout + 3, cout, 1, bias=False), nn.BatchNorm2d(cout)
                        )
                    else:
                        block.shortcut[0] = widen_conv_in(block.shortcut[0], 3)
                else:
                    block.conv1 = widen_conv_in(block.conv1, 3)
    model.to(dtype=ref.dtype, device=ref.device)
    model.cond = cond
    model.conditioned = True
    return model


def build_model(spec: BackboneSpec, mode: str | CondSpec = "none", seed: int = 0) -> SegModel:
    model = build_backbone(spec, seed)
    if mode != "none":
        attach_conditioning(model, mode, seed)
    else:
        model.conditioned = False
    return model


# -- sample plumbing ---------------------------------------------------------


def collate(samples: list[CropSample], dtype=torch.float32, device=None) -> dict[str, torch.Tensor]:
    images = torch.as_tensor(np.stack([s.image for s in samples])[:, None], dtype=dtype, device=device)
    batch = {
        "image": images,
        "age_index": torch.as_tensor([s.age_index for s in samples], dtype=torch.long, device=device),
        "rel_center": torch.as_tensor(np.stack([np.asarray(s.rel_center, dtype=np.float64) for s in samples]), dtype=dtype, device=device),
        "extents": torch.as_tensor(
            [coord_extents(s.box, s.dims[0], s.dims[1], s.dims[2]) for s in samples], dtype=dtype, device=device
        ),
    }
    if all(s.mask is not None for s in samples):
        batch["mask"] = torch.as_tensor(np.stack([s.mask for s in samples]), dtype=torch.long, device=device)
    return batch


def model_inputs(batch: dict[str, torch.Tensor]) -> tuple:
    return batch["image"], batch["age_index"], batch["rel_center"], batch["extents"]


def forward(model: SegModel, sample: CropSample, train_mode: bool = False) -> torch.Tensor:
    """Logits [2, h, w] for a single crop."""
    model.train(train_mode)
    dtype = next(model.parameters()).dtype
    batch = collate([sample], dtype=dtype)
    with torch.set_grad_enabled(train_mode):
        return model(*model_inputs(batch))[0]

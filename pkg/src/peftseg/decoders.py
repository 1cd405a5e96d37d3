"""Learned multi-scale neck and the four segmentation heads.

The ViT taps all live at the patch-grid resolution, so hierarchical heads
need a learned pyramid: the first tap is upsampled 4x through two transposed
convolutions, the second 2x, the third passes through, and the fourth is
downsampled by a strided convolution. The linear head is a single transposed
convolution with no nonlinearity; the FCN head stacks transposed-conv blocks
with 3x3 convolutions, channel layer norm, and GeLU; the pyramid heads follow
the usual FPN+PPM and skip-connection designs with bilinear upsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, functional as F
from .errors import ConfigError, ShapeError
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Params

DECODER_KINDS = ("linear", "fcn", "upernet", "unet")


@dataclass(frozen=True)
class DecoderConfig:
    kind: str
    num_classes: int
    fcn_hidden: int = 128
    unet_widths: tuple[int, int, int, int] = (256, 128, 64, 32)
    ppm_scales: tuple[int, ...] = (1, 2, 3, 6)
    upernet_channels: int = 128

    def __post_init__(self):
        if self.kind not in DECODER_KINDS:
            raise ConfigError(f"unknown decoder kind {self.kind!r}; valid: {list(DECODER_KINDS)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.fcn_hidden < 1 or self.upernet_channels < 1:
            raise ConfigError("hidden widths must be positive")
        if len(self.unet_widths) != 4 or any(w < 1 for w in self.unet_widths):
            raise ConfigError(f"unet needs 4 positive widths, got {self.unet_widths}")
        object.__setattr__(self, "unet_widths", tuple(self.unet_widths))
        object.__setattr__(self, "ppm_scales", tuple(self.ppm_scales))

    @property
    def needs_pyramid(self) -> bool:
        return self.kind in ("upernet", "unet")


class FeaturePyramid:
    """Four channel-first maps at strictly decreasing spatial scales."""

    def __init__(self, maps: list[Tensor]):
        if len(maps) != 4:
            raise ShapeError(f"feature pyramid needs 4 maps, got {len(maps)}")
        extents = [(m.shape[2], m.shape[3]) for m in maps]
        for (h0, w0), (h1, w1) in zip(extents, extents[1:]):
            if h1 >= h0 or w1 >= w0:
                raise ShapeError(f"pyramid scales must strictly decrease, got {extents}")
        self.maps = maps

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.maps)


def _to_channel_first(tap: Tensor) -> Tensor:
    if tap.ndim != 4:
        raise ShapeError(f"tapped map must be (B, h, w, d), got {tap.shape}")
    return F.transpose(tap, (0, 3, 1, 2))


class Neck:
    """Learned upsampling from four same-extent taps to a 4-level pyramid
    at {4x, 2x, 1x, 0.5x} of the patch grid."""

    def __init__(self, rng: np.random.Generator, embed_dim: int):
        if embed_dim % 4:
            raise ConfigError(f"neck needs embed_dim divisible by 4, got {embed_dim}")
        d = embed_dim
        self.up0_a = ConvTranspose2d(rng, d, d // 2, 2, stride=2)
        self.up0_b = ConvTranspose2d(rng, d // 2, d // 4, 2, stride=2)
        self.up1 = ConvTranspose2d(rng, d, d // 2, 2, stride=2)
        self.down3 = Conv2d(rng, d, d, 2, stride=2)
        self.channels = (d // 4, d // 2, d, d)

    def __call__(self, taps: list[Tensor]) -> FeaturePyramid:
        if len(taps) != 4:
            raise ShapeError(f"neck needs 4 tapped maps, got {len(taps)}")
        extents = {t.shape[1:3] for t in taps}
        if len(extents) != 1:
            raise ShapeError(f"tapped maps disagree in extent: {sorted(extents)}")
        m = [_to_channel_first(t) for t in taps]
        return FeaturePyramid([
            self.up0_b(self.up0_a(m[0])),
            self.up1(m[1]),
            m[2],
            self.down3(m[3]),
        ])

    def named_parameters(self, prefix: str = "neck") -> Params:
        yield from self.up0_a.named_parameters(f"{prefix}.up0_a")
        yield from self.up0_b.named_parameters(f"{prefix}.up0_b")
        yield from self.up1.named_parameters(f"{prefix}.up1")
        yield from self.down3.named_parameters(f"{prefix}.down3")

    def named_buffers(self, prefix: str = "neck"):
        return iter(())


class AdapterNeck:
    """Turns the adapter's 3-level pyramid (strides 8/16/32) into a 4-level
    FeaturePyramid by adding one finer level through a transposed conv."""

    def __init__(self, rng: np.random.Generator, dim: int):
        if dim % 2:
            raise ConfigError(f"adapter neck needs an even width, got {dim}")
        self.up = ConvTranspose2d(rng, dim, dim // 2, 2, stride=2)
        self.channels = (dim // 2, dim, dim, dim)

    def __call__(self, adapter_maps: list[Tensor]) -> FeaturePyramid:
        if len(adapter_maps) != 3:
            raise ShapeError(f"adapter pyramid needs 3 maps, got {len(adapter_maps)}")
        return FeaturePyramid([self.up(adapter_maps[0]), *adapter_maps])

    def named_parameters(self, prefix: str = "neck") -> Params:
        yield from self.up.named_parameters(f"{prefix}.adapter_up")

    def named_buffers(self, prefix: str = "neck"):
        return iter(())


# ---------------------------------------------------------------------------
# heads


def _channel_layer_norm(x: Tensor, ln: LayerNorm) -> Tensor:
    moved = F.transpose(x, (0, 2, 3, 1))
    return F.transpose(ln(moved), (0, 3, 1, 2))


class LinearDecoder:
    """One transposed convolution with kernel = stride = patch size; nothing else."""

    kind = "linear"

    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig, embed_dim: int, patch_size: int):
        self.head = ConvTranspose2d(rng, embed_dim, cfg.num_classes, patch_size, stride=patch_size)
        self.patch_size = patch_size

    def __call__(self, final_tap: Tensor, out_hw: tuple[int, int], training: bool = False) -> Tensor:
        logits = self.head(_to_channel_first(final_tap))
        if logits.shape[2:] != tuple(out_hw):
            raise ShapeError(f"decoded extent {logits.shape[2:]} differs from requested {out_hw}")
        return logits

    def named_parameters(self, prefix: str = "decoder") -> Params:
        yield from self.head.named_parameters(f"{prefix}.head")

    def named_buffers(self, prefix: str = "decoder"):
        return iter(())


class FcnDecoder:
    """Stacked upsampling blocks: transposed conv (2x), 3x3 conv, channel
    layer norm, GeLU; one block per doubling until full resolution."""

    kind = "fcn"

    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig, embed_dim: int, patch_size: int):
        n_blocks = int(math.log2(patch_size))
        if 2 ** n_blocks != patch_size:
            raise ConfigError(f"fcn decoder needs a power-of-two patch size, got {patch_size}")
        hidden = cfg.fcn_hidden
        self.blocks = []
        c_in = embed_dim
        for _ in range(n_blocks):
            self.blocks.append({
                "up": ConvTranspose2d(rng, c_in, hidden, 2, stride=2),
                "conv": Conv2d(rng, hidden, hidden, 3, padding=1),
                "ln": LayerNorm(hidden),
            })
            c_in = hidden
        self.classifier = Conv2d(rng, hidden, cfg.num_classes, 1)

    def __call__(self, final_tap: Tensor, out_hw: tuple[int, int], training: bool = False) -> Tensor:
        x = _to_channel_first(final_tap)
        for blk in self.blocks:
            x = blk["up"](x)
            x = blk["conv"](x)
            x = _channel_layer_norm(x, blk["ln"])
            x = F.gelu(x)
        logits = self.classifier(x)
        if logits.shape[2:] != tuple(out_hw):
            raise ShapeError(f"decoded extent {logits.shape[2:]} differs from requested {out_hw}")
        return logits

    def named_parameters(self, prefix: str = "decoder") -> Params:
        for i, blk in enumerate(self.blocks):
            yield from blk["up"].named_parameters(f"{prefix}.blocks.{i}.up")
            yield from blk["conv"].named_parameters(f"{prefix}.blocks.{i}.conv")
            yield from blk["ln"].named_parameters(f"{prefix}.blocks.{i}.ln")
        yield from self.classifier.named_parameters(f"{prefix}.classifier")

    def named_buffers(self, prefix: str = "decoder"):
        return iter(())


class UperNetDecoder:
    """FPN over the pyramid plus a pooling module on the coarsest level."""

    kind = "upernet"

    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig, pyramid_channels: tuple[int, ...]):
        ch = cfg.upernet_channels
        c0, c1, c2, c3 = pyramid_channels
        self.ppm_scales = cfg.ppm_scales
        self.ppm_convs = [Conv2d(rng, c3, ch, 1) for _ in cfg.ppm_scales]
        self.ppm_fuse = Conv2d(rng, c3 + ch * len(cfg.ppm_scales), ch, 3, padding=1)
        self.laterals = [Conv2d(rng, c, ch, 1) for c in (c0, c1, c2)]
        self.smooths = [Conv2d(rng, ch, ch, 3, padding=1) for _ in range(3)]
        self.fuse = Conv2d(rng, ch * 4, ch, 3, padding=1)
        self.classifier = Conv2d(rng, ch, cfg.num_classes, 1)

    def _ppm_branches(self, coarsest: Tensor) -> list[Tensor]:
        h, w = coarsest.shape[2], coarsest.shape[3]
        branches = []
        for s, conv in zip(self.ppm_scales, self.ppm_convs):
            pooled = F.adaptive_avg_pool2d(coarsest, s, s)
            branches.append(F.bilinear_resize(F.relu(conv(pooled)), h, w))
        return branches

    def __call__(self, pyramid: FeaturePyramid, out_hw: tuple[int, int], training: bool = False) -> Tensor:
        p0, p1, p2, p3 = pyramid.maps
        top = F.relu(self.ppm_fuse(F.concat([p3] + self._ppm_branches(p3), axis=1)))

        feats = [None, None, None, top]
        for i in (2, 1, 0):
            lateral = self.laterals[i]([p0, p1, p2][i])
            upper = F.bilinear_resize(feats[i + 1], lateral.shape[2], lateral.shape[3])
            feats[i] = self.smooths[i](F.add(lateral, upper))

        h0, w0 = feats[0].shape[2], feats[0].shape[3]
        fused = F.concat([feats[0]] + [F.bilinear_resize(f, h0, w0) for f in feats[1:]], axis=1)
        x = F.relu(self.fuse(fused))
        logits = self.classifier(x)
        return F.bilinear_resize(logits, out_hw[0], out_hw[1])

    def named_parameters(self, prefix: str = "decoder") -> Params:
        for i, conv in enumerate(self.ppm_convs):
            yield from conv.named_parameters(f"{prefix}.ppm.{i}")
        yield from self.ppm_fuse.named_parameters(f"{prefix}.ppm_fuse")
        for i, conv in enumerate(self.laterals):
            yield from conv.named_parameters(f"{prefix}.lateral.{i}")
        for i, conv in enumerate(self.smooths):
            yield from conv.named_parameters(f"{prefix}.smooth.{i}")
        yield from self.fuse.named_parameters(f"{prefix}.fuse")
        yield from self.classifier.named_parameters(f"{prefix}.classifier")

    def named_buffers(self, prefix: str = "decoder"):
        return iter(())


class _ConvBnRelu:
    def __init__(self, rng, c_in, c_out):
        self.conv = Conv2d(rng, c_in, c_out, 3, padding=1)
        self.bn = BatchNorm2d(c_out)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.relu(self.bn(self.conv(x), training))

    def named_parameters(self, prefix: str) -> Params:
        yield from self.conv.named_parameters(f"{prefix}.conv")
        yield from self.bn.named_parameters(f"{prefix}.bn")

    def named_buffers(self, prefix: str):
        yield from self.bn.named_buffers(f"{prefix}.bn")


class UNetDecoder:
    """Top-down decoding with skip concatenation: interpolate 2x, concatenate
    the next finer pyramid level, then two conv/batch-norm/ReLU stages."""

    kind = "unet"

    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig, pyramid_channels: tuple[int, ...]):
        w0, w1, w2, w3 = cfg.unet_widths
        c0, c1, c2, c3 = pyramid_channels
        self.entry = _ConvBnRelu(rng, c3, w0)
        self.stages = []
        widths = (w1, w2, w3)
        skips = (c2, c1, c0)
        c_prev = w0
        for width, skip in zip(widths, skips):
            self.stages.append({
                "a": _ConvBnRelu(rng, c_prev + skip, width),
                "b": _ConvBnRelu(rng, width, width),
            })
            c_prev = width
        self.classifier = Conv2d(rng, w3, cfg.num_classes, 1)

    def __call__(self, pyramid: FeaturePyramid, out_hw: tuple[int, int], training: bool = False) -> Tensor:
        p0, p1, p2, p3 = pyramid.maps
        x = self.entry(p3, training)
        for stage, skip in zip(self.stages, (p2, p1, p0)):
            x = F.bilinear_resize(x, skip.shape[2], skip.shape[3])
            x = F.concat([x, skip], axis=1)
            x = stage["b"](stage["a"](x, training), training)
        x = F.bilinear_resize(x, out_hw[0], out_hw[1])
        return self.classifier(x)

    def named_parameters(self, prefix: str = "decoder") -> Params:
        yield from self.entry.named_parameters(f"{prefix}.entry")
        for i, stage in enumerate(self.stages):
            yield from stage["a"].named_parameters(f"{prefix}.stages.{i}.a")
            yield from stage["b"].named_parameters(f"{prefix}.stages.{i}.b")
        yield from self.classifier.named_parameters(f"{prefix}.classifier")

    def named_buffers(self, prefix: str = "decoder"):
        yield from self.entry.named_buffers(f"{prefix}.entry")
        for i, stage in enumerate(self.stages):
            yield from stage["a"].named_buffers(f"{prefix}.stages.{i}.a")
            yield from stage["b"].named_buffers(f"{prefix}.stages.{i}.b")


def build_decoder(rng: np.random.Generator, cfg: DecoderConfig, embed_dim: int,
                  patch_size: int, pyramid_channels: tuple[int, ...] | None = None):
    if cfg.kind == "linear":
        return LinearDecoder(rng, cfg, embed_dim, patch_size)
    if cfg.kind == "fcn":
        return FcnDecoder(rng, cfg, embed_dim, patch_size)
    if pyramid_channels is None:
        raise ConfigError(f"{cfg.kind} decoder requires pyramid channel widths")
    if cfg.kind == "upernet":
        return UperNetDecoder(rng, cfg, pyramid_channels)
    return UNetDecoder(rng, cfg, pyramid_channels)


def decode(features, cfg: DecoderConfig, decoder, out_hw: tuple[int, int],
           training: bool = False) -> Tensor:
    """Dispatch features to a built head. Single-scale heads consume the
    final tap; hierarchical heads require a FeaturePyramid."""
    if cfg.needs_pyramid:
        if not isinstance(features, FeaturePyramid):
            raise ShapeError(f"{cfg.kind} decoder requires a feature pyramid")
    elif isinstance(features, FeaturePyramid):
        raise ShapeError(f"{cfg.kind} decoder consumes the final tap, not a pyramid")
    return decoder(features, out_hw, training)


def estimate_decoder_params(cfg: DecoderConfig, embed_dim: int, patch_size: int) -> int:
    """Exact parameter count, computed by constructing the head."""
    rng = np.random.default_rng(0)
    pyramid_channels = None
    if cfg.needs_pyramid:
        pyramid_channels = Neck(rng, embed_dim).channels
    head = build_decoder(rng, cfg, embed_dim, patch_size, pyramid_channels)
    return sum(t.size for _, t in head.named_parameters())

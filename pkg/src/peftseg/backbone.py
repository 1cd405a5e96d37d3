"""Configurable ViT encoder with band-adaptive patch embedding.

The patch embedding stores one kernel slab per spectral band, so any subset
of the configured bands embeds without weight surgery: a missing band simply
contributes nothing, which after per-band normalization equals feeding the
band's mean value. Features are tapped at four layers (defaulting to the
quarter points of the depth) for hierarchical decoders. Dense tasks only, so
there is no class token; optional prompt blocks and adapter injection hooks
are threaded through the forward when a PEFT attachment installed them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, functional as F, no_grad
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Params, param, zeros_param


def default_tap_layers(depth: int) -> tuple[int, int, int, int]:
    """Quarter-point taps: three intermediate layers plus the final one."""
    taps = tuple(int(round(depth * f)) for f in (0.25, 0.5, 0.75, 1.0))
    if len(set(taps)) < 4 or taps[0] < 1:
        raise ConfigError(f"depth {depth} too shallow for four distinct tap layers")
    return taps


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int
    depth: int
    heads: int
    patch_size: int
    band_ids: tuple[str, ...]
    image_size: tuple[int, int]
    mlp_ratio: float = 4.0
    tap_layers: tuple[int, ...] = field(default=())
    metadata_enabled: bool = False

    def __post_init__(self):
        if self.embed_dim < 1 or self.depth < 1 or self.heads < 1 or self.patch_size < 1:
            raise ConfigError("embed_dim, depth, heads, and patch_size must be positive")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if len(self.band_ids) < 1:
            raise ConfigError("at least one band id is required")
        if len(set(self.band_ids)) != len(self.band_ids):
            raise ConfigError("band ids must be unique")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        taps = self.tap_layers or default_tap_layers(self.depth)
        if len(taps) != 4 or list(taps) != sorted(set(taps)):
            raise ConfigError(f"tap_layers {taps} must be 4 strictly increasing indices")
        if taps[0] < 1 or taps[-1] != self.depth:
            raise ConfigError(f"tap_layers {taps} must lie in [1, {self.depth}] and end at the final layer")
        object.__setattr__(self, "tap_layers", tuple(taps))
        object.__setattr__(self, "band_ids", tuple(self.band_ids))
        object.__setattr__(self, "image_size", tuple(self.image_size))

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def vit_base_config(band_ids, image_size=(224, 224), patch_size=16, **kw) -> BackboneConfig:
    return BackboneConfig(embed_dim=768, depth=12, heads=12, patch_size=patch_size,
                          band_ids=tuple(band_ids), image_size=image_size, **kw)


def vit_large_config(band_ids, image_size=(224, 224), patch_size=16, **kw) -> BackboneConfig:
    return BackboneConfig(embed_dim=1024, depth=24, heads=16, patch_size=patch_size,
                          band_ids=tuple(band_ids), image_size=image_size, **kw)


class PatchEmbedding:
    """Per-band kernel slabs plus a shared bias and a learned positional table.

    Selecting any subset of bands yields a valid embedding: token n is the sum
    over the provided bands of that band's slab response at patch n, plus bias
    and position.
    """

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        p, d = cfg.patch_size, cfg.embed_dim
        self.patch_size = p
        self.slabs = {band: param(rng, (p, p, d)) for band in cfg.band_ids}
        self.bias = zeros_param((d,))
        self.pos_table = param(rng, (cfg.num_patches, d))

    def weight_for_bands(self, bands: Sequence[str]) -> Tensor:
        p = self.patch_size
        pieces = [F.reshape(self.slabs[b], (p * p, -1)) for b in bands]
        if len(pieces) == 1:
            return pieces[0]
        return F.concat(pieces, axis=0)

    def named_parameters(self, prefix: str) -> Params:
        for band, slab in self.slabs.items():
            yield f"{prefix}.band.{band}", slab
        yield f"{prefix}.bias", self.bias
        yield f"{prefix}.pos_table", self.pos_table


class MetadataEmbedding:
    """Sine-cosine encodings of location and day-of-year plus a linear year
    term, each projected to the embedding width. Disabled fields contribute an
    exact zero vector."""

    FIELDS = ("lat", "lon", "day_of_year", "year")

    def __init__(self, rng: np.random.Generator, embed_dim: int, enabled=None):
        self.embed_dim = embed_dim
        self.enabled = dict.fromkeys(self.FIELDS, True) if enabled is None else dict(enabled)
        self.encoders = {
            "lat": Linear(rng, 2, embed_dim),
            "lon": Linear(rng, 2, embed_dim),
            "day_of_year": Linear(rng, 2, embed_dim),
            "year": Linear(rng, 1, embed_dim),
        }

    @staticmethod
    def _features(lat, lon, day_of_year, year) -> dict[str, np.ndarray]:
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
        lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
        doy = np.atleast_1d(np.asarray(day_of_year, dtype=np.float64))
        year = np.atleast_1d(np.asarray(year, dtype=np.float64))
        if lat.min() < -90 or lat.max() > 90:
            raise ShapeError(f"latitude outside [-90, 90]: {lat}")
        if lon.min() < -180 or lon.max() > 180:
            raise ShapeError(f"longitude outside [-180, 180]: {lon}")
        lat_r = np.deg2rad(lat)
        lon_r = np.deg2rad(lon)
        ang = 2.0 * np.pi * doy / 365.25
        return {
            "lat": np.stack([np.sin(lat_r), np.cos(lat_r)], axis=-1),
            "lon": np.stack([np.sin(lon_r), np.cos(lon_r)], axis=-1),
            "day_of_year": np.stack([np.sin(ang), np.cos(ang)], axis=-1),
            "year": ((year - 2000.0) / 100.0)[:, None],
        }

    def __call__(self, lat, lon, day_of_year, year) -> Tensor:
        feats = self._features(lat, lon, day_of_year, year)
        batch = feats["lat"].shape[0]
        out = None
        for name in self.FIELDS:
            if not self.enabled.get(name, True):
                continue
            vec = self.encoders[name](Tensor(feats[name].astype(np.float32)))
            out = vec if out is None else F.add(out, vec)
        if out is None:
            out = Tensor(np.zeros((batch, self.embed_dim), dtype=np.float32))
        return out

    def named_parameters(self, prefix: str) -> Params:
        for name in self.FIELDS:
            yield from self.encoders[name].named_parameters(f"{prefix}.{name}")


class TransformerBlock:
    """Pre-norm block: x + attn(LN(x)), then x + mlp(LN(x))."""

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        d = cfg.embed_dim
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.ln1 = LayerNorm(d)
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(rng, d, cfg.mlp_hidden)
        self.fc2 = Linear(rng, cfg.mlp_hidden, d)

    def _split_heads(self, t: Tensor, b: int, n: int) -> Tensor:
        t = F.reshape(t, (b, n, self.heads, self.head_dim))
        return F.transpose(t, (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.ln1(x)
        q = self._split_heads(self.q(h), b, n)
        k = self._split_heads(self.k(h), b, n)
        v = self._split_heads(self.v(h), b, n)
        ctx = F.attention(q, k, v)
        ctx = F.reshape(F.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        x = F.add(x, self.o(ctx))
        h2 = self.ln2(x)
        return F.add(x, self.fc2(F.gelu(self.fc1(h2))))

    def named_parameters(self, prefix: str) -> Params:
        yield from self.ln1.named_parameters(f"{prefix}.ln1")
        for name in ("q", "k", "v", "o"):
            yield from getattr(self, name).named_parameters(f"{prefix}.attn.{name}")
        yield from self.ln2.named_parameters(f"{prefix}.ln2")
        yield from self.fc1.named_parameters(f"{prefix}.mlp.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.mlp.fc2")


class ViTBackbone:
    """ViT encoder over multispectral patch tokens with four feature taps."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.patch_embed = PatchEmbedding(rng, cfg)
        self.metadata = MetadataEmbedding(rng, cfg.embed_dim) if cfg.metadata_enabled else None
        self.blocks = [TransformerBlock(rng, cfg) for _ in range(cfg.depth)]
        # PEFT attachment hooks, populated by peftseg.peft
        self.vpt = None
        self.adapter = None
        self.lora = None

    # -- embedding ----------------------------------------------------------

    def embed_patches(self, image, bands: Sequence[str] | None = None) -> Tensor:
        """Tokenize a (C,H,W) image or (B,C,H,W) batch into (.., N, d) tokens."""
        bands = tuple(bands) if bands is not None else self.cfg.band_ids
        unknown = [b for b in bands if b not in self.patch_embed.slabs]
        if unknown:
            raise ShapeError(f"unknown band ids {unknown}; configured bands are {list(self.cfg.band_ids)}")
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
        squeeze = x.ndim == 3
        if squeeze:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != len(bands):
            raise ShapeError(f"image shape {x.shape} does not match {len(bands)} bands")
        b, c, h, w = x.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ShapeError(f"spatial size ({h},{w}) not divisible by patch size {p}; pad first")
        if (h, w) != self.cfg.image_size:
            raise ShapeError(f"image size ({h},{w}) differs from configured {self.cfg.image_size}")
        gh, gw = h // p, w // p

        patches = F.reshape(x, (b, c, gh, p, gw, p))
        patches = F.transpose(patches, (0, 2, 4, 1, 3, 5))
        patches = F.reshape(patches, (b, gh * gw, c * p * p))
        weight = self.patch_embed.weight_for_bands(bands)
        tokens = F.matmul(patches, weight)
        tokens = F.add(tokens, self.patch_embed.bias)
        tokens = F.add(tokens, self.patch_embed.pos_table)
        if squeeze:
            tokens = F.reshape(tokens, tokens.shape[1:])
        return tokens

    def encode_metadata(self, lat, lon, day_of_year, year) -> Tensor:
        """Deterministic d-vector added to every patch token before layer 1."""
        MetadataEmbedding._features(lat, lon, day_of_year, year)  # range validation
        scalar = np.ndim(lat) == 0
        if not self.cfg.metadata_enabled or self.metadata is None:
            batch = 1 if scalar else np.asarray(lat).shape[0]
            out = np.zeros((batch, self.cfg.embed_dim), dtype=np.float32)
            return Tensor(out[0] if scalar else out)
        vec = self.metadata(lat, lon, day_of_year, year)
        if scalar:
            vec = F.reshape(vec, (self.cfg.embed_dim,))
        return vec

    # -- encoder ------------------------------------------------------------

    def forward_features(self, tokens: Tensor, prompts=None, adapter_tokens=None) -> list[Tensor]:
        """Run the transformer and return the four tapped feature maps.

        Each tap is reshaped to (.., H/p, W/p, d); prompt positions, when
        present, are excluded from every tapped map.
        """
        cfg = self.cfg
        squeeze = tokens.ndim == 2
        x = F.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
        b, n, d = x.shape
        if n != cfg.num_patches or d != cfg.embed_dim:
            raise ShapeError(f"tokens {x.shape} do not match grid {cfg.grid} x dim {cfg.embed_dim}")
        gh, gw = cfg.grid

        if prompts is None and self.vpt is not None:
            prompts = self.vpt.prompts
        if prompts is not None and len(prompts) != cfg.depth:
            raise ShapeError(f"need one prompt block per layer ({cfg.depth}), got {len(prompts)}")
        if prompts is not None and self.adapter is not None:
            raise ShapeError("prompt blocks and adapter injection cannot be combined")

        taps = {}
        for layer, block in enumerate(self.blocks, start=1):
            if self.adapter is not None and adapter_tokens is not None \
                    and layer in self.adapter.injection_layers:
                x = F.add(x, self.adapter.injectors[layer](x, adapter_tokens))
            if prompts is not None:
                n_p = prompts[layer - 1].shape[0]
                block_prompts = F.reshape(prompts[layer - 1], (1, n_p, d))
                if b > 1:
                    block_prompts = F.concat([block_prompts] * b, axis=0)
                x = block(F.concat([block_prompts, x], axis=1))
                x = F.slice_ranges(x, (None, (n_p, n_p + n), None))
            else:
                x = block(x)
            if layer in cfg.tap_layers:
                taps[layer] = F.reshape(x, (b, gh, gw, d))

        out = [taps[layer] for layer in cfg.tap_layers]
        if squeeze:
            out = [F.reshape(t, t.shape[1:]) for t in out]
        return out

    def image_embedding(self, image, bands: Sequence[str] | None = None,
                        lat=None, lon=None, day_of_year=None, year=None) -> np.ndarray:
        """Arithmetic mean of the final-layer patch tokens, one d-vector per image."""
        with no_grad():
            tokens = self.embed_patches(image, bands)
            squeeze = tokens.ndim == 2
            if squeeze:
                tokens = F.reshape(tokens, (1,) + tokens.shape)
            if self.cfg.metadata_enabled and lat is not None:
                meta = self.metadata(lat, lon, day_of_year, year)
                tokens = F.add(tokens, F.reshape(meta, (meta.shape[0], 1, meta.shape[-1])))
            adapter_tokens = None
            if self.adapter is not None:
                img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
                if img.ndim == 3:
                    img = F.reshape(img, (1,) + img.shape)
                adapter_tokens = self.adapter.stem_tokens(img)
            final = self.forward_features(tokens, adapter_tokens=adapter_tokens)[-1]
            b, gh, gw, d = final.shape
            emb = F.mean(F.reshape(final, (b, gh * gw, d)), axes=(1,))
            out = np.array(emb.data, copy=True)
        return out[0] if squeeze else out

    # -- bookkeeping ---------------------------------------------------------

    def named_parameters(self, prefix: str = "encoder") -> Params:
        yield from self.patch_embed.named_parameters(f"{prefix}.patch_embed")
        if self.metadata is not None:
            yield from self.metadata.named_parameters(f"{prefix}.meta")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}.blocks.{i}")

"""PEFT attachments for the ViT backbone and the freeze-policy machinery.

Three attachment families are supported: low-rank adapters on the attention
query/value and MLP projections, deep prompt tokens prepended at every layer,
and a parallel convolutional adapter that injects spatial features through
cross-attention and extracts a three-level feature hierarchy. Attachment is
numerically inert: the adapted forward equals the base forward until the new
parameters move away from their zero initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, functional as F
from .backbone import ViTBackbone
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Linear, Params, param, zeros_param

LORA_TARGETS = ("attention-query", "attention-value", "mlp-fc1", "mlp-fc2")
_TARGET_ATTR = {"attention-query": ("attn", "q"), "attention-value": ("attn", "v"),
                "mlp-fc1": ("mlp", "fc1"), "mlp-fc2": ("mlp", "fc2")}

POLICIES = ("full_finetune", "linear_probe", "lora", "vpt", "vit_adapter")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    targets: tuple[str, ...] = LORA_TARGETS
    scaling: float = 1.0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if not self.targets:
            raise ConfigError("LoRA needs at least one target")
        bad = [t for t in self.targets if t not in LORA_TARGETS]
        if bad:
            raise ConfigError(f"unknown LoRA targets {bad}; valid: {list(LORA_TARGETS)}")
        object.__setattr__(self, "targets", tuple(self.targets))


@dataclass(frozen=True)
class VptConfig:
    prompts_per_layer: int = 100

    def __post_init__(self):
        if self.prompts_per_layer < 1:
            raise ConfigError(f"prompts_per_layer must be >= 1, got {self.prompts_per_layer}")


@dataclass(frozen=True)
class VitAdapterConfig:
    channels: tuple[int, int, int] = (256, 256, 256)  # stride 8 / 16 / 32 widths
    injection_layers: tuple[int, ...] = ()  # empty -> backbone tap layers

    def __post_init__(self):
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ConfigError(f"adapter needs 3 positive pyramid widths, got {self.channels}")
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "injection_layers", tuple(self.injection_layers))


class LoraLinear:
    """Wraps a frozen linear map with an additive low-rank update.

    The up matrix starts at exact zeros, so the wrapped forward equals the
    base forward at attachment time; the down matrix is Gaussian.
    """

    def __init__(self, rng: np.random.Generator, base: Linear, rank: int, scaling: float):
        d_out, d_in = base.weight.shape
        self.base = base
        self.lora_a = param(rng, (rank, d_in), std=0.02)
        self.lora_b = zeros_param((d_out, rank))
        self.scaling = scaling

    def __call__(self, x: Tensor) -> Tensor:
        y = self.base(x)
        delta = F.matmul(F.matmul(x, self.lora_a, transpose_b=True), self.lora_b, transpose_b=True)
        if self.scaling != 1.0:
            delta = F.scale(delta, self.scaling)
        return F.add(y, delta)

    def merged_weight(self) -> np.ndarray:
        return self.base.weight.data + np.float32(self.scaling) * (self.lora_b.data @ self.lora_a.data)

    def named_parameters(self, prefix: str) -> Params:
        # base weights keep their original names so checkpoints stay compatible
        yield from self.base.named_parameters(prefix)

    def adapter_parameters(self, prefix: str) -> Params:
        yield f"{prefix}.lora_a", self.lora_a
        yield f"{prefix}.lora_b", self.lora_b


@dataclass
class LoraAttachment:
    cfg: LoraConfig
    layers: list[tuple[str, LoraLinear]] = field(default_factory=list)

    def named_parameters(self, prefix: str = "peft.lora") -> Params:
        for path, layer in self.layers:
            yield from layer.adapter_parameters(f"{prefix}.{path}")


class VptAttachment:
    """Fresh prompt block per transformer layer (deep prompting)."""

    def __init__(self, rng: np.random.Generator, cfg: VptConfig, depth: int, embed_dim: int):
        self.cfg = cfg
        self.prompts = [
            Tensor(rng.uniform(-0.1, 0.1, size=(cfg.prompts_per_layer, embed_dim)).astype(np.float32),
                   requires_grad=True)
            for _ in range(depth)
        ]

    def named_parameters(self, prefix: str = "peft.vpt") -> Params:
        for i, p in enumerate(self.prompts):
            yield f"{prefix}.prompts.{i}", p


class CrossAttention:
    """Single-head cross-attention; output projection starts at zero so the
    module is silent at attachment time."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.out.weight.data[:] = 0.0

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        return self.out(F.attention(self.q(queries), self.k(context), self.v(context)))

    def named_parameters(self, prefix: str) -> Params:
        for name in ("q", "k", "v", "out"):
            yield from getattr(self, name).named_parameters(f"{prefix}.{name}")


class VitAdapterAttachment:
    """Convolutional spatial prior with cross-attention interaction.

    A strided conv stem turns the raw image into a three-level pyramid at
    strides 8/16/32; the levels are projected to the token width and injected
    into the ViT stream before the configured layers. After the final layer an
    extractor attends back from the adapter tokens to the ViT tokens, and the
    updated tokens are folded back into the pyramid maps.
    """

    def __init__(self, rng: np.random.Generator, cfg: VitAdapterConfig, backbone_cfg):
        self.cfg = cfg
        d = backbone_cfg.embed_dim
        c_in = len(backbone_cfg.band_ids)
        c8, c16, c32 = cfg.channels
        w_a = max(c8 // 4, 8)
        w_b = max(c8 // 2, 8)
        self.stem = [
            Conv2d(rng, c_in, w_a, 3, stride=2, padding=1),
            Conv2d(rng, w_a, w_b, 3, stride=2, padding=1),
            Conv2d(rng, w_b, c8, 3, stride=2, padding=1),
            Conv2d(rng, c8, c16, 3, stride=2, padding=1),
            Conv2d(rng, c16, c32, 3, stride=2, padding=1),
        ]
        self.proj = [Conv2d(rng, c, d, 1) for c in cfg.channels]
        self.injection_layers = tuple(cfg.injection_layers) or backbone_cfg.tap_layers
        bad = [i for i in self.injection_layers if not 1 <= i <= backbone_cfg.depth]
        if bad:
            raise ConfigError(f"injection layers {bad} outside [1, {backbone_cfg.depth}]")
        self.injectors = {layer: CrossAttention(rng, d) for layer in self.injection_layers}
        self.extractor = CrossAttention(rng, d)
        self.embed_dim = d
        h, w = backbone_cfg.image_size
        if h % 32 or w % 32:
            raise ConfigError(f"adapter stem needs an image size divisible by 32, got ({h},{w})")
        self._level_hw = [(h // s, w // s) for s in (8, 16, 32)]

    def stem_tokens(self, images: Tensor) -> Tensor:
        """Flattened adapter token sequence (B, N8+N16+N32, d)."""
        h, w = images.shape[2], images.shape[3]
        if (h // 8, w // 8) != self._level_hw[0]:
            raise ShapeError(f"adapter stem built for {self._level_hw[0]} at stride 8, got ({h},{w})")
        x = images
        levels = []
        for i, conv in enumerate(self.stem):
            x = F.relu(conv(x))
            if i >= 2:
                levels.append(x)
        tokens = []
        for level, pr in zip(levels, self.proj):
            t = pr(level)  # (B, d, h, w)
            b, d, lh, lw = t.shape
            tokens.append(F.reshape(F.transpose(t, (0, 2, 3, 1)), (b, lh * lw, d)))
        return F.concat(tokens, axis=1)

    def pyramid(self, adapter_tokens: Tensor, final_tokens: Tensor) -> list[Tensor]:
        """Three channel-first maps at strides 8/16/32 after extraction."""
        updated = F.add(adapter_tokens, self.extractor(adapter_tokens, final_tokens))
        b, _, d = updated.shape
        maps = []
        offset = 0
        for lh, lw in self._level_hw:
            n = lh * lw
            chunk = F.slice_ranges(updated, (None, (offset, offset + n), None))
            maps.append(F.transpose(F.reshape(chunk, (b, lh, lw, d)), (0, 3, 1, 2)))
            offset += n
        return maps

    def named_parameters(self, prefix: str = "peft.adapter") -> Params:
        for i, conv in enumerate(self.stem):
            yield from conv.named_parameters(f"{prefix}.stem.{i}")
        for i, pr in enumerate(self.proj):
            yield from pr.named_parameters(f"{prefix}.proj.{i}")
        for layer in self.injection_layers:
            yield from self.injectors[layer].named_parameters(f"{prefix}.inject.{layer}")
        yield from self.extractor.named_parameters(f"{prefix}.extract")


# ---------------------------------------------------------------------------
# attachment operations


def attach_lora(backbone: ViTBackbone, cfg: LoraConfig, seed: int = 0) -> ViTBackbone:
    """Wrap the configured linear maps of every block; forward is unchanged
    until the adapters train (the up matrices start at zero)."""
    if getattr(backbone, "lora", None) is not None:
        raise ConfigError("backbone already has low-rank adapters attached")
    rng = np.random.default_rng(seed)
    attachment = LoraAttachment(cfg=cfg)
    for i, block in enumerate(backbone.blocks):
        for target in cfg.targets:
            group, attr = _TARGET_ATTR[target]
            base = getattr(block, attr, None)
            if not isinstance(base, Linear):
                raise ConfigError(f"target {target!r} absent in backbone block {i}")
            wrapped = LoraLinear(rng, base, cfg.rank, cfg.scaling)
            setattr(block, attr, wrapped)
            attachment.layers.append((f"blocks.{i}.{group}.{attr}", wrapped))
    backbone.lora = attachment
    return backbone


def merge_lora(backbone: ViTBackbone) -> ViTBackbone:
    """Materialize every effective weight and drop the wrappers. Calling this
    on a backbone without adapters is a no-op, so merging is idempotent."""
    attachment = getattr(backbone, "lora", None)
    if attachment is None:
        return backbone
    for block in backbone.blocks:
        for attr in ("q", "v", "fc1", "fc2"):
            layer = getattr(block, attr, None)
            if isinstance(layer, LoraLinear):
                layer.base.weight.data[...] = layer.merged_weight().astype(np.float32)
                setattr(block, attr, layer.base)
    backbone.lora = None
    return backbone


def attach_vpt(backbone: ViTBackbone, cfg: VptConfig, seed: int = 0) -> ViTBackbone:
    if backbone.vpt is not None:
        raise ConfigError("backbone already has prompt blocks attached")
    rng = np.random.default_rng(seed)
    backbone.vpt = VptAttachment(rng, cfg, backbone.cfg.depth, backbone.cfg.embed_dim)
    return backbone


def attach_vit_adapter(backbone: ViTBackbone, cfg: VitAdapterConfig, seed: int = 0) -> ViTBackbone:
    if backbone.adapter is not None:
        raise ConfigError("backbone already has a convolutional adapter attached")
    rng = np.random.default_rng(seed)
    backbone.adapter = VitAdapterAttachment(rng, cfg, backbone.cfg)
    return backbone


def attachment_kind(backbone: ViTBackbone) -> str | None:
    if getattr(backbone, "lora", None) is not None:
        return "lora"
    if backbone.vpt is not None:
        return "vpt"
    if backbone.adapter is not None:
        return "vit_adapter"
    return None


# ---------------------------------------------------------------------------
# freeze policies


def normalize_policy(name: str) -> str:
    norm = name.replace("-", "_")
    if norm == "full_fine_tune":
        norm = "full_finetune"
    if norm not in POLICIES:
        raise ConfigError(f"unknown freeze policy {name!r}; valid: {list(POLICIES)}")
    return norm


def policy_trains(policy: str, name: str) -> bool:
    """Whether a parameter name belongs to the policy's trainable set."""
    if policy == "full_finetune":
        return True
    if name.startswith(("neck.", "decoder.")):
        return True
    if policy == "lora":
        return name.startswith("peft.lora.")
    if policy == "vpt":
        return name.startswith("peft.vpt.")
    if policy == "vit_adapter":
        return name.startswith("peft.adapter.")
    return False


def apply_freeze_policy(model, policy: str):
    """Mark exactly the policy's trainable set; everything else never enters
    the tape, so frozen values stay bit-identical across optimization."""
    policy = normalize_policy(policy)
    kind = attachment_kind(model.backbone)
    if policy in ("lora", "vpt", "vit_adapter") and kind != policy:
        raise ConfigError(f"policy {policy!r} requires a matching attachment, found {kind!r}")
    if policy in ("full_finetune", "linear_probe") and kind is not None:
        raise ConfigError(f"policy {policy!r} is incompatible with the {kind!r} attachment")
    for name, tensor in model.named_parameters():
        tensor.requires_grad = policy_trains(policy, name)
    model.policy = policy
    return model


@dataclass(frozen=True)
class ParameterReport:
    total: int
    trainable: int
    encoder: int
    neck: int
    decoder: int
    per_attachment: dict
    trainable_fraction: float
    encoder_trainable_fraction: float

    def attachment_total(self) -> int:
        return sum(self.per_attachment.values())


def count_parameters(model) -> ParameterReport:
    """Exact element counts per component, plus trainable fractions."""
    groups = {"encoder": 0, "neck": 0, "decoder": 0}
    per_attachment: dict[str, int] = {}
    total = trainable = 0
    encoder_total = encoder_trainable = 0
    for name, tensor in model.named_parameters():
        n = tensor.size
        total += n
        if tensor.requires_grad:
            trainable += n
        head = name.split(".", 1)[0]
        if head == "peft":
            kind = name.split(".")[1]
            per_attachment[kind] = per_attachment.get(kind, 0) + n
        elif head in groups:
            groups[head] += n
        if head == "encoder":
            encoder_total += n
            if tensor.requires_grad:
                encoder_trainable += n
    return ParameterReport(
        total=total,
        trainable=trainable,
        encoder=groups["encoder"],
        neck=groups["neck"],
        decoder=groups["decoder"],
        per_attachment=per_attachment,
        trainable_fraction=trainable / total if total else 0.0,
        encoder_trainable_fraction=encoder_trainable / encoder_total if encoder_total else 0.0,
    )

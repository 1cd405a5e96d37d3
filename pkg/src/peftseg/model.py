"""Composition of backbone, PEFT attachment, neck, and decoder head.

The model owns the flat parameter namespace (``encoder.``, ``peft.``,
``neck.``, ``decoder.``) that freeze policies, optimizers, and checkpoints
operate on. Construction is fully determined by the configs plus one seed.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, functional as F, load_checkpoint, save_checkpoint
from .backbone import BackboneConfig, ViTBackbone
from .decoders import AdapterNeck, DecoderConfig, Neck, build_decoder, decode
from .errors import CheckpointError
from .peft import (LoraConfig, VitAdapterConfig, VptConfig, apply_freeze_policy,
                   attach_lora, attach_vit_adapter, attach_vpt, normalize_policy)


class SegmentationModel:
    def __init__(self, backbone: ViTBackbone, decoder_cfg: DecoderConfig, seed: int = 0):
        self.backbone = backbone
        self.decoder_cfg = decoder_cfg
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        d = backbone.cfg.embed_dim
        self.neck = None
        pyramid_channels = None
        if decoder_cfg.needs_pyramid:
            if backbone.adapter is not None:
                self.neck = AdapterNeck(rng, d)
            else:
                self.neck = Neck(rng, d)
            pyramid_channels = self.neck.channels
        self.decoder = build_decoder(rng, decoder_cfg, d, backbone.cfg.patch_size, pyramid_channels)
        self.policy = None

    # -- forward -------------------------------------------------------------

    def forward(self, images, bands=None, meta=None, training: bool = False) -> Tensor:
        """Per-pixel class logits (B, K, H, W) for a normalized image batch."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        if x.ndim == 3:
            x = F.reshape(x, (1,) + x.shape)
        tokens = self.backbone.embed_patches(x, bands)
        if self.backbone.cfg.metadata_enabled and meta is not None:
            vec = self.backbone.metadata(meta["lat"], meta["lon"], meta["day_of_year"], meta["year"])
            tokens = F.add(tokens, F.reshape(vec, (vec.shape[0], 1, vec.shape[1])))
        adapter_tokens = None
        if self.backbone.adapter is not None:
            adapter_tokens = self.backbone.adapter.stem_tokens(x)
        taps = self.backbone.forward_features(tokens, adapter_tokens=adapter_tokens)
        out_hw = (x.shape[2], x.shape[3])
        if self.decoder_cfg.needs_pyramid:
            if self.backbone.adapter is not None:
                b, gh, gw, d = taps[-1].shape
                final_tokens = F.reshape(taps[-1], (b, gh * gw, d))
                pyramid = self.neck(self.backbone.adapter.pyramid(adapter_tokens, final_tokens))
            else:
                pyramid = self.neck(taps)
            return decode(pyramid, self.decoder_cfg, self.decoder, out_hw, training)
        return decode(taps[-1], self.decoder_cfg, self.decoder, out_hw, training)

    # -- parameters ------------------------------------------------------------

    def named_parameters(self):
        yield from self.backbone.named_parameters("encoder")
        if self.backbone.lora is not None:
            yield from self.backbone.lora.named_parameters("peft.lora")
        if self.backbone.vpt is not None:
            yield from self.backbone.vpt.named_parameters("peft.vpt")
        if self.backbone.adapter is not None:
            yield from self.backbone.adapter.named_parameters("peft.adapter")
        if self.neck is not None:
            yield from self.neck.named_parameters("neck")
        yield from self.decoder.named_parameters("decoder")

    def named_buffers(self):
        yield from self.decoder.named_buffers("decoder")

    def trainable_parameters(self):
        for name, t in self.named_parameters():
            if t.requires_grad:
                yield name, t

    # -- persistence -----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[f"buffers.{name}"] = buf
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: t for name, t in self.named_parameters()}
        buffers = dict(self.named_buffers())
        seen = set()
        for name, arr in state.items():
            if name.startswith("buffers."):
                key = name[len("buffers."):]
                if key not in buffers:
                    raise CheckpointError(f"unexpected buffer {key!r} in checkpoint")
                if buffers[key].shape != arr.shape:
                    raise CheckpointError(f"buffer {key!r}: shape {arr.shape} vs {buffers[key].shape}")
                buffers[key][...] = arr
                seen.add(name)
                continue
            if name not in own:
                raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
            if own[name].shape != tuple(arr.shape):
                raise CheckpointError(f"tensor {name!r}: shape {tuple(arr.shape)} vs {own[name].shape}")
            own[name].data[...] = arr
            seen.add(name)
        missing = ({k for k in own} | {f"buffers.{k}" for k in buffers}) - seen
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:5]}...")

    def save(self, directory) -> None:
        save_checkpoint(directory, self.state_dict())

    def load(self, directory) -> None:
        self.load_state_dict(load_checkpoint(directory))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_dict().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.load_state_dict(snap)


def build_model(backbone_cfg: BackboneConfig, decoder_cfg: DecoderConfig, method: str,
                seed: int = 0, lora_cfg: LoraConfig | None = None,
                vpt_cfg: VptConfig | None = None,
                adapter_cfg: VitAdapterConfig | None = None) -> SegmentationModel:
    """Build backbone + attachment + head for a freeze-policy method and mark
    the trainable set."""
    method = normalize_policy(method)
    ss = np.random.SeedSequence(seed)
    backbone_seed, attach_seed, head_seed = [int(s.generate_state(1)[0]) for s in ss.spawn(3)]
    backbone = ViTBackbone(backbone_cfg, seed=backbone_seed)
    if method == "lora":
        attach_lora(backbone, lora_cfg or LoraConfig(), seed=attach_seed)
    elif method == "vpt":
        attach_vpt(backbone, vpt_cfg or VptConfig(), seed=attach_seed)
    elif method == "vit_adapter":
        attach_vit_adapter(backbone, adapter_cfg or VitAdapterConfig(), seed=attach_seed)
    model = SegmentationModel(backbone, decoder_cfg, seed=head_seed)
    return apply_freeze_policy(model, method)

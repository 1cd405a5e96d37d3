"""Generalization diagnostics and analytic parameter/memory accounting.

The distance report quantifies geographic shift: for every sample of a split,
the minimum Euclidean distance from its image embedding to any training
embedding, averaged per split (exhaustive search; split sizes are small at
desk scale). The parameter/memory report combines closed-form parameter
counts with a tape-trace activation estimate so the footprint ordering of the
freeze policies is visible without a GPU.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import trace
from .backbone import BackboneConfig
from .data import DatasetManifest, normalize, reflect_pad_to, subset_bands
from .decoders import DecoderConfig, Neck, build_decoder
from .errors import DataError
from .model import SegmentationModel, build_model
from .peft import LoraConfig, VitAdapterConfig, VptConfig


# ---------------------------------------------------------------------------
# embeddings


def split_embeddings(model: SegmentationModel, manifest: DatasetManifest, split: str,
                     bands=None) -> tuple[list[str], list[str], np.ndarray]:
    """Image embeddings for one split: (sample_ids, regions, (n, d) matrix)."""
    ids = manifest.split_ids(split)
    if not ids:
        raise DataError(f"split {split!r} is empty")
    regions = []
    rows = []
    meta_enabled = model.backbone.cfg.metadata_enabled
    for sid in ids:
        sample = normalize(manifest.load_sample(sid), manifest.band_stats)
        if bands is not None and tuple(bands) != sample.bands:
            sample = subset_bands(sample, bands)
        if sample.mask.shape != model.backbone.cfg.image_size:
            sample = reflect_pad_to(sample, model.backbone.cfg.image_size)
        kwargs = {}
        if meta_enabled:
            kwargs = {"lat": sample.lat, "lon": sample.lon,
                      "day_of_year": sample.day_of_year, "year": sample.year}
        emb = model.backbone.image_embedding(sample.image, sample.bands, **kwargs)
        rows.append(np.asarray(emb, dtype=np.float64))
        regions.append(sample.region)
    return ids, regions, np.stack(rows)


def export_embeddings(model: SegmentationModel, manifest: DatasetManifest, split: str,
                      out_path=None, bands=None) -> list[tuple]:
    """One row per sample: (sample_id, region, embedding). Optionally as CSV."""
    ids, regions, matrix = split_embeddings(model, manifest, split, bands)
    rows = list(zip(ids, regions, matrix))
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        dim = matrix.shape[1]
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "region"] + [f"e{i}" for i in range(dim)])
            for sid, region, emb in rows:
                writer.writerow([sid, region] + [f"{v:.8g}" for v in emb])
    return rows


def min_distances_to_train(queries: np.ndarray, train: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbor distance per query row (exhaustive)."""
    out = np.empty(queries.shape[0], dtype=np.float64)
    for i, q in enumerate(queries):
        d2 = ((train - q) ** 2).sum(axis=1)
        out[i] = np.sqrt(d2.min())
    return out


@dataclass(frozen=True)
class DistanceReport:
    """Mean min-distance to the training set per split; ghos only when present."""
    val: float
    test: float
    ghos: float | None

    def as_dict(self) -> dict:
        out = {"val": self.val, "test": self.test}
        if self.ghos is not None:
            out["ghos"] = self.ghos
        return out


def distance_report(model: SegmentationModel, manifest: DatasetManifest,
                    bands=None) -> DistanceReport:
    if not manifest.split_ids("train"):
        raise DataError("train split is empty; nothing to measure distances against")
    _, _, train_emb = split_embeddings(model, manifest, "train", bands)
    means = {}
    for split in ("val", "test", "ghos"):
        if not manifest.has_split(split):
            if split == "ghos":
                continue
            raise DataError(f"split {split!r} is empty")
        _, _, emb = split_embeddings(model, manifest, split, bands)
        means[split] = float(min_distances_to_train(emb, train_emb).mean())
    return DistanceReport(val=means["val"], test=means["test"], ghos=means.get("ghos"))


# ---------------------------------------------------------------------------
# closed-form parameter counts


def encoder_param_count(cfg: BackboneConfig) -> int:
    d = cfg.embed_dim
    hidden = cfg.mlp_hidden
    count = len(cfg.band_ids) * cfg.patch_size ** 2 * d + d  # band slabs + shared bias
    count += cfg.num_patches * d                             # positional table
    if cfg.metadata_enabled:
        count += 3 * (2 * d + d) + (d + d)                   # lat/lon/day (2->d), year (1->d)
    per_block = 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + 4 * d
    return count + cfg.depth * per_block


def lora_param_count(cfg: BackboneConfig, lora: LoraConfig) -> int:
    d = cfg.embed_dim
    hidden = cfg.mlp_hidden
    dims = {"attention-query": (d, d), "attention-value": (d, d),
            "mlp-fc1": (d, hidden), "mlp-fc2": (hidden, d)}
    per_layer = sum(lora.rank * (din + dout) for din, dout in
                    (dims[t] for t in lora.targets))
    return cfg.depth * per_layer


def vpt_param_count(cfg: BackboneConfig, vpt: VptConfig) -> int:
    return cfg.depth * vpt.prompts_per_layer * cfg.embed_dim


def adapter_param_count(cfg: BackboneConfig, adapter: VitAdapterConfig) -> int:
    d = cfg.embed_dim
    c_in = len(cfg.band_ids)
    c8, c16, c32 = adapter.channels
    w_a = max(c8 // 4, 8)
    w_b = max(c8 // 2, 8)
    stem_dims = [(c_in, w_a), (w_a, w_b), (w_b, c8), (c8, c16), (c16, c32)]
    count = sum(co * ci * 9 + co for ci, co in stem_dims)
    count += sum(d * c + d for c in adapter.channels)       # 1x1 projections
    n_blocks = len(adapter.injection_layers or cfg.tap_layers) + 1  # injectors + extractor
    count += n_blocks * 4 * (d * d + d)
    return count


def peft_param_count(cfg: BackboneConfig, method: str, lora: LoraConfig | None = None,
                     vpt: VptConfig | None = None,
                     adapter: VitAdapterConfig | None = None) -> int:
    if method == "lora":
        return lora_param_count(cfg, lora or LoraConfig())
    if method == "vpt":
        return vpt_param_count(cfg, vpt or VptConfig())
    if method == "vit_adapter":
        return adapter_param_count(cfg, adapter or VitAdapterConfig())
    return 0


def head_param_counts(backbone_cfg: BackboneConfig, decoder_cfg: DecoderConfig,
                      adapter_attached: bool = False) -> tuple[int, int]:
    """(neck params, decoder params) for the configured head."""
    rng = np.random.default_rng(0)
    neck_params = 0
    pyramid_channels = None
    if decoder_cfg.needs_pyramid:
        d = backbone_cfg.embed_dim
        if adapter_attached:
            from .decoders import AdapterNeck
            neck = AdapterNeck(rng, d)
        else:
            neck = Neck(rng, d)
        neck_params = sum(t.size for _, t in neck.named_parameters())
        pyramid_channels = neck.channels
    head = build_decoder(rng, decoder_cfg, backbone_cfg.embed_dim,
                         backbone_cfg.patch_size, pyramid_channels)
    return neck_params, sum(t.size for _, t in head.named_parameters())


# ---------------------------------------------------------------------------
# activation accounting


def traced_activation_elements(model: SegmentationModel, batch_size: int) -> int:
    """Sum of tape-node output elements for one forward, scaled by batch size.

    Frozen subgraphs never enter the tape, so the estimate shrinks with the
    freeze policy exactly like the stored-activation footprint would.
    """
    cfg = model.backbone.cfg
    h, w = cfg.image_size
    dummy = np.zeros((1, len(cfg.band_ids), h, w), dtype=np.float32)
    logits = model.forward(dummy, training=True)
    if logits.node is None:
        return 0
    total = sum(node.output.size for node in trace(logits).nodes)
    return total * batch_size


def parameter_memory_report(backbone_cfg: BackboneConfig, decoder_cfg: DecoderConfig,
                            batch_size: int = 8, methods=None,
                            lora: LoraConfig | None = None, vpt: VptConfig | None = None,
                            adapter: VitAdapterConfig | None = None,
                            include_activations: bool = True) -> list[dict]:
    """One row per freeze policy: exact parameter counts, trainable-state
    element counts (grads + optimizer moments), and the activation estimate."""
    methods = list(methods or ("full_finetune", "linear_probe", "lora", "vpt", "vit_adapter"))
    encoder = encoder_param_count(backbone_cfg)
    rows = []
    for method in methods:
        peft = peft_param_count(backbone_cfg, method, lora, vpt, adapter)
        neck_params, decoder_params = head_param_counts(
            backbone_cfg, decoder_cfg, adapter_attached=method == "vit_adapter")
        total = encoder + peft + neck_params + decoder_params
        if method == "full_finetune":
            trainable = total
        elif method == "linear_probe":
            trainable = neck_params + decoder_params
        else:
            trainable = peft + neck_params + decoder_params
        row = {
            "method": method,
            "encoder_params": encoder,
            "peft_params": peft,
            "peft_pct_of_encoder": 100.0 * peft / encoder,
            "neck_params": neck_params,
            "decoder_params": decoder_params,
            "total_params": total,
            "trainable_params": trainable,
            "trainable_pct": 100.0 * trainable / total,
            "grad_elements": trainable,
            "optimizer_state_elements": 2 * trainable,
        }
        if include_activations:
            model = build_model(backbone_cfg, decoder_cfg, method,
                                lora_cfg=lora, vpt_cfg=vpt, adapter_cfg=adapter)
            row["activation_elements_per_batch"] = traced_activation_elements(model, batch_size)
        rows.append(row)
    return rows


def format_param_display(count: int) -> str:
    """Raw count plus the M-rounded display used in reports."""
    return f"{count} ({count / 1e6:.1f}M)"

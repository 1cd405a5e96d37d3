"""Embeddings export, distance report, parameter/memory accounting."""

import csv

import numpy as np
import pytest

from peftseg.backbone import ViTBackbone
from peftseg.data import normalize
from peftseg.decoders import DecoderConfig
from peftseg.diagnostics import (adapter_param_count, distance_report,
                                 encoder_param_count, export_embeddings, head_param_counts,
                                 lora_param_count, min_distances_to_train,
                                 parameter_memory_report, peft_param_count,
                                 split_embeddings, traced_activation_elements,
                                 vpt_param_count)
from peftseg.model import build_model
from peftseg.peft import LoraConfig, VitAdapterConfig, VptConfig, count_parameters

from conftest import TINY_ADAPTER, tiny_backbone


@pytest.fixture(scope="module")
def diag_model(desk_manifest, desk_backbone):
    return build_model(desk_backbone, DecoderConfig("linear", 2), "full_finetune", seed=0)


def test_export_rows_and_csv(tmp_path, diag_model, desk_manifest):
    path = tmp_path / "emb.csv"
    rows = export_embeddings(diag_model, desk_manifest, "val", out_path=path)
    assert len(rows) == len(desk_manifest.split_ids("val"))
    assert all(vec.shape == (64,) for _, _, vec in rows)
    with open(path) as fh:
        parsed = list(csv.reader(fh))
    assert parsed[0][:2] == ["sample_id", "region"]
    assert len(parsed[0]) == 2 + 64
    assert len(parsed) == 1 + len(rows)


def test_identical_samples_identical_rows(diag_model, desk_manifest):
    sid = desk_manifest.split_ids("val")[0]
    sample = normalize(desk_manifest.load_sample(sid), desk_manifest.band_stats)
    a = diag_model.backbone.image_embedding(sample.image, sample.bands)
    b = diag_model.backbone.image_embedding(sample.image, sample.bands)
    np.testing.assert_array_equal(a, b)


def test_constant_image_embedding_matches_direct_path(desk_backbone):
    """A constant (all-zero normalized) image exercises only bias + position,
    so the embedding equals the forward of exactly that path."""
    backbone = ViTBackbone(desk_backbone, seed=3)
    zero = np.zeros((6, 64, 64), dtype=np.float32)
    emb = backbone.image_embedding(zero)
    tokens = backbone.patch_embed.bias.data[None, :] + backbone.patch_embed.pos_table.data
    from peftseg.autodiff import Tensor
    direct = backbone.forward_features(Tensor(tokens))[-1]
    np.testing.assert_allclose(emb, direct.data.reshape(-1, 64).mean(axis=0), atol=1e-6)


def test_min_distance_brute_force_exact():
    train = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    queries = np.array([[1.0, 1.0]])
    out = min_distances_to_train(queries, train)
    np.testing.assert_array_equal(out, [1.0])


def test_distance_report_equals_independent_brute_force(diag_model, desk_manifest):
    report = distance_report(diag_model, desk_manifest)
    _, _, train_emb = split_embeddings(diag_model, desk_manifest, "train")
    for split, value in report.as_dict().items():
        _, _, emb = split_embeddings(diag_model, desk_manifest, split)
        mins = []
        for q in emb:
            best = np.inf
            for t in train_emb:
                d2 = ((t - q) ** 2).sum()
                best = min(best, d2)
            mins.append(np.sqrt(best))
        assert value == float(np.mean(mins)), split


def test_duplicate_of_train_sample_has_zero_distance():
    train = np.array([[2.0, 3.0], [5.0, 1.0]])
    assert min_distances_to_train(train[:1], train)[0] == 0.0


def test_ghos_row_only_when_split_exists(diag_model, desk_manifest):
    report = distance_report(diag_model, desk_manifest)
    assert report.ghos is not None
    import copy
    manifest = copy.copy(desk_manifest)
    manifest.splits = {sid: s for sid, s in desk_manifest.splits.items() if s != "ghos"}
    no_ghos = distance_report(diag_model, manifest)
    assert no_ghos.ghos is None
    assert "ghos" not in no_ghos.as_dict()


# ---------------------------------------------------------------------------
# parameter/memory accounting


def test_closed_forms_match_constructed_models():
    cfg = tiny_backbone()
    for method, extra in (("lora", {"lora_cfg": LoraConfig(rank=4)}),
                          ("vpt", {"vpt_cfg": VptConfig(prompts_per_layer=9)}),
                          ("vit_adapter", {"adapter_cfg": TINY_ADAPTER})):
        model = build_model(cfg, DecoderConfig("unet", 2), method, **extra)
        report = count_parameters(model)
        expected = peft_param_count(cfg, method,
                                    lora=extra.get("lora_cfg"), vpt=extra.get("vpt_cfg"),
                                    adapter=extra.get("adapter_cfg"))
        assert report.attachment_total() == expected, method
        assert report.encoder == encoder_param_count(cfg)


def test_closed_form_table_values():
    from peftseg.backbone import vit_base_config, vit_large_config
    bands = tuple(f"b{i}" for i in range(6))
    vit_b = vit_base_config(bands)
    vit_l = vit_large_config(bands)
    assert vpt_param_count(vit_b, VptConfig()) == 921_600
    assert lora_param_count(vit_b, LoraConfig()) == 2_064_384
    assert vpt_param_count(vit_l, VptConfig()) == 2_457_600
    assert lora_param_count(vit_l, LoraConfig()) == 5_505_024


def test_metadata_embedding_counts():
    with_meta = encoder_param_count(tiny_backbone(metadata=True))
    without = encoder_param_count(tiny_backbone(metadata=False))
    d = 64
    assert with_meta - without == 3 * (2 * d + d) + (d + d)


def test_report_rows_and_footprint_ordering(desk_backbone):
    rows = parameter_memory_report(desk_backbone, DecoderConfig("linear", 2),
                                   batch_size=8, adapter=TINY_ADAPTER,
                                   include_activations=True)
    by_method = {row["method"]: row for row in rows}
    full = by_method["full_finetune"]
    lora = by_method["lora"]
    probe = by_method["linear_probe"]
    # trainable-state footprint ordering: full >= lora >= linear probe
    assert full["optimizer_state_elements"] >= lora["optimizer_state_elements"]
    assert lora["optimizer_state_elements"] >= probe["optimizer_state_elements"]
    assert probe["optimizer_state_elements"] < full["optimizer_state_elements"]
    # percentages follow the table convention (peft / encoder)
    assert lora["peft_pct_of_encoder"] == pytest.approx(
        100.0 * lora["peft_params"] / lora["encoder_params"])
    # activation estimate shrinks when the encoder is frozen out of the tape
    assert probe["activation_elements_per_batch"] < full["activation_elements_per_batch"]


def test_traced_activation_scales_with_batch(desk_backbone):
    model = build_model(desk_backbone, DecoderConfig("linear", 2), "full_finetune", seed=0)
    one = traced_activation_elements(model, 1)
    eight = traced_activation_elements(model, 8)
    assert eight == 8 * one


def test_traced_activation_matches_manual_tape_sum(desk_backbone):
    from peftseg.autodiff import trace
    model = build_model(desk_backbone, DecoderConfig("linear", 2), "full_finetune", seed=0)
    h, w = desk_backbone.image_size
    dummy = np.zeros((1, 6, h, w), dtype=np.float32)
    logits = model.forward(dummy, training=True)
    manual = sum(node.output.size for node in trace(logits).nodes)
    assert traced_activation_elements(model, 1) == manual


def test_adapter_percentage_for_large_shape_in_band():
    from peftseg.backbone import vit_large_config
    cfg = vit_large_config(tuple(f"b{i}" for i in range(6)))
    ratio = adapter_param_count(cfg, VitAdapterConfig()) / encoder_param_count(cfg)
    assert 0.05 <= ratio <= 0.15


def test_head_param_counts_match_estimate():
    from peftseg.decoders import estimate_decoder_params
    cfg = tiny_backbone()
    for kind in ("linear", "fcn", "upernet", "unet"):
        dec_cfg = DecoderConfig(kind, 3)
        _, decoder_params = head_param_counts(cfg, dec_cfg)
        assert decoder_params == estimate_decoder_params(dec_cfg, 64, 8)

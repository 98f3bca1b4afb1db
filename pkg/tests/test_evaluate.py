import json
from itertools import combinations

import numpy as np
import pytest
import torch

from wplora.evaluate import (PAPER_TABLE1, BenchmarkSpec, EmptyRegionError, MetricReport, compare_ablation,
                             contact_sheet, cosine, figure_envelope, identity_similarity, locate_parts,
                             part_descriptor, prompt_adherence, run_benchmark, select_combinations,
                             shuffled_source)
from wplora.numerics import RngStream
from wplora.persona import BACKGROUND_NAMES, BACKGROUNDS, NEUTRAL_GRAY, band_boxes
from wplora.polyptych import build_prompts


class ZeroVelocity(torch.nn.Module):
    def forward(self, z, clean, bits, ids, t, record_attention=None):
        return torch.zeros_like(z)


def _refs(view):
    return [(view.image, view.masks[j]) for j in range(3)]


# ---------------------------------------------------------------------------
# descriptor


def test_descriptor_unit_and_self_similarity(dataset):
    for views in list(dataset.views.values())[:6]:
        for v in views:
            for j in range(3):
                d = part_descriptor(v.image, v.masks[j])
                assert d.shape == (13,) and np.isfinite(d).all()
                assert abs(np.linalg.norm(d) - 1) < 1e-12
                assert abs(cosine(d, d) - 1) < 1e-6


def test_descriptor_red_vs_green():
    img = np.zeros((8, 16, 3), np.uint8)
    img[:, :8] = (230, 20, 20)
    img[:, 8:] = (20, 230, 20)
    left = np.zeros((8, 16), bool)
    left[:, :8] = True
    a, b = part_descriptor(img, left), part_descriptor(img, ~left)
    assert not ((a[3:11] > 0) & (b[3:11] > 0)).any()
    assert cosine(a, b) < 0.9


def test_descriptor_stripes_change_edge_rates():
    solid = np.full((12, 12, 3), (200, 40, 40), np.uint8)
    stripes = solid.copy()
    stripes[:, ::2] = (100, 20, 20)
    m = np.ones((12, 12), bool)
    a, b = part_descriptor(solid, m), part_descriptor(stripes, m)
    assert a[11] == 0 and a[12] == 0
    assert b[11] > 0 and b[12] == 0


def test_descriptor_empty_region():
    with pytest.raises(EmptyRegionError):
        part_descriptor(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 4), bool))


def test_metric_separability(dataset):
    ids = sorted(dataset.personas)
    matched, mismatched = [], []
    for j in range(3):
        desc = {i: [part_descriptor(v.image, v.masks[j]) for v in dataset.views[i]] for i in ids}
        for i in ids:
            matched += [cosine(a, b) for a, b in combinations(desc[i], 2)]
        for a, b in combinations(ids, 2):
            mismatched.append(cosine(desc[a][0], desc[b][1]))
    assert np.mean(matched) - np.mean(mismatched) >= 0.15


# ---------------------------------------------------------------------------
# part location


def test_locate_parts_iou_full_dataset(dataset):
    for views in dataset.views.values():
        for v in views:
            reg = locate_parts(v.image, v.params.pose, v.params.background)
            for j in range(3):
                iou = (reg[j] & v.masks[j]).sum() / (reg[j] | v.masks[j]).sum()
                assert iou >= 0.9


def test_locate_parts_background_only():
    for bg, color in BACKGROUNDS.items():
        canvas = np.empty((64, 48, 3), np.uint8)
        canvas[:] = color
        assert not locate_parts(canvas, "stand", bg).any()


def test_envelope_shifts_with_pose():
    for pose, sign in (("lean-left", -1), ("lean-right", 1)):
        for j, ((r0, r1, spans), (_, _, ref)) in enumerate(zip(band_boxes(pose, 0).values(),
                                                               band_boxes("stand", 0).values())):
            assert np.sign(spans[0][0] - ref[0][0]) in (sign, 0)
    assert not np.array_equal(figure_envelope("lean-left"), figure_envelope("lean-right"))


# ---------------------------------------------------------------------------
# identity similarity


def test_identity_similarity_matched_render(dataset):
    for i, views in dataset.views.items():
        g = views[0]
        assert identity_similarity(g.image, _refs(views[1]), g.params.pose, g.params.background) > 0.95


def test_identity_similarity_shuffled_lower(dataset):
    ids = sorted(dataset.personas)
    rng = RngStream(0)
    diffs = []
    for k in range(50):
        i = ids[k % len(ids)]
        g = dataset.views[i][int(rng.integers(len(dataset.views[i])))]
        other = shuffled_source(ids, i)
        good = identity_similarity(g.image, _refs(dataset.views[i][0]), g.params.pose, g.params.background)
        bad = identity_similarity(g.image, _refs(dataset.views[other][0]), g.params.pose, g.params.background)
        diffs.append(good - bad)
    assert np.mean(diffs) > 0


def test_identity_similarity_gray_canvas_is_zero(dataset):
    canvas = np.empty((64, 48, 3), np.uint8)
    canvas[:] = NEUTRAL_GRAY
    v = dataset.views[0][0]
    assert identity_similarity(canvas, _refs(v), "stand", "sky") == 0.0


# ---------------------------------------------------------------------------
# prompt adherence


def test_prompt_adherence_contract(dataset):
    for views in dataset.views.values():
        for v in views:
            for bg in BACKGROUND_NAMES:
                score = prompt_adherence(v.image, build_prompts(background=bg, pose=v.params.pose))
                assert score == int(bg == v.params.background)


# ---------------------------------------------------------------------------
# benchmark


def test_combinations_respect_set_definitions(dataset):
    for pool in ("train", "test"):
        ids = sorted(dataset.train_ids if pool == "train" else dataset.test_ids)
        combos = select_combinations(dataset, ids, 3, RngStream(4))
        assert [c["set"] for c in combos] == [1, 1, 1, 2, 2, 2, 3, 3, 3]
        for c in combos:
            src = c["sources"]
            assert set(src) <= set(ids)
            fams = {dataset.family_of(i) for i in src}
            if c["set"] == 1:
                assert len(set(src)) == 1
            elif c["set"] == 2:
                assert len(fams) == 1 and len(set(src)) >= 2
            else:
                assert len(fams) >= 2


@pytest.fixture(scope="module")
def reports(dataset):
    model = ZeroVelocity()
    spec = BenchmarkSpec(steps=2)
    return {pool: run_benchmark(model, dataset, BenchmarkSpec(**{**spec.__dict__, "pool": pool}))
            for pool in ("train", "test")}


def test_benchmark_structure(reports, dataset):
    for pool, rep in reports.items():
        assert rep.overall["n"] == 180
        assert sorted(rep.sets) == ["1", "2", "3"] and all(rep.sets[k]["n"] == 60 for k in rep.sets)
        assert -1 <= rep.overall["identity_similarity"] <= 1
        assert 0 <= rep.overall["prompt_adherence"] <= 1
    assert not set(reports["train"].meta["identities"]) & set(reports["test"].meta["identities"])


def test_benchmark_deterministic(reports, dataset, tmp_path):
    again = run_benchmark(ZeroVelocity(), dataset, BenchmarkSpec(pool="test", steps=2), out_dir=tmp_path)
    assert again.to_dict() == reports["test"].to_dict()
    assert len(list(tmp_path.glob("test_combo*_set*.png"))) == 9


def test_report_json_roundtrip(reports, tmp_path):
    reports["train"].save(tmp_path / "r.json")
    back = MetricReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back == reports["train"]


def test_compare_ablation(reports):
    same = compare_ablation(reports, reports)
    for pool in ("train", "test"):
        d = same["pools"][pool]
        assert d["delta_is"] == 0 and d["delta_ps"] == 0
        assert all(v["delta_is"] == 0 for v in d["sets"].values())
    assert not same["matches_paper_direction"]
    assert same["pools"]["train"]["paper_delta_is"] == 0.0256
    assert same["pools"]["test"]["paper_delta_is"] == 0.0303
    assert PAPER_TABLE1["test"]["with"] == (0.2885, 0.6181)


def test_compare_ablation_verdict(reports):
    better = {}
    for pool, rep in reports.items():
        d = rep.to_dict()
        d["overall"] = {**d["overall"], "identity_similarity": d["overall"]["identity_similarity"] + 0.01}
        better[pool] = MetricReport.from_dict(d)
    assert compare_ablation(better, reports)["matches_paper_direction"]
    worse_test = {"train": better["train"], "test": reports["test"]}
    assert not compare_ablation(worse_test, reports)["matches_paper_direction"]


def test_compare_ablation_rejects_mismatched(reports):
    d = reports["test"].to_dict()
    d["meta"] = {**d["meta"], "spec": {**d["meta"]["spec"], "seed": 9}}
    with pytest.raises(ValueError, match="different benchmark specs"):
        compare_ablation({"test": MetricReport.from_dict(d)}, {"test": reports["test"]})
    with pytest.raises(ValueError, match="different pools"):
        compare_ablation({"test": reports["test"]}, reports)


def test_contact_sheet_layout():
    frames = [np.full((64, 64, 3), k, np.uint8) for k in range(7)]
    sheet = contact_sheet(frames, cols=5, gap=2)
    assert sheet.shape == (130, 328, 3)
    assert (sheet[66:130, 66:130] == 6).all()

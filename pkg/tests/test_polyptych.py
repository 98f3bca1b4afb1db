import json

import numpy as np
import pytest
from scipy.stats import chisquare

from wplora.numerics import RngStream
from wplora.persona import BACKGROUND_NAMES, NEUTRAL_GRAY, POSES
from wplora.polyptych import (VOCAB, CompositionError, LayoutError, build_layout, build_prompts, compose_sample,
                              mask_to_tokens, save_sample, select_subject_mask)


def brute_force_tokens(mask, patch, theta):
    h, w = mask.shape
    grid = np.zeros((h // patch, w // patch), dtype=bool)
    for r in range(h // patch):
        for c in range(w // patch):
            count = 0
            for y in range(r * patch, (r + 1) * patch):
                for x in range(c * patch, (c + 1) * patch):
                    count += bool(mask[y, x])
            grid[r, c] = count / (patch * patch) >= theta
    return grid


# ---------------------------------------------------------------------------
# layout


def test_default_layout():
    lay = build_layout()
    assert lay.wardrobe_width == 16 and lay.canvas_width == 48
    assert [b - a for a, b in lay.cell_rows] == [20, 20, 24]
    assert lay.grid == 16


def test_layout_partitions_frame():
    lay = build_layout()
    canvas = lay.canvas_mask()
    cells = np.zeros_like(canvas, dtype=int)
    for j in range(3):
        y0, y1, x0, x1 = lay.cell_box(j)
        cells[y0:y1, x0:x1] += 1
        assert y0 % 4 == 0 and y1 % 4 == 0
    assert ((cells == 1) ^ canvas).all()


def test_single_part_layout():
    assert build_layout(m_parts=1).cell_rows == ((0, 64),)


@pytest.mark.parametrize("kw", [{"canvas_fraction": 0.7}, {"frame": 62}, {"m_parts": 0}])
def test_layout_rejects_unalignable(kw):
    with pytest.raises(LayoutError):
        build_layout(**kw)


# ---------------------------------------------------------------------------
# token masks


def test_mask_to_tokens_saturation():
    assert mask_to_tokens(np.ones((64, 64), bool)).grid.all()


def test_mask_to_tokens_single_block():
    m = np.zeros((64, 64), bool)
    m[8:12, 20:24] = True
    grid = mask_to_tokens(m).grid
    assert grid.sum() == 1 and grid[2, 5]


def test_mask_to_tokens_matches_brute_force():
    rng = np.random.default_rng(0)
    for k in range(100):
        density = rng.uniform(0.05, 0.6)
        m = rng.uniform(size=(64, 64)) < density
        theta = [0.25, 0.5, 1 / 16, 1.0][k % 4]
        assert np.array_equal(mask_to_tokens(m, 4, theta).grid, brute_force_tokens(m, 4, theta))


def test_mask_to_tokens_shape_error():
    with pytest.raises(ValueError):
        mask_to_tokens(np.zeros((10, 64), bool))


# ---------------------------------------------------------------------------
# selective mask


def _masks():
    m = np.zeros((3, 64, 64), bool)
    m[0, 0:10, 20:30] = m[1, 20:40, 20:40] = m[2, 44:60, 24:40] = True
    return m


def test_select_never_and_always():
    m = _masks()
    empty, sel = select_subject_mask(m, 0.0, RngStream(0))
    assert not empty.any() and not sel.any()
    full, sel = select_subject_mask(m, 1.0, RngStream(0))
    assert np.array_equal(full, m.any(0)) and sel.all()


def test_select_frequency_and_union():
    m = _masks()
    rng = RngStream(11)
    n = 100_000
    counts = np.zeros(3)
    for _ in range(n):
        union, sel = select_subject_mask(m, 0.3, rng)
        counts += sel
    assert np.all(np.abs(counts / n - 0.3) < 0.005)
    for k in range(200):
        union, sel = select_subject_mask(m, 0.5, RngStream(k))
        expected = m[sel].any(0) if sel.any() else np.zeros((64, 64), bool)
        assert np.array_equal(union, expected)


def test_select_chi_square():
    m = _masks()
    rng = RngStream(5)
    n = 100_000
    # joint pattern of three independent Bernoulli(0.3) draws
    codes = np.zeros(8)
    for _ in range(n):
        _, sel = select_subject_mask(m, 0.3, rng)
        codes[sel[0] + 2 * sel[1] + 4 * sel[2]] += 1
    probs = np.array([np.prod([0.3 if (c >> b) & 1 else 0.7 for b in range(3)]) for c in range(8)])
    assert chisquare(codes, probs * n).pvalue > 0.01


# ---------------------------------------------------------------------------
# prompts


def test_prompts_identity_free():
    a = build_prompts(("face", "upper", "lower"), "sky", "stand")
    b = build_prompts(("face", "upper", "lower"), "sky", "stand")
    assert a == b and len(a.ids) == 16
    assert all(k < 64 for k in a.ids)
    assert a.background == "sky" and a.pose == "stand"


def test_prompt_composition_segments_distinct():
    segs = {build_prompts(background=b, pose=p).composition_ids for b in BACKGROUND_NAMES for p in POSES}
    assert len(segs) == 18


def test_prompt_unknown_word():
    with pytest.raises(KeyError):
        build_prompts(background="teal")
    with pytest.raises(KeyError):
        build_prompts(("face", "hat", "lower"))


def test_vocab_size():
    assert len(VOCAB) == 64


# ---------------------------------------------------------------------------
# composition


def test_same_identity_composition(dataset):
    i = dataset.train_ids[0]
    for v in dataset.views[i]:
        s = compose_sample(dataset, [i, i, i], (i, v.params.index), rng=RngStream(v.params.index))
        assert all(t != v.params.index for t in s.provenance["reference_views"])
        assert np.array_equal(s.inpaint_mask, build_layout().canvas_mask())
        assert np.array_equal(s.composite[:, 16:], v.image)
        assert not s.subject_masks[:, :, :16].any()
        assert np.array_equal(s.subject_masks[:, :, 16:], v.masks)


def _gray_outside_subject(sample, dataset):
    lay = build_layout()
    for j, (sid, t) in enumerate(zip(sample.provenance["sources"], sample.provenance["reference_views"])):
        y0, y1, x0, x1 = lay.cell_box(j)
        cell = sample.composite[y0:y1, x0:x1]
        ref = dataset.views[sid][t]
        part_colors = {tuple(c) for c in ref.image[ref.masks[j]]}
        for px in cell.reshape(-1, 3):
            assert tuple(px) == NEUTRAL_GRAY or tuple(px) in part_colors


def test_cross_family_composition(dataset):
    fams = dataset.families()
    face, upper, lower = fams[0][0], fams[2][1], fams[4][2]
    s = compose_sample(dataset, [(face, "face"), (upper, "upper"), (lower, "lower")], None, rng=RngStream(1),
                       scene=("lean-left", "sand"))
    assert s.provenance["sources"] == [face, upper, lower]
    assert (s.composite[:, 16:] == 0).all()
    assert s.prompt.background == "sand"
    _gray_outside_subject(s, dataset)


def test_wardrobe_never_leaks_exhaustive(dataset):
    rng = RngStream(3)
    for i in dataset.train_ids:
        for v in dataset.views[i]:
            s = compose_sample(dataset, [i, i, i], (i, v.params.index), rng=rng)
            assert all(t != v.params.index for t in s.provenance["reference_views"])
            _gray_outside_subject(s, dataset)


def test_composition_errors(dataset):
    i = dataset.train_ids[0]
    with pytest.raises(CompositionError):
        compose_sample(dataset, [i, i, i], (i, 99))
    with pytest.raises(CompositionError):
        compose_sample(dataset, [i, i, i], None)
    import copy

    one_view = copy.copy(dataset)
    one_view.views = {**dataset.views, i: dataset.views[i][:1]}
    with pytest.raises(CompositionError, match="other than the target"):
        compose_sample(one_view, [i, i, i], (i, 0))


def test_save_sample(tmp_path, dataset):
    i = dataset.train_ids[1]
    s = compose_sample(dataset, [i, i, i], (i, 0), rng=RngStream(0))
    side = save_sample(s, tmp_path, "s0")
    doc = json.loads(side.read_text())
    assert doc["provenance"]["sources"] == [i, i, i]
    assert len(doc["prompt_ids"]) == 16
    assert (tmp_path / "s0.png").exists() and (tmp_path / "s0_upper.png").exists()

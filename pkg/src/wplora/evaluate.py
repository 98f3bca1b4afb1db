"""Identity similarity, prompt adherence and the set-1/2/3 benchmark."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import rgb_to_hsv

from .numerics import RngStream
from .persona import (BACKGROUND_NAMES, BACKGROUNDS, CANVAS_H, CANVAS_W, MAX_OFFSET, NEUTRAL_GRAY, POSES,
                      PersonaDataset, band_boxes)
from .polyptych import build_layout

BG_TOLERANCE = 40
HUE_BINS = 8


class EmptyRegionError(ValueError):
    pass


def part_descriptor(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """13-dim unit vector: mean RGB, 8-bin hue histogram, luminance edge rates."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyRegionError("part_descriptor: empty region")
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    px = rgb[mask]
    hue = rgb_to_hsv(px)[:, 0]
    bins = np.minimum((hue * HUE_BINS).astype(int), HUE_BINS - 1)
    hist = np.bincount(bins, minlength=HUE_BINS) / len(px)

    lum = rgb @ np.array([0.299, 0.587, 0.114])
    hpair = mask[:, :-1] & mask[:, 1:]
    vpair = mask[:-1, :] & mask[1:, :]
    gx = np.abs(np.diff(lum, axis=1))[hpair].mean() if hpair.any() else 0.0
    gy = np.abs(np.diff(lum, axis=0))[vpair].mean() if vpair.any() else 0.0

    d = np.concatenate([px.mean(axis=0), hist, [gx, gy]])
    return d / np.linalg.norm(d)


def cosine(a, b) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def background_pixels(canvas: np.ndarray, background: str) -> np.ndarray:
    ref = np.array(BACKGROUNDS[background], dtype=np.int16)
    return (np.abs(canvas.astype(np.int16) - ref) <= BG_TOLERANCE).all(axis=-1)


def figure_envelope(pose: str, h=CANVAS_H, w=CANVAS_W) -> np.ndarray:
    """Pixels any figure in this pose can cover, over all horizontal offsets."""
    env = np.zeros((3, h, w), dtype=bool)
    for off in range(-MAX_OFFSET, MAX_OFFSET + 1):
        for j, (r0, r1, spans) in enumerate(band_boxes(pose, off).values()):
            env[j, r0:r1, spans[0][0]:spans[-1][1]] = True
    return env


def void_pixels(canvas: np.ndarray, background: str) -> np.ndarray:
    """Background-colored or neutral-gray (unfilled) pixels."""
    gray = (np.abs(canvas.astype(np.int16) - np.array(NEUTRAL_GRAY, dtype=np.int16)) <= BG_TOLERANCE).all(-1)
    return background_pixels(canvas, background) | gray


def locate_parts(canvas: np.ndarray, pose: str, background: str) -> np.ndarray:
    """Part regions of a canvas: pose band envelopes minus void pixels."""
    return figure_envelope(pose) & ~void_pixels(canvas, background)[None]


def identity_similarity(canvas: np.ndarray, references, pose: str, background: str) -> float:
    """Mean over parts of cosine(generated part, reference part); empty parts score 0.

    ``references`` holds one (image, mask) pair per part, in ``PARTS`` order.
    """
    regions = locate_parts(canvas, pose, background)
    sims = []
    for j, (ref_img, ref_mask) in enumerate(references):
        if not regions[j].any():
            sims.append(0.0)
            continue
        sims.append(cosine(part_descriptor(canvas, regions[j]), part_descriptor(ref_img, ref_mask)))
    return float(np.mean(sims))


def prompt_adherence(canvas: np.ndarray, prompt) -> int:
    """1 iff the median color outside the pose envelope matches the prompt's background word."""
    env = figure_envelope(prompt.pose).any(axis=0)
    med = np.median(canvas[~env].astype(np.float64), axis=0)
    ref = np.array(BACKGROUNDS[prompt.background], dtype=np.float64)
    return int((np.abs(med - ref) <= BG_TOLERANCE).all())


# ---------------------------------------------------------------------------
# benchmark

SET_NAMES = {1: "same individual", 2: "same family", 3: "cross family"}
# Table 1 of the reference results: (P.S., I.S.) with and without the selective loss
PAPER_TABLE1 = {
    "train": {"with": (0.2868, 0.6077), "without": (0.2846, 0.5821)},
    "test": {"with": (0.2885, 0.6181), "without": (0.2868, 0.5878)},
}


@dataclass
class BenchmarkSpec:
    pool: str = "test"
    combos_per_set: int = 3
    prompts: int = 10
    seeds_per_prompt: int = 2
    steps: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.pool not in ("train", "test"):
            raise ValueError(f"pool must be 'train' or 'test', got {self.pool!r}")


@dataclass
class MetricReport:
    pool: str
    combos: list
    sets: dict
    overall: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def select_combinations(dataset: PersonaDataset, ids, per_set: int, rng: RngStream):
    """Part-source triples (face, upper, lower) for sets 1, 2 and 3."""
    fams = dataset.families(ids)
    fam_ids = sorted(fams)
    combos = []
    r1 = rng.child("set1")
    order = [int(f) for f in r1.permutation(fam_ids)]
    for k in range(per_set):
        members = fams[order[k % len(order)]]
        i = members[int(r1.integers(len(members)))]
        combos.append({"set": 1, "sources": [i, i, i]})
    r2 = rng.child("set2")
    multi = [f for f in fam_ids if len(fams[f]) >= 2]
    if not multi:
        raise ValueError("set 2 needs a family with at least two identities in the pool")
    order = [int(f) for f in r2.permutation(multi)]
    for k in range(per_set):
        members = [int(i) for i in r2.permutation(fams[order[k % len(order)]])]
        a, b = members[0], members[1]
        c = members[2] if len(members) > 2 else a
        combos.append({"set": 2, "sources": [a, b, c]})
    r3 = rng.child("set3")
    if len(fam_ids) < 2:
        raise ValueError("set 3 needs at least two families in the pool")
    for k in range(per_set):
        picked = [int(f) for f in r3.permutation(fam_ids)[:3]]
        while len(picked) < 3:
            picked.append(picked[0])
        combos.append({"set": 3, "sources": [fams[f][int(r3.integers(len(fams[f])))] for f in picked]})
    return combos


def select_prompts(n: int, rng: RngStream):
    scenes = [(p, b) for b in BACKGROUND_NAMES for p in POSES]
    return [scenes[int(k)] for k in rng.permutation(len(scenes))[:n]]


def shuffled_source(ids, identity):
    """A different identity, half the pool away, for the mismatched-reference baseline."""
    ids = sorted(ids)
    k = ids.index(identity)
    return ids[(k + max(1, len(ids) // 2)) % len(ids)]


def reference_crops(dataset: PersonaDataset, sources, ref_views):
    return [(dataset.views[s][t].image, dataset.views[s][t].masks[j])
            for j, (s, t) in enumerate(zip(sources, ref_views))]


def contact_sheet(frames, cols: int = 5, gap: int = 2) -> np.ndarray:
    """Tile frames (wardrobe strip included) into one image, row-major."""
    h, w = frames[0].shape[:2]
    rows = -(-len(frames) // cols)
    sheet = np.full((rows * (h + gap) - gap, cols * (w + gap) - gap, 3), 255, dtype=np.uint8)
    for k, f in enumerate(frames):
        r, c = divmod(k, cols)
        sheet[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = f
    return sheet


def run_benchmark(model, dataset: PersonaDataset, spec: BenchmarkSpec, layout=None, batch_size: int = 30,
                  meta=None, out_dir=None) -> MetricReport:
    """Generate every (combination, prompt, seed) cell and score it.

    With ``out_dir`` set, one contact sheet per combination is written there.
    """
    from .flow import generate, inference_sample

    layout = layout or build_layout()
    ids = sorted(dataset.train_ids if spec.pool == "train" else dataset.test_ids)
    rng = RngStream(spec.seed).child("benchmark", spec.pool)
    combos = select_combinations(dataset, ids, spec.combos_per_set, rng.child("combos"))
    prompts = select_prompts(spec.prompts, rng.child("prompts"))

    jobs = []
    for c, combo in enumerate(combos):
        for p, (pose, bg) in enumerate(prompts):
            sample = inference_sample(dataset, combo["sources"], pose, bg, rng.child("wardrobe", c), layout)
            for s in range(spec.seeds_per_prompt):
                jobs.append((c, p, sample, spec.seed * 1_000_003 + (c * len(prompts) + p) * 97 + s))
    frames = generate(model, [j[2] for j in jobs], [j[3] for j in jobs], spec.steps, batch_size)

    rows = [{"is": [], "is_shuffled": [], "ps": []} for _ in combos]
    for (c, p, sample, _), frame in zip(jobs, frames):
        canvas = frame[:, layout.wardrobe_width:]
        src, refs = sample.provenance["sources"], sample.provenance["reference_views"]
        pose, bg = sample.provenance["pose"], sample.provenance["background"]
        rows[c]["is"].append(identity_similarity(canvas, reference_crops(dataset, src, refs), pose, bg))
        shuf = [shuffled_source(ids, s) for s in src]
        rows[c]["is_shuffled"].append(identity_similarity(canvas, reference_crops(dataset, shuf, [0, 0, 0]),
                                                          pose, bg))
        rows[c]["ps"].append(prompt_adherence(canvas, sample.prompt))

    if out_dir is not None:
        from PIL import Image

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for c in range(len(combos)):
            mine = [f for (cc, *_), f in zip(jobs, frames) if cc == c]
            Image.fromarray(contact_sheet(mine)).save(out_dir / f"{spec.pool}_combo{c}_set{combos[c]['set']}.png")

    out_combos = []
    for combo, r in zip(combos, rows):
        out_combos.append({**combo, "identity_similarity": float(np.mean(r["is"])),
                           "shuffled_identity_similarity": float(np.mean(r["is_shuffled"])),
                           "prompt_adherence": float(np.mean(r["ps"])), "n": len(r["is"])})

    def agg(items):
        return {"identity_similarity": float(np.mean([x["identity_similarity"] for x in items])),
                "shuffled_identity_similarity": float(np.mean([x["shuffled_identity_similarity"] for x in items])),
                "prompt_adherence": float(np.mean([x["prompt_adherence"] for x in items])),
                "n": int(sum(x["n"] for x in items))}

    sets = {str(k): agg([x for x in out_combos if x["set"] == k]) for k in (1, 2, 3)}
    meta = {**(meta or {}), "spec": asdict(spec), "prompts": [list(p) for p in prompts], "identities": ids}
    return MetricReport(spec.pool, out_combos, sets, agg(out_combos), meta)


def compare_ablation(with_ssr: dict, without: dict) -> dict:
    """I.S./P.S. deltas per pool and set, plus the direction verdict.

    Both arguments map pool name -> MetricReport produced with the same spec.
    """
    if set(with_ssr) != set(without):
        raise ValueError("ablation reports cover different pools")
    out = {"pools": {}}
    for pool in sorted(with_ssr):
        a, b = with_ssr[pool], without[pool]
        if a.meta.get("spec") != b.meta.get("spec"):
            raise ValueError(f"{pool}: reports were produced with different benchmark specs")
        d = {"delta_is": a.overall["identity_similarity"] - b.overall["identity_similarity"],
             "delta_ps": a.overall["prompt_adherence"] - b.overall["prompt_adherence"],
             "sets": {k: {"delta_is": a.sets[k]["identity_similarity"] - b.sets[k]["identity_similarity"],
                          "delta_ps": a.sets[k]["prompt_adherence"] - b.sets[k]["prompt_adherence"]}
                      for k in a.sets}}
        if pool in PAPER_TABLE1:
            ref = PAPER_TABLE1[pool]
            d["paper_delta_is"] = round(ref["with"][1] - ref["without"][1], 4)
            d["paper_delta_ps"] = round(ref["with"][0] - ref["without"][0], 4)
        out["pools"][pool] = d
    out["matches_paper_direction"] = bool(all(d["delta_is"] > 0 for d in out["pools"].values()))
    return out

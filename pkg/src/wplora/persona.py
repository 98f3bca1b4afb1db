"""Procedural personas: identities, multi-view renders with exact part masks.

A persona is a stylized figure on a flat background. The face block (skin
with a hair strip), the upper garment and the lower garment occupy three
disjoint row bands of a 64x48 canvas; pose shifts the bands sideways. Masks
are emitted from the same geometry that draws the pixels, so they are exact.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import RngStream

CANVAS_H, CANVAS_W = 64, 48
PARTS = ("face", "upper", "lower")
POSES = ("stand", "lean-left", "lean-right")
PATTERNS = ("solid", "h-stripes", "v-stripes", "checker")
N_FAMILIES = 6
MAX_OFFSET = 4
NEUTRAL_GRAY = (128, 128, 128)

BACKGROUNDS = {
    "white": (240, 240, 240),
    "black": (20, 20, 20),
    "sky": (110, 170, 250),
    "sand": (230, 190, 110),
    "lime": (130, 240, 0),
    "magenta": (240, 0, 130),
}
BACKGROUND_NAMES = tuple(BACKGROUNDS)
SKIN_TONES = [(250, 214, 190), (205, 140, 95), (180, 116, 76), (140, 86, 56), (96, 62, 44), (200, 140, 170)]
HAIR_COLORS = [(110, 60, 20), (250, 210, 40), (200, 60, 20), (175, 175, 175), (40, 110, 220), (40, 200, 120)]
GARMENT_COLORS = [
    (220, 30, 30),
    (250, 130, 0),
    (240, 230, 30),
    (30, 170, 40),
    (0, 160, 170),
    (40, 60, 210),
    (160, 60, 230),
    (250, 110, 180),
]

# band geometry on the canvas: (row0, row1, half width)
FACE_ROWS = (4, 18)
HAIR_ROWS = 3
UPPER_ROWS = (18, 38)
LOWER_ROWS = (38, 60)
FACE_HALF, UPPER_HALF, LOWER_HALF, LEG_GAP_HALF = 6, 12, 8, 1
POSE_SHIFT = {"stand": (0, 0, 0), "lean-left": (-4, -2, 0), "lean-right": (4, 2, 0)}


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class Garment:
    color: int
    pattern: str


@dataclass(frozen=True)
class PersonaSpec:
    identity: int
    family: int
    skin: int
    hair: int
    upper: Garment
    lower: Garment

    def attribute_tuple(self):
        return (self.skin, self.hair, self.upper.color, self.upper.pattern, self.lower.color, self.lower.pattern)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(d["identity"], d["family"], d["skin"], d["hair"], Garment(**d["upper"]), Garment(**d["lower"]))


@dataclass(frozen=True)
class ViewParams:
    index: int
    pose: str
    offset: int
    background: str

    def scene(self):
        return (self.pose, self.offset, self.background)


@dataclass
class RenderedView:
    identity: int
    params: ViewParams
    image: np.ndarray  # (64, 48, 3) uint8
    masks: np.ndarray  # (3, 64, 48) bool, order PARTS

    def part(self, name: str) -> np.ndarray:
        return self.masks[PARTS.index(name)]


@dataclass
class DataConfig:
    seed: int = 0
    n_ids: int = 36
    families: int = N_FAMILIES
    views_min: int = 3
    views_max: int = 5
    split: tuple = (24, 12)


@dataclass
class PersonaDataset:
    config: DataConfig
    personas: dict = field(default_factory=dict)  # id -> PersonaSpec
    views: dict = field(default_factory=dict)  # id -> list[RenderedView]
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def family_of(self, identity):
        return self.personas[identity].family

    def families(self, ids=None):
        ids = self.personas if ids is None else ids
        out: dict = {}
        for i in sorted(ids):
            out.setdefault(self.personas[i].family, []).append(i)
        return out


# ---------------------------------------------------------------------------
# identities


def _draw_attrs(rng: RngStream):
    return (
        int(rng.integers(len(SKIN_TONES))),
        int(rng.integers(len(HAIR_COLORS))),
        int(rng.integers(len(GARMENT_COLORS))),
        PATTERNS[int(rng.integers(len(PATTERNS)))],
        int(rng.integers(len(GARMENT_COLORS))),
        PATTERNS[int(rng.integers(len(PATTERNS)))],
    )


def make_identity(dataset_seed: int, identity_id: int, family_id: int, issued=None, max_redraws=1000) -> PersonaSpec:
    """Deterministic attributes for one identity, redrawn until unique among ``issued``."""
    if not 0 <= family_id < N_FAMILIES:
        raise ValueError(f"family_id must be in [0, {N_FAMILIES}), got {family_id}")
    issued = issued if issued is not None else set()
    base = RngStream(dataset_seed).child("identity", identity_id)
    attrs = _draw_attrs(base)
    k = 0
    while attrs in issued:
        k += 1
        if k > max_redraws:
            raise DatasetError("attribute space exhausted")
        attrs = _draw_attrs(base.child("redraw", k))
    skin, hair, uc, up, lc, lp = attrs
    return PersonaSpec(identity_id, family_id, skin, hair, Garment(uc, up), Garment(lc, lp))


# ---------------------------------------------------------------------------
# rendering


def band_boxes(pose: str, offset: int):
    """Column spans per part for a pose/offset: {part: (row0, row1, [(x0, x1), ...])}."""
    sf, su, sl = POSE_SHIFT[pose]
    cx = CANVAS_W // 2 + offset
    return {
        "face": (FACE_ROWS[0], FACE_ROWS[1], [(cx + sf - FACE_HALF, cx + sf + FACE_HALF)]),
        "upper": (UPPER_ROWS[0], UPPER_ROWS[1], [(cx + su - UPPER_HALF, cx + su + UPPER_HALF)]),
        "lower": (LOWER_ROWS[0], LOWER_ROWS[1], [(cx + sl - LOWER_HALF, cx + sl - LEG_GAP_HALF),
                                                  (cx + sl + LEG_GAP_HALF, cx + sl + LOWER_HALF)]),
    }


def part_masks(pose: str, offset: int, h=CANVAS_H, w=CANVAS_W) -> np.ndarray:
    masks = np.zeros((3, h, w), dtype=bool)
    for j, (r0, r1, spans) in enumerate(band_boxes(pose, offset).values()):
        for x0, x1 in spans:
            masks[j, r0:r1, x0:x1] = True
    return masks


def _pattern_fill(pattern: str, base, h: int, w: int) -> np.ndarray:
    base = np.array(base, dtype=np.uint8)
    shade = base // 2
    yy, xx = np.mgrid[0:h, 0:w]
    if pattern == "solid":
        sel = np.zeros((h, w), dtype=bool)
    elif pattern == "h-stripes":
        sel = (yy // 2) % 2 == 1
    elif pattern == "v-stripes":
        sel = (xx // 2) % 2 == 1
    elif pattern == "checker":
        sel = ((yy // 2) + (xx // 2)) % 2 == 1
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    out = np.empty((h, w, 3), dtype=np.uint8)
    out[:] = base
    out[sel] = shade
    return out


def render_view(spec: PersonaSpec, view: ViewParams) -> RenderedView:
    img = np.empty((CANVAS_H, CANVAS_W, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[view.background]
    boxes = band_boxes(view.pose, view.offset)

    r0, r1, [(x0, x1)] = boxes["face"]
    img[r0:r1, x0:x1] = SKIN_TONES[spec.skin]
    img[r0:r0 + HAIR_ROWS, x0:x1] = HAIR_COLORS[spec.hair]

    for name, garment in (("upper", spec.upper), ("lower", spec.lower)):
        r0, r1, spans = boxes[name]
        # texture is anchored at the band's left edge so it moves with the figure
        left = spans[0][0]
        right = spans[-1][1]
        tex = _pattern_fill(garment.pattern, GARMENT_COLORS[garment.color], r1 - r0, right - left)
        for x0, x1 in spans:
            img[r0:r1, x0:x1] = tex[:, x0 - left:x1 - left]

    return RenderedView(spec.identity, view, img, part_masks(view.pose, view.offset))


def check_view(view: RenderedView):
    """Raise DatasetError if a view breaks the mask invariants."""
    where = f"identity {view.identity} view {view.params.index}"
    m = view.masks
    if m.shape != (3, CANVAS_H, CANVAS_W) or view.image.shape != (CANVAS_H, CANVAS_W, 3):
        raise DatasetError(f"{where}: bad shapes")
    if (m.sum(axis=0) > 1).any():
        raise DatasetError(f"{where}: part masks overlap")
    for j, name in enumerate(PARTS):
        if m[j].sum() < 16:
            raise DatasetError(f"{where}: {name} mask has fewer than 16 pixels")
    bg = np.array(BACKGROUNDS[view.params.background], dtype=np.uint8)
    is_bg = (view.image == bg).all(axis=-1)
    if (is_bg & m.any(axis=0)).any():
        raise DatasetError(f"{where}: part mask covers background pixels")


# ---------------------------------------------------------------------------
# dataset


def _draw_views(seed: int, identity: int, views_min: int, views_max: int):
    rng = RngStream(seed).child("views", identity)
    n = int(rng.integers(views_min, views_max + 1))
    seen, out = set(), []
    while len(out) < n:
        scene = (POSES[int(rng.integers(len(POSES)))], int(rng.integers(-MAX_OFFSET, MAX_OFFSET + 1)),
                 BACKGROUND_NAMES[int(rng.integers(len(BACKGROUND_NAMES)))])
        if scene in seen:
            continue
        seen.add(scene)
        out.append(ViewParams(len(out), *scene))
    return out


def _stratified_split(seed, fam_members: dict, n_train: int, n_total: int):
    fams = sorted(fam_members)
    # proportional allocation, largest remainders first
    quotas = {f: n_train * len(fam_members[f]) / n_total for f in fams}
    alloc = {f: int(q) for f, q in quotas.items()}
    short = n_train - sum(alloc.values())
    for f in sorted(fams, key=lambda f: (-(quotas[f] - alloc[f]), f))[:short]:
        alloc[f] += 1
    train, test = [], []
    for f in fams:
        members = RngStream(seed).child("split", f).permutation(np.array(fam_members[f]))
        train += [int(i) for i in members[:alloc[f]]]
        test += [int(i) for i in members[alloc[f]:]]
    return sorted(train), sorted(test)


def _render_identity(args):
    spec, views = args
    return [render_view(spec, v) for v in views]


def generate_dataset(config: DataConfig, out_dir=None, jobs: int = 1) -> PersonaDataset:
    n_train, n_test = config.split
    if n_train + n_test != config.n_ids or n_train < 0 or n_test < 0:
        raise ValueError(f"split {config.split} does not sum to n_ids={config.n_ids}")
    if not 3 <= config.views_min <= config.views_max:
        raise ValueError("views per identity must satisfy 3 <= min <= max")
    if not 1 <= config.families <= N_FAMILIES:
        raise ValueError(f"families must be in [1, {N_FAMILIES}]")
    ds = PersonaDataset(config)
    issued = set()
    fam_members: dict = {}
    per_family = -(-config.n_ids // config.families)
    for i in range(config.n_ids):
        fam = min(i // per_family, config.families - 1)
        spec = make_identity(config.seed, i, fam, issued)
        issued.add(spec.attribute_tuple())
        ds.personas[i] = spec
        fam_members.setdefault(fam, []).append(i)

    work = [(ds.personas[i], _draw_views(config.seed, i, config.views_min, config.views_max))
            for i in range(config.n_ids)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            rendered = list(ex.map(_render_identity, work))
    else:
        rendered = [_render_identity(w) for w in work]
    for (spec, _), views in zip(work, rendered):
        ds.views[spec.identity] = views

    ds.train_ids, ds.test_ids = _stratified_split(config.seed, fam_members, n_train, config.n_ids)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _view_stem(identity, view):
    return f"{identity:03d}_{view:02d}"


def manifest_dict(ds: PersonaDataset) -> dict:
    cfg = ds.config
    views = []
    for i in sorted(ds.views):
        for v in ds.views[i]:
            stem = _view_stem(i, v.params.index)
            views.append({
                "identity": i,
                "view": v.params.index,
                "params": {"pose": v.params.pose, "offset": v.params.offset, "background": v.params.background},
                "image": f"views/{stem}.png",
                "masks": {p: f"masks/{stem}_{p}.png" for p in PARTS},
                "sha256": {"image": _digest(v.image), "masks": _digest(v.masks)},
            })
    return {
        "schema": 1,
        "seed": cfg.seed,
        "n_ids": cfg.n_ids,
        "families": cfg.families,
        "views_per_identity": [cfg.views_min, cfg.views_max],
        "identities": [ds.personas[i].to_json() for i in sorted(ds.personas)],
        "roster": {str(f): ids for f, ids in ds.families().items()},
        "split": {"train": ds.train_ids, "test": ds.test_ids},
        "views": views,
    }


def save_dataset(ds: PersonaDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "views").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, views in ds.views.items():
        for v in views:
            stem = _view_stem(i, v.params.index)
            Image.fromarray(v.image, "RGB").save(out / "views" / f"{stem}.png")
            for j, p in enumerate(PARTS):
                Image.fromarray(v.masks[j].astype(np.uint8) * 255, "L").save(out / "masks" / f"{stem}_{p}.png")
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest_dict(ds), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest_path) -> PersonaDataset:
    """Load a dataset directory, re-checking checksums and mask invariants."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    if doc.get("schema", 1) != 1:
        raise DatasetError(f"unsupported manifest schema {doc.get('schema')!r}")
    root = manifest_path.parent
    vmin, vmax = doc.get("views_per_identity", [3, 5])
    split = doc.get("split", {})
    cfg = DataConfig(seed=doc.get("seed", 0), n_ids=doc.get("n_ids", 0), families=doc.get("families", N_FAMILIES),
                     views_min=vmin, views_max=vmax,
                     split=(len(split.get("train", [])), len(split.get("test", []))))
    ds = PersonaDataset(cfg)
    for d in doc.get("identities", []):
        spec = PersonaSpec.from_json(d)
        ds.personas[spec.identity] = spec
        ds.views[spec.identity] = []
    for e in doc.get("views", []):
        where = f"identity {e['identity']} view {e['view']}"
        try:
            img = np.array(Image.open(root / e["image"]).convert("RGB"))
            masks = np.stack([np.array(Image.open(root / e["masks"][p]).convert("L")) > 127 for p in PARTS])
        except FileNotFoundError as exc:
            raise DatasetError(f"{where}: missing file {exc.filename}") from exc
        if _digest(img) != e["sha256"]["image"] or _digest(masks) != e["sha256"]["masks"]:
            raise DatasetError(f"{where}: checksum mismatch")
        view = RenderedView(e["identity"], ViewParams(e["view"], **e["params"]), img, masks)
        check_view(view)
        ds.views.setdefault(e["identity"], []).append(view)
    for views in ds.views.values():
        views.sort(key=lambda v: v.params.index)
    ds.train_ids = list(split.get("train", []))
    ds.test_ids = list(split.get("test", []))
    if set(ds.train_ids) & set(ds.test_ids):
        raise DatasetError("train and test identities overlap")
    return ds

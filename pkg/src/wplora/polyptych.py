"""Wardrobe/canvas template: layout, sample composition, prompts and masks.

The 64x64 frame holds a 16 px wardrobe column on the left, split into one
cell per part, and the 48 px canvas on the right. Each cell shows one
reference subject cut out with its mask on neutral gray; the canvas holds the
target view during training and is left empty at inference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import RngStream
from .persona import (BACKGROUND_NAMES, CANVAS_H, CANVAS_W, NEUTRAL_GRAY, PARTS, POSES, PersonaDataset,
                      part_masks)

PATCH = 4
TOKEN_THRESHOLD = 0.25


class LayoutError(ValueError):
    pass


class CompositionError(ValueError):
    pass


@dataclass(frozen=True)
class PolyptychLayout:
    frame: int = 64
    patch: int = PATCH
    wardrobe_width: int = 16
    cell_rows: tuple = ((0, 20), (20, 40), (40, 64))  # pixel row spans, one per part

    @property
    def grid(self) -> int:
        return self.frame // self.patch

    @property
    def canvas_width(self) -> int:
        return self.frame - self.wardrobe_width

    @property
    def wardrobe_cols(self) -> int:
        return self.wardrobe_width // self.patch

    def cell_box(self, j):
        y0, y1 = self.cell_rows[j]
        return y0, y1, 0, self.wardrobe_width

    def canvas_mask(self) -> np.ndarray:
        m = np.zeros((self.frame, self.frame), dtype=bool)
        m[:, self.wardrobe_width:] = True
        return m

    def cell_token_masks(self) -> np.ndarray:
        """(m, grid, grid) bool, token-level indicator of each wardrobe cell."""
        out = np.zeros((len(self.cell_rows), self.grid, self.grid), dtype=bool)
        for j, (y0, y1) in enumerate(self.cell_rows):
            out[j, y0 // self.patch:y1 // self.patch, :self.wardrobe_cols] = True
        return out


def build_layout(frame: int = 64, m_parts: int = 3, canvas_fraction: float = 0.75, patch: int = PATCH):
    if frame % patch:
        raise LayoutError(f"frame {frame} is not divisible by patch {patch}")
    grid = frame // patch
    if not 1 <= m_parts <= grid:
        raise LayoutError(f"m_parts must be in [1, {grid}], got {m_parts}")
    wardrobe = frame * (1 - canvas_fraction)
    if abs(wardrobe - round(wardrobe)) > 1e-9 or round(wardrobe) % patch or not 0 < round(wardrobe) < frame:
        raise LayoutError(f"canvas_fraction {canvas_fraction} gives a wardrobe width of {wardrobe} px, "
                          f"not a positive multiple of patch {patch}")
    rows, y = [], 0
    per = grid // m_parts
    for j in range(m_parts):
        h = per if j < m_parts - 1 else grid - per * (m_parts - 1)
        rows.append((y * patch, (y + h) * patch))
        y += h
    return PolyptychLayout(frame, patch, int(round(wardrobe)), tuple(rows))


# ---------------------------------------------------------------------------
# prompts

_WORDS = ["<pad>", "<bos>", "<sep>", "wardrobe", "polyptych", "person", "canvas", "background",
          *PARTS, *BACKGROUND_NAMES, *POSES]
VOCAB = _WORDS + [f"<unused{k}>" for k in range(64 - len(_WORDS))]
TOKEN = {w: k for k, w in enumerate(VOCAB)}
TEXT_LEN = 16


@dataclass(frozen=True)
class PromptBundle:
    global_ids: tuple
    part_ids: tuple
    composition_ids: tuple

    @property
    def ids(self) -> tuple:
        return self.global_ids + self.part_ids + self.composition_ids

    @property
    def background(self) -> str:
        return VOCAB[self.composition_ids[3]]

    @property
    def pose(self) -> str:
        return VOCAB[self.composition_ids[2]]


def _tok(word):
    try:
        return TOKEN[word]
    except KeyError:
        raise KeyError(f"out-of-vocabulary word {word!r}") from None


def build_prompts(categories=PARTS, background: str = "white", pose: str = "stand") -> PromptBundle:
    """Global template, one (category, <sep>) pair per part, and the scene words."""
    if background not in BACKGROUND_NAMES:
        raise KeyError(f"out-of-vocabulary background word {background!r}")
    if pose not in POSES:
        raise KeyError(f"out-of-vocabulary pose word {pose!r}")
    if categories is None:
        glob = (TOKEN["<pad>"],) * 4
        parts = (TOKEN["<pad>"],) * 6
    else:
        if len(categories) != 3:
            raise ValueError("exactly three part categories are expected")
        glob = tuple(_tok(w) for w in ("<bos>", "polyptych", "wardrobe", "person"))
        parts = tuple(t for c in categories for t in (_tok(c), TOKEN["<sep>"]))
    comp = tuple(_tok(w) for w in ("canvas", "person", pose, background, "background", "<pad>"))
    return PromptBundle(glob, parts, comp)


# ---------------------------------------------------------------------------
# masks


@dataclass
class TokenMask:
    grid: np.ndarray
    theta: float


def mask_to_tokens(pixel_mask: np.ndarray, patch: int = PATCH, theta: float = TOKEN_THRESHOLD) -> TokenMask:
    m = np.asarray(pixel_mask, dtype=bool)
    if m.ndim != 2 or m.shape[0] % patch or m.shape[1] % patch:
        raise ValueError(f"mask shape {m.shape} is not divisible by patch {patch}")
    h, w = m.shape
    counts = m.reshape(h // patch, patch, w // patch, patch).sum(axis=(1, 3))
    return TokenMask(counts >= theta * patch * patch, theta)


def select_subject_mask(masks: np.ndarray, p_drop: float, rng: RngStream):
    """Union of the subject masks whose draw p_j ~ U(0,1) falls below ``p_drop``."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must be in [0, 1]")
    masks = np.asarray(masks, dtype=bool)
    p = rng.uniform(size=len(masks))
    selected = p < p_drop
    union = masks[selected].any(axis=0) if selected.any() else np.zeros(masks.shape[1:], dtype=bool)
    return union, selected


# ---------------------------------------------------------------------------
# composition


@dataclass
class PolyptychSample:
    composite: np.ndarray  # (64, 64, 3) uint8
    inpaint_mask: np.ndarray  # (64, 64) bool, True = generate
    subject_masks: np.ndarray  # (m, 64, 64) bool, inside the canvas
    prompt: PromptBundle
    provenance: dict = field(default_factory=dict)


def _fit_subject(image, mask, cell_h, cell_w):
    """Crop the masked subject and fit it, never upscaled, centered in a gray cell."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise CompositionError("empty subject mask")
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    crop = image[y0:y1, x0:x1].copy()
    cmask = mask[y0:y1, x0:x1]
    h, w = cmask.shape
    s = min(1.0, cell_h / h, cell_w / w)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (nh, nw) != (h, w):
        crop = np.array(Image.fromarray(crop).resize((nw, nh), Image.NEAREST))
        cmask = np.array(Image.fromarray(cmask.astype(np.uint8) * 255).resize((nw, nh), Image.NEAREST)) > 127
    cell = np.empty((cell_h, cell_w, 3), dtype=np.uint8)
    cell[:] = NEUTRAL_GRAY
    oy, ox = (cell_h - nh) // 2, (cell_w - nw) // 2
    region = cell[oy:oy + nh, ox:ox + nw]
    region[cmask] = crop[cmask]
    return cell


def _check_layout(layout: PolyptychLayout):
    if layout.frame != CANVAS_H or layout.canvas_width != CANVAS_W:
        raise LayoutError("layout canvas does not match the rendered view size")


def compose_sample(dataset: PersonaDataset, part_sources, target=None, layout: PolyptychLayout | None = None,
                   rng: RngStream | None = None, scene=None, with_target_pixels=True) -> PolyptychSample:
    """Build a polyptych sample.

    ``part_sources`` lists the source identity for each part, in ``PARTS``
    order (either bare ids or ``(identity, part)`` pairs). ``target`` is
    ``(identity, view index)``; when given, its view supplies the canvas, the
    subject masks and the scene words, and any part taken from the same
    identity uses a different reference view. Without a target the canvas is
    empty and ``scene=(pose, background)`` must be given.
    """
    layout = layout or build_layout()
    _check_layout(layout)
    rng = rng or RngStream(0)
    sources = [s[0] if isinstance(s, (tuple, list)) else int(s) for s in part_sources]
    if len(sources) != len(layout.cell_rows):
        raise CompositionError(f"{len(sources)} part sources for {len(layout.cell_rows)} wardrobe cells")

    frame = np.zeros((layout.frame, layout.frame, 3), dtype=np.uint8)
    subject_masks = np.zeros((len(sources), layout.frame, layout.frame), dtype=bool)
    wx = layout.wardrobe_width
    if target is not None:
        tid, ti = target
        tview = next((v for v in dataset.views.get(tid, []) if v.params.index == ti), None)
        if tview is None:
            raise CompositionError(f"identity {tid} has no view {ti}")
        pose, background = tview.params.pose, tview.params.background
        subject_masks[:, :, wx:] = tview.masks
        if with_target_pixels:
            frame[:, wx:] = tview.image
    else:
        if scene is None:
            raise CompositionError("inference samples need scene=(pose, background)")
        tid, ti = None, None
        pose, background = scene
        subject_masks[:, :, wx:] = part_masks(pose, 0)

    ref_views = []
    for j, (sid, part) in enumerate(zip(sources, PARTS)):
        views = dataset.views.get(sid, [])
        candidates = [v for v in views if not (sid == tid and v.params.index == ti)]
        if not candidates:
            raise CompositionError(f"identity {sid} has no reference view for {part} other than the target")
        ref = candidates[int(rng.integers(len(candidates)))]
        mask = ref.masks[j]
        if not mask.any():
            raise CompositionError(f"identity {sid} view {ref.params.index} is missing its {part} mask")
        y0, y1, x0, x1 = layout.cell_box(j)
        frame[y0:y1, x0:x1] = _fit_subject(ref.image, mask, y1 - y0, x1 - x0)
        ref_views.append(ref.params.index)

    prov = {
        "sources": sources,
        "reference_views": ref_views,
        "target": None if target is None else [tid, ti],
        "pose": pose,
        "background": background,
    }
    return PolyptychSample(frame, layout.canvas_mask(), subject_masks, build_prompts(PARTS, background, pose), prov)


def save_sample(sample: PolyptychSample, out_dir, stem: str = "sample") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.composite, "RGB").save(out / f"{stem}.png")
    Image.fromarray(sample.inpaint_mask.astype(np.uint8) * 255, "L").save(out / f"{stem}_inpaint.png")
    for j, p in enumerate(PARTS[:len(sample.subject_masks)]):
        Image.fromarray(sample.subject_masks[j].astype(np.uint8) * 255, "L").save(out / f"{stem}_{p}.png")
    side = {"provenance": sample.provenance, "prompt_ids": list(sample.prompt.ids),
            "prompt_words": [VOCAB[k] for k in sample.prompt.ids]}
    path = out / f"{stem}.json"
    path.write_text(json.dumps(side, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path

"""Rectified-flow objectives, training phases and Euler sampling.

Orientation: t=0 is data, t=1 is noise, ``z_t = (1-t) x + t eps`` and the
target velocity is ``u = eps - x``. Sampling integrates from t=1 down to 0.
Pixels outside the generate mask are kept clean in the latent at all times,
both when building ``z_t`` for training and after every Euler step.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .model import PatchEncoder, WardrobeDiT, attach_lora, load_base, save_checkpoint, trainable_parameters
from .persona import CANVAS_W, PARTS, PersonaDataset
from .polyptych import (PolyptychLayout, PolyptychSample, build_layout, build_prompts, compose_sample,
                        mask_to_tokens, select_subject_mask)

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    adapt_iterations: int = 5000
    pretrain_iterations: int = 3000
    pretrain_lr: float = 5e-4
    batch: int = 8
    p_ssr: float = 0.5
    p_drop: float = 0.3
    rec_region: str = "canvas"  # or "frame": include wardrobe tokens in the reconstruction loss
    lora_rank: int = 8
    lora_alpha: float = 16.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_ssr", "p_drop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.rec_region not in ("canvas", "frame"):
            raise ValueError(f"rec_region must be 'canvas' or 'frame', got {self.rec_region!r}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    branch: str
    masked_tokens: int
    selected: list | None = None


@dataclass
class StepResult:
    step: int
    loss: float
    branch: str
    selected_parts: list = field(default_factory=list)
    fallbacks: int = 0


# ---------------------------------------------------------------------------
# path


def noise_path(x, eps, t):
    return (1 - t) * x + t * eps


def target_velocity(x, eps):
    return eps - x


# ---------------------------------------------------------------------------
# sample -> tensors

_ENCODER = PatchEncoder()


@dataclass
class SampleTensors:
    x: torch.Tensor  # (256, 48) clean latent of the full frame
    clean_masked: torch.Tensor  # x with the generate region zeroed
    mask_bits: torch.Tensor  # (256, 16)
    gen: torch.Tensor  # (256, 48) per-channel generate indicator
    ids: torch.Tensor  # (16,)
    gen_tokens: torch.Tensor  # (256,) bool, token form of the generate mask


def sample_tensors(sample: PolyptychSample, encoder: PatchEncoder = _ENCODER) -> SampleTensors:
    x = encoder.encode(sample.composite)
    bits = encoder.mask_bits(sample.inpaint_mask)
    gen = bits.repeat_interleave(3, dim=1)
    return SampleTensors(x, x * (1 - gen), bits, gen, torch.tensor(sample.prompt.ids, dtype=torch.long),
                         torch.from_numpy(mask_to_tokens(sample.inpaint_mask).grid.reshape(-1)))


def stack(items: list[SampleTensors]) -> SampleTensors:
    return SampleTensors(*(torch.stack([getattr(s, f) for s in items]) for f in
                           ("x", "clean_masked", "mask_bits", "gen", "ids", "gen_tokens")))


def model_input(st: SampleTensors, eps, t):
    """Noisy latent with the keep region held clean."""
    t = torch.as_tensor(t, dtype=st.x.dtype)
    if t.ndim == 1:
        t = t[:, None, None]
    return st.gen * noise_path(st.x, eps, t) + (1 - st.gen) * st.x


def masked_mse(v, u, token_mask):
    """Per-sample mean squared error over the tokens in ``token_mask`` (all channels)."""
    tm = token_mask.to(v.dtype)
    per_token = ((v - u) ** 2).mean(dim=-1)
    n = tm.sum(dim=-1)
    if (n == 0).any():
        raise ValueError("masked_mse: empty token mask")
    return (per_token * tm).sum(dim=-1) / n


def _rec_tokens(sample: PolyptychSample, region: str = "canvas"):
    if region == "frame":
        return torch.ones(sample.inpaint_mask.size // 16, dtype=torch.bool)
    return torch.from_numpy(mask_to_tokens(sample.inpaint_mask).grid.reshape(-1))


def loss_rec(model, sample: PolyptychSample, t, eps, region: str = "canvas") -> LossBreakdown:
    st = sample_tensors(sample)
    eps = eps.to(st.x.dtype)
    tokens = _rec_tokens(sample, region)
    if not tokens.any():
        raise ValueError("loss_rec: empty canvas token mask")
    v = model(model_input(st, eps, t), st.clean_masked, st.mask_bits, st.ids, t)
    total = masked_mse(v[None], target_velocity(st.x, eps)[None], tokens[None])[0]
    return LossBreakdown(total, "rec", int(tokens.sum()))


def ssr_tokens(sample: PolyptychSample, p_drop: float, rng: nx.RngStream):
    """Token mask of the selected subjects, or None when nothing was selected."""
    union, selected = select_subject_mask(sample.subject_masks, p_drop, rng)
    grid = mask_to_tokens(union).grid.reshape(-1)
    return (torch.from_numpy(grid) if grid.any() else None), [bool(s) for s in selected]


def loss_ssr(model, sample: PolyptychSample, t, eps, rng: nx.RngStream, p_drop: float = 0.3,
             region: str = "canvas") -> LossBreakdown:
    tokens, selected = ssr_tokens(sample, p_drop, rng)
    if tokens is None:
        out = loss_rec(model, sample, t, eps, region)
        out.branch = "ssr-fallback"
        out.selected = selected
        return out
    st = sample_tensors(sample)
    eps = eps.to(st.x.dtype)
    v = model(model_input(st, eps, t), st.clean_masked, st.mask_bits, st.ids, t)
    total = masked_mse(v[None], target_velocity(st.x, eps)[None], tokens[None])[0]
    return LossBreakdown(total, "ssr", int(tokens.sum()), selected)


# ---------------------------------------------------------------------------
# training


def draw_branch(rng: nx.RngStream, p_ssr: float) -> str:
    return "ssr" if rng.uniform() < p_ssr else "rec"


def train_step(model, optimizer: nx.AdamW, batch: list[PolyptychSample], config: TrainConfig,
               rng: nx.RngStream, step: int = 0) -> StepResult:
    """One optimizer step on the loss chosen for this step (ssr with prob. p_ssr)."""
    branch = draw_branch(rng, config.p_ssr)
    sts, masks, ts, eps, selected, fallbacks = [], [], [], [], [], 0
    for sample in batch:
        st = sample_tensors(sample)
        ts.append(float(rng.uniform()))
        eps.append(rng.normal_tensor(*st.x.shape))
        tokens = None
        if branch == "ssr":
            tokens, sel = ssr_tokens(sample, config.p_drop, rng)
            selected.append(sel)
            if tokens is None:
                fallbacks += 1
        if tokens is None:
            tokens = _rec_tokens(sample, config.rec_region)
        sts.append(st)
        masks.append(tokens)
    st = stack(sts)
    t = torch.tensor(ts, dtype=torch.float32)
    e = torch.stack(eps)
    try:
        v = model(model_input(st, e, t), st.clean_masked, st.mask_bits, st.ids, t)
    except nx.NumericError as err:
        raise NumericAbort(f"step {step} (branch {branch}): {err}") from err
    loss = masked_mse(v, target_velocity(st.x, e), torch.stack(masks)).mean()
    if not torch.isfinite(loss):
        raise NumericAbort(f"non-finite loss at step {step} (branch {branch}, t={ts})")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if branch == "ssr" and fallbacks == len(batch):
        branch = "ssr-fallback"
    return StepResult(step, loss.item(), branch, selected, fallbacks)


def random_hole(rng: nx.RngStream, layout: PolyptychLayout, lo: float = 0.25, hi: float = 0.75) -> np.ndarray:
    """Patch-aligned rectangle covering lo..hi of the canvas, as a frame-sized pixel mask."""
    g, wc, p = layout.grid, layout.canvas_width // layout.patch, layout.patch
    shapes = [(h, w) for h in range(1, g + 1) for w in range(1, wc + 1) if lo <= h * w / (g * wc) <= hi]
    h, w = shapes[int(rng.integers(len(shapes)))]
    r = int(rng.integers(g - h + 1))
    c = int(rng.integers(wc - w + 1)) + layout.wardrobe_cols
    m = np.zeros((layout.frame, layout.frame), dtype=bool)
    m[r * p:(r + h) * p, c * p:(c + w) * p] = True
    return m


def inpainting_sample(view, layout: PolyptychLayout, rng: nx.RngStream) -> PolyptychSample:
    """A single view on the canvas, gray wardrobe, a random hole to fill, scene words only."""
    wx = layout.wardrobe_width
    frame = np.empty((layout.frame, layout.frame, 3), dtype=np.uint8)
    frame[:] = 128
    frame[:, wx:] = view.image
    masks = np.zeros((len(PARTS), layout.frame, layout.frame), dtype=bool)
    masks[:, :, wx:] = view.masks
    prompt = build_prompts(None, view.params.background, view.params.pose)
    prov = {"sources": [view.identity] * 3, "target": [view.identity, view.params.index],
            "pose": view.params.pose, "background": view.params.background}
    return PolyptychSample(frame, random_hole(rng, layout), masks, prompt, prov)


def pretrain_batch(dataset: PersonaDataset, ids, layout, rng: nx.RngStream, size: int):
    out = []
    for _ in range(size):
        views = dataset.views[ids[int(rng.integers(len(ids)))]]
        out.append(inpainting_sample(views[int(rng.integers(len(views)))], layout, rng))
    return out


def adapt_batch(dataset: PersonaDataset, ids, layout, rng: nx.RngStream, size: int):
    """Same-identity polyptychs: target view uniform, reference views uniform among the others."""
    out = []
    for _ in range(size):
        i = ids[int(rng.integers(len(ids)))]
        views = dataset.views[i]
        target = views[int(rng.integers(len(views)))].params.index
        out.append(compose_sample(dataset, [i, i, i], (i, target), layout, rng))
    return out


def run_training(model, make_batch, config: TrainConfig, steps: int, lr: float, rng: nx.RngStream,
                 log_path=None, log_every: int = 1):
    optimizer = nx.AdamW(trainable_parameters(model), lr, (config.beta1, config.beta2), config.eps,
                         config.weight_decay)
    history = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for k in range(steps):
            t0 = time.perf_counter()
            srng = rng.child("step", k)
            batch = make_batch(srng.child("batch"))
            res = train_step(model, optimizer, batch, config, srng.child("loss"), k)
            history.append(res)
            if fh and k % log_every == 0:
                fh.write(json.dumps({"step": k, "branch": res.branch, "loss": res.loss,
                                     "selected_parts": res.selected_parts,
                                     "wall_ms": round(1000 * (time.perf_counter() - t0), 2)}) + "\n")
            if k % 100 == 0:
                log.info("step %d loss %.5f branch %s", k, res.loss, res.branch)
    finally:
        if fh:
            fh.close()
    return history


def pretrain_base(model: WardrobeDiT, dataset: PersonaDataset, config: TrainConfig, out_dir=None,
                  steps: int | None = None, layout=None):
    """Random-hole inpainting on single views of the training identities."""
    layout = layout or build_layout()
    steps = config.pretrain_iterations if steps is None else steps
    ids = sorted(dataset.train_ids)
    rng = nx.RngStream(config.seed).child("pretrain")
    pcfg = TrainConfig(**{**asdict(config), "p_ssr": 0.0})
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    hist = run_training(model, lambda r: pretrain_batch(dataset, ids, layout, r, config.batch), pcfg, steps,
                        config.pretrain_lr, rng, out / "pretrain_log.jsonl" if out else None)
    path = save_checkpoint(out / "base.ckpt", model, sections=("base",)) if out else None
    return path, hist


def adapt_lora(base, dataset: PersonaDataset, config: TrainConfig, out_dir=None, steps: int | None = None,
               layout=None, name: str = "adapters"):
    """Attach fresh adapters to a frozen base and train them on same-identity polyptychs."""
    layout = layout or build_layout()
    steps = config.adapt_iterations if steps is None else steps
    model = load_base(base) if isinstance(base, (str, Path)) else base
    attach_lora(model, config.lora_rank, config.lora_alpha, seed=config.seed)
    ids = sorted(dataset.train_ids)
    rng = nx.RngStream(config.seed).child("adapt")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    hist = run_training(model, lambda r: adapt_batch(dataset, ids, layout, r, config.batch), config, steps,
                        config.lr, rng, out / f"{name}_log.jsonl" if out else None)
    path = save_checkpoint(out / f"{name}.ckpt", model, sections=("adapters",)) if out else None
    return model, path, hist


@torch.no_grad()
def validation_loss(model, samples: list[PolyptychSample], seed: int = 0) -> float:
    rng = nx.RngStream(seed).child("validation")
    vals = []
    for s in samples:
        t = float(rng.uniform())
        eps = rng.normal_tensor(256, 48)
        vals.append(float(loss_rec(model, s, t, eps).total))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# sampling


@torch.no_grad()
def generate(model, samples, seeds, steps: int = 32, batch_size: int = 32, encoder: PatchEncoder = _ENCODER):
    """Euler integration from noise (t=1) to data (t=0) on the generate region.

    ``samples``/``seeds`` may be a single sample and seed. Returns uint8
    frames; pixels outside the generate mask are pasted back from the input.
    """
    single = isinstance(samples, PolyptychSample)
    if single:
        samples, seeds = [samples], [seeds]
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        st = stack([sample_tensors(s, encoder) for s in chunk])
        eps = torch.stack([nx.RngStream(sd).child("generate").normal_tensor(*st.x.shape[1:])
                           for sd in seeds[start:start + batch_size]])
        z = st.gen * eps + (1 - st.gen) * st.x
        for k in range(steps):
            t, t_next = 1.0 - k / steps, 1.0 - (k + 1) / steps
            try:
                v = model(z, st.clean_masked, st.mask_bits, st.ids, torch.full((len(chunk),), t))
            except nx.NumericError as err:
                raise NumericAbort(f"sampling step {k}: {err}") from err
            z = z + (t_next - t) * v
            z = st.gen * z + (1 - st.gen) * st.x
            if not torch.isfinite(z).all():
                raise NumericAbort(f"non-finite latent during sampling at step {k}")
        for b, s in enumerate(chunk):
            img = encoder.decode(z[b])
            keep = ~s.inpaint_mask
            img[keep] = s.composite[keep]
            out.append(img)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# attention probes


@torch.no_grad()
def record_attention(model, sample: PolyptychSample, t: float, query: int, seed: int = 0, layout=None):
    """Attention of one image-token query, per layer and head, on the 16x16 grid.

    ``query`` indexes the image grid row-major and must lie in the canvas.
    Returns ``{"rows": (L, H, N), "maps": (L, H, 16, 16), "mean": (16, 16)}``.
    """
    layout = layout or build_layout()
    g = model.config.grid
    if not 0 <= query < g * g or query % g < layout.wardrobe_cols:
        raise IndexError(f"query token {query} is not a canvas token")
    st = sample_tensors(sample)
    eps = nx.RngStream(seed).child("probe").normal_tensor(*st.x.shape)
    rec: list = []
    model(model_input(st, eps, t), st.clean_masked, st.mask_bits, st.ids, t, record_attention=rec)
    q = model.config.text_len + query
    rows = torch.stack([a[0, :, q, :] for a in rec])  # (L, H, N)
    maps = rows[..., model.config.text_len:].reshape(len(rec), rows.shape[1], g, g)
    return {"rows": rows.numpy(), "maps": maps.numpy(), "mean": maps.mean(dim=(0, 1)).numpy()}


@torch.no_grad()
def cell_attention_mass(model, samples: list[PolyptychSample], part: str = "upper", t: float = 0.5,
                        seed: int = 0, layout=None) -> np.ndarray:
    """Mean attention mass that canvas queries of ``part`` put on each wardrobe cell.

    Averaged over queries, heads, layers and samples; returns one value per cell.
    """
    layout = layout or build_layout()
    j = PARTS.index(part)
    cells = torch.from_numpy(layout.cell_token_masks().reshape(len(layout.cell_rows), -1))
    tl = model.config.text_len
    totals = []
    for n, s in enumerate(samples):
        qmask = torch.from_numpy(mask_to_tokens(s.subject_masks[j]).grid.reshape(-1))
        if not qmask.any():
            continue
        st = sample_tensors(s)
        eps = nx.RngStream(seed).child("cells", n).normal_tensor(*st.x.shape)
        rec: list = []
        model(model_input(st, eps, t), st.clean_masked, st.mask_bits, st.ids, t, record_attention=rec)
        att = torch.stack([a[0] for a in rec])[:, :, tl:, tl:]  # (L, H, 256, 256), image part only
        rows = att[:, :, qmask, :]  # (L, H, Q, 256)
        mass = torch.stack([rows[..., c].sum(-1) for c in cells])  # (cells, L, H, Q)
        totals.append(mass.mean(dim=(1, 2, 3)))
    return torch.stack(totals).mean(0).numpy()


def attention_overlay(sample: PolyptychSample, heat: np.ndarray) -> np.ndarray:
    """Grayscale frame blended with a 16x16 heatmap upsampled to the frame size."""
    gray = sample.composite.astype(np.float32).mean(axis=-1)
    rep = sample.composite.shape[0] // heat.shape[0]
    h = np.kron(heat / max(float(heat.max()), 1e-12), np.ones((rep, rep)))
    return np.clip(0.4 * gray + 0.6 * 255 * h, 0, 255).astype(np.uint8)


def inference_sample(dataset: PersonaDataset, sources, pose: str, background: str, rng: nx.RngStream,
                     layout=None) -> PolyptychSample:
    """Empty-canvas polyptych for generation."""
    return compose_sample(dataset, sources, None, layout or build_layout(), rng, scene=(pose, background))


def canvas_of(frame: np.ndarray, layout=None) -> np.ndarray:
    layout = layout or build_layout()
    out = frame[:, layout.wardrobe_width:]
    assert out.shape[1] == CANVAS_W
    return out

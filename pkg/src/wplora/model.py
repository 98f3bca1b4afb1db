"""Toy inpainting diffusion transformer with LoRA adapters on attention.

Image tokens are 4x4 patches of the 64x64 frame. Each image token carries
three channel groups: the noisy latent patch, the clean patch with the
generate region zeroed, and the per-pixel generate mask. Sixteen text tokens
are prepended, the joint sequence goes through adaLN-modulated pre-norm
blocks, and a linear head predicts the velocity of every image token.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx


@dataclass
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    blocks: int = 6
    patch: int = 4
    grid: int = 16
    text_len: int = 16
    vocab: int = 64
    mlp_ratio: int = 4
    t_dim: int = 128

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def in_channels(self) -> int:
        return 2 * self.patch_dim + self.patch * self.patch

    @property
    def n_image(self) -> int:
        return self.grid * self.grid


# ---------------------------------------------------------------------------
# patchification (the identity stand-in for a learned encoder)


def patchify(x, patch: int = 4):
    """(H, W, C) -> (H/p * W/p, p*p*C); token (r, c) is pixel block [pr, pr+p) x [pc, pc+p)."""
    h, w, c = x.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch {patch}")
    x = x.reshape(h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 2, 1, 3, 4) if isinstance(x, np.ndarray) else x.permute(0, 2, 1, 3, 4)
    return x.reshape((h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens, h: int, w: int, patch: int = 4):
    n, d = tokens.shape
    c = d // (patch * patch)
    if n != (h // patch) * (w // patch) or c * patch * patch != d:
        raise ValueError(f"tokens {tuple(tokens.shape)} do not tile a {h}x{w} image with patch {patch}")
    x = tokens.reshape(h // patch, w // patch, patch, patch, c)
    x = x.transpose(0, 2, 1, 3, 4) if isinstance(x, np.ndarray) else x.permute(0, 2, 1, 3, 4)
    return x.reshape(h, w, c)


class PatchEncoder:
    """uint8 frames <-> latent tokens in [-1, 1]."""

    def __init__(self, patch: int = 4):
        self.patch = patch

    def encode(self, image: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.ascontiguousarray(image)).to(torch.float32) / 127.5 - 1.0
        return patchify(x, self.patch)

    def decode(self, tokens: torch.Tensor, h: int = 64, w: int = 64) -> np.ndarray:
        x = unpatchify(tokens.detach().to(torch.float32), h, w, self.patch)
        return ((x + 1.0) * 127.5).round().clamp(0, 255).to(torch.uint8).numpy()

    def mask_bits(self, mask: np.ndarray) -> torch.Tensor:
        m = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[..., None]
        return patchify(m, self.patch)


# ---------------------------------------------------------------------------
# layers


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t[:, None] * 1000.0) * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def grid_sincos(d: int, grid: int) -> torch.Tensor:
    """Fixed 2-D sin-cos table, half the channels for rows and half for columns."""
    quarter = d // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    rr, cc = torch.meshgrid(torch.arange(grid, dtype=torch.float64), torch.arange(grid, dtype=torch.float64),
                            indexing="ij")

    def enc(pos):
        a = pos.reshape(-1, 1) * omega[None]
        return torch.cat([torch.sin(a), torch.cos(a)], dim=1)

    return torch.cat([enc(rr), enc(cc)], dim=1).to(torch.float32)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, record=None):
        b, n, d = x.shape
        h = self.heads

        def split(t):
            return t.reshape(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        w = nx.softmax_rows(q @ k.transpose(-2, -1) / math.sqrt(d // h))
        if record is not None:
            record.append(w.detach())
        y = (w @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(y)


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.attn = Attention(d, heads)
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)
        self.ada = nn.Linear(d, 6 * d)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, c, record=None):
        s1, g1, a1, s2, g2, a2 = self.ada(F.silu(c)).chunk(6, dim=-1)
        x = x + a1[:, None] * self.attn(modulate(nx.layer_norm(x, eps=1e-6), s1, g1), record)
        hdn = nx.gelu(self.fc1(modulate(nx.layer_norm(x, eps=1e-6), s2, g2)))
        return x + a2[:, None] * self.fc2(hdn)


class WardrobeDiT(nn.Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        d = cfg.d_model
        gen = torch.Generator().manual_seed(seed)
        self.token_in = nn.Linear(cfg.in_channels, d)
        self.text_table = nn.Parameter(torch.empty(cfg.vocab, d))
        self.text_pos = nn.Parameter(torch.empty(cfg.text_len, d))
        self.register_buffer("image_pos", grid_sincos(d, cfg.grid), persistent=False)
        self.t_fc1 = nn.Linear(cfg.t_dim, d)
        self.t_fc2 = nn.Linear(d, d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks))
        self.final_ada = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, cfg.patch_dim)
        self.adapters: dict = {}
        self._init(gen)

    def _init(self, gen):
        for name, p in self.named_parameters():
            if p.ndim == 2:
                bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                with torch.no_grad():
                    p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
            else:
                nn.init.zeros_(p)
        with torch.no_grad():
            self.text_table.copy_(torch.randn(self.text_table.shape, generator=gen) * 0.02)
            self.text_pos.copy_(torch.randn(self.text_pos.shape, generator=gen) * 0.02)
        for lin in [self.final_ada, self.head] + [b.ada for b in self.blocks]:
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, z_t, clean_masked, mask_bits, prompt_ids, t, record_attention=None):
        """Velocity for every image token.

        Accepts a single sample (``z_t`` of shape (256, 48)) or a batch
        (B, 256, 48). ``record_attention`` is an optional list that receives
        one (B, heads, N, N) attention tensor per block.
        """
        single = z_t.ndim == 2
        if single:
            z_t, clean_masked, mask_bits = z_t[None], clean_masked[None], mask_bits[None]
        b = z_t.shape[0]
        ids = torch.as_tensor(prompt_ids, dtype=torch.long)
        if ids.ndim == 1:
            ids = ids[None].expand(b, -1)
        t = torch.as_tensor(t, dtype=z_t.dtype).reshape(-1).expand(b)

        img = self.token_in(torch.cat([z_t, clean_masked, mask_bits], dim=-1)) + self.image_pos.to(z_t.dtype)
        txt = nx.embedding(self.text_table, ids) + self.text_pos
        x = torch.cat([txt, img], dim=1)
        c = self.t_fc2(F.silu(self.t_fc1(timestep_embedding(t, self.config.t_dim))))
        for blk in self.blocks:
            x = blk(x, c, record_attention)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        out = self.head(modulate(nx.layer_norm(x[:, self.config.text_len:], eps=1e-6), shift, scale))
        return out[0] if single else out


def token_kinds(config: ModelConfig, wardrobe_cols: int = 4):
    """'text' | 'wardrobe' | 'canvas' per sequence position."""
    cols = np.tile(np.arange(config.grid), config.grid)
    return ["text"] * config.text_len + ["wardrobe" if c < wardrobe_cols else "canvas" for c in cols]


# ---------------------------------------------------------------------------
# LoRA


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float = 16.0, generator=None):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        d_out, d_in = base.weight.shape
        self.A = nn.Parameter(torch.randn(rank, d_in, generator=generator, dtype=base.weight.dtype) * 0.02)
        self.B = nn.Parameter(torch.zeros(d_out, rank, dtype=base.weight.dtype))

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.A), self.B)

    def delta(self):
        return self.scale * (self.B @ self.A)


class AdapterError(ValueError):
    pass


def default_targets(config: ModelConfig):
    return [f"blocks.{i}.attn.{p}.weight" for i in range(config.blocks) for p in "qkvo"]


def _split_path(path):
    if not path.endswith(".weight"):
        raise AdapterError(f"adapter target must be a .weight path, got {path!r}")
    mod_path = path[: -len(".weight")]
    parent, _, leaf = mod_path.rpartition(".")
    return mod_path, parent, leaf


def attach_lora(model: WardrobeDiT, rank: int = 8, alpha: float = 16.0, targets=None, seed: int = 0):
    """Freeze every base parameter and wrap each target projection with an adapter."""
    targets = list(targets or default_targets(model.config))
    gen = torch.Generator().manual_seed(seed)
    resolved = []
    for path in targets:
        mod_path, parent, leaf = _split_path(path)
        if path in model.adapters:
            raise AdapterError(f"adapter already attached to {path}")
        try:
            mod = model.get_submodule(mod_path)
        except AttributeError:
            raise AdapterError(f"no parameter at {path}") from None
        if not isinstance(mod, nn.Linear):
            raise AdapterError(f"{path} is not a linear projection")
        resolved.append((path, parent, leaf, mod))
    for p in model.parameters():
        p.requires_grad_(False)
    for path, parent, leaf, mod in resolved:
        ad = LoRALinear(mod, rank, alpha, gen)
        setattr(model.get_submodule(parent), leaf, ad)
        model.adapters[path] = ad
    return list(model.adapters)


def merge_lora(model: WardrobeDiT) -> WardrobeDiT:
    """Fold every adapter into its base weight and remove the wrappers."""
    with torch.no_grad():
        for path, ad in list(model.adapters.items()):
            ad.base.weight.add_(ad.delta())
            _, parent, leaf = _split_path(path)
            setattr(model.get_submodule(parent), leaf, ad.base)
    model.adapters = {}
    return model


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def base_state(model: WardrobeDiT) -> dict:
    """Base parameters under their adapter-free names."""
    return {n.replace(".base.", "."): p for n, p in model.named_parameters() if not n.endswith((".A", ".B"))}


def adapter_state(model: WardrobeDiT) -> dict:
    out = {}
    for path, ad in model.adapters.items():
        out[path + ".A"] = ad.A
        out[path + ".B"] = ad.B
    return out


def state_digest(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, little-endian float32 payload

MAGIC = b"WPLORA1\n"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, model: WardrobeDiT, sections=("base", "adapters"), extra=None) -> Path:
    tables = {"base": base_state(model), "adapters": adapter_state(model)}
    directory, chunks, offset = {}, [], 0
    for sec in sections:
        entries = []
        for name, t in sorted(tables[sec].items()):
            buf = t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
            entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
            chunks.append(buf)
            offset += len(buf)
        directory[sec] = entries
    header = {"config": asdict(model.config), "sections": directory, "extra": extra or {}}
    if "adapters" in sections and model.adapters:
        ad = next(iter(model.adapters.values()))
        header["adapter_meta"] = {"rank": ad.rank, "alpha": ad.alpha, "targets": list(model.adapters)}
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)
    return path


def read_checkpoint(path):
    """(header, {section: {name: float32 tensor}})."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen])
    payload = data[start + hlen:]
    out = {}
    for sec, entries in header["sections"].items():
        out[sec] = {}
        for e in entries:
            raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise CheckpointError(f"{path}: truncated tensor {e['name']}")
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])
            out[sec][e["name"]] = torch.from_numpy(arr.copy())
    return header, out


def load_base(path) -> WardrobeDiT:
    header, tensors = read_checkpoint(path)
    if "base" not in tensors:
        raise CheckpointError(f"{path}: no base section")
    model = WardrobeDiT(ModelConfig(**header["config"]))
    own = base_state(model)
    if set(own) != set(tensors["base"]):
        raise CheckpointError(f"{path}: parameter set does not match the model config")
    with torch.no_grad():
        for name, p in own.items():
            src = tensors["base"][name]
            if src.shape != p.shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            p.copy_(src)
    return model


def load_adapters(model: WardrobeDiT, path) -> list:
    """Attach adapters stored in ``path`` onto ``model`` (which must have none)."""
    header, tensors = read_checkpoint(path)
    if header["config"] != asdict(model.config):
        raise CheckpointError(f"{path}: adapter checkpoint was trained for a different model config")
    meta = header.get("adapter_meta")
    if not meta:
        raise CheckpointError(f"{path}: no adapters section")
    attach_lora(model, meta["rank"], meta["alpha"], meta["targets"])
    with torch.no_grad():
        for name, p in adapter_state(model).items():
            p.copy_(tensors["adapters"][name])
    return meta["targets"]

import numpy as np
import pytest
import torch
from torch.func import functional_call

from wplora import numerics as nx
from wplora.model import (MAGIC, AdapterError, CheckpointError, ModelConfig, PatchEncoder, WardrobeDiT, adapter_state,
                          attach_lora, base_state, load_adapters, load_base, merge_lora, patchify, read_checkpoint,
                          save_checkpoint, state_digest, token_kinds, trainable_parameters, unpatchify)


def _inputs(cfg, seed=0, batch=None):
    rng = nx.RngStream(seed)
    lead = () if batch is None else (batch,)
    z = rng.normal_tensor(*lead, cfg.n_image, cfg.patch_dim)
    clean = rng.normal_tensor(*lead, cfg.n_image, cfg.patch_dim)
    bits = (rng.normal_tensor(*lead, cfg.n_image, cfg.patch * cfg.patch) > 0).float()
    ids = torch.as_tensor(rng.integers(0, cfg.vocab, cfg.text_len))
    return z, clean, bits, ids


def _randomize(model, seed=0, scale=0.3):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return model


# ---------------------------------------------------------------------------
# patchify


def test_config_channels():
    cfg = ModelConfig()
    assert cfg.in_channels == 112 and cfg.n_image == 256 and cfg.patch_dim == 48
    with pytest.raises(ValueError):
        ModelConfig(d_model=130, heads=4)


def test_patchify_roundtrip_and_indexing():
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    tok = patchify(img)
    assert tok.shape == (256, 48)
    assert np.array_equal(unpatchify(tok, 64, 64), img)
    for r, c in [(0, 0), (3, 7), (15, 15), (9, 2)]:
        assert np.array_equal(tok[r * 16 + c], img[4 * r:4 * r + 4, 4 * c:4 * c + 4].reshape(-1))
    t = torch.from_numpy(img.astype(np.float32))
    assert torch.equal(unpatchify(patchify(t), 64, 64), t)


def test_patchify_constant_image():
    tok = patchify(np.full((64, 64, 3), 7, dtype=np.uint8))
    assert (tok == tok[0]).all()


def test_patchify_shape_errors():
    with pytest.raises(ValueError):
        patchify(np.zeros((62, 64, 3)))
    with pytest.raises(ValueError):
        unpatchify(np.zeros((255, 48)), 64, 64)


def test_encoder_roundtrip():
    img = np.random.default_rng(1).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    enc = PatchEncoder()
    x = enc.encode(img)
    assert x.min() >= -1 and x.max() <= 1
    assert np.array_equal(enc.decode(x), img)


def test_token_kinds_follow_layout():
    kinds = token_kinds(ModelConfig())
    assert kinds[:16] == ["text"] * 16
    img = np.array(kinds[16:]).reshape(16, 16)
    assert (img[:, :4] == "wardrobe").all() and (img[:, 4:] == "canvas").all()


# ---------------------------------------------------------------------------
# forward


def test_forward_shapes_single_and_batch(tiny_config):
    m = _randomize(WardrobeDiT(tiny_config))
    z, c, b, ids = _inputs(tiny_config, batch=3)
    out = m(z, c, b, ids, torch.tensor([0.1, 0.5, 0.9]))
    assert out.shape == (3, 256, 48)
    single = m(z[1], c[1], b[1], ids, 0.5)
    assert torch.allclose(single, out[1], atol=1e-6)


def test_attention_rows_are_distributions():
    cfg = ModelConfig(d_model=32, heads=4, blocks=2, t_dim=32)
    m = _randomize(WardrobeDiT(cfg), scale=0.2)
    rec = []
    m(*_inputs(cfg), 0.3, record_attention=rec)
    assert len(rec) == 2
    for a in rec:
        assert a.shape == (1, 4, 272, 272)
        assert (a >= 0).all()
        assert (a.sum(-1) - 1).abs().max() < 1e-5


def test_text_permutation_with_tied_positions(tiny_config):
    m = _randomize(WardrobeDiT(tiny_config), seed=3)
    with torch.no_grad():
        m.text_pos[5] = m.text_pos[9]
    z, c, b, ids = _inputs(tiny_config)
    ids = ids.clone()
    ids[5] = ids[9] = 11
    perm = ids.clone()
    perm[[5, 9]] = perm[[9, 5]]
    assert torch.equal(m(z, c, b, ids, 0.4), m(z, c, b, perm, 0.4))


def test_full_model_gradient_check_float64():
    cfg = ModelConfig(d_model=16, heads=2, blocks=1, grid=4, text_len=4, t_dim=16)
    model = _randomize(WardrobeDiT(cfg), seed=7, scale=0.3).double()
    names = [n for n, _ in model.named_parameters()]
    params = [p.detach() for _, p in model.named_parameters()]
    z, c, b, ids = _inputs(cfg, seed=2)
    z, c = z.double(), c.double()
    target = nx.RngStream(9).normal_tensor(cfg.n_image, cfg.patch_dim, dtype=torch.float64)
    w = (torch.arange(cfg.n_image) % 3 > 0).double()[:, None]

    def loss(z_in, *ps):
        t = torch.tensor(0.37, dtype=torch.float64)
        out = functional_call(model, dict(zip(names, ps)), (z_in, c, b.double(), ids, t))
        return ((out - target) ** 2 * w).sum() / w.sum()

    # one norm-wise error over the whole gradient vector: the key bias has an exactly zero
    # gradient (softmax is shift invariant per row), so a per-tensor ratio would compare noise
    inputs = [z] + params
    ana = torch.cat([g.reshape(-1) for g in nx.analytic_grad(loss, inputs)])
    num = torch.cat([g.reshape(-1) for g in nx.numerical_grad(loss, inputs)])
    assert nx.relative_error(ana, num) < 1e-3
    k_bias = names.index("blocks.0.attn.k.bias") + 1
    assert nx.analytic_grad(loss, inputs)[k_bias].abs().max() < 1e-12


# ---------------------------------------------------------------------------
# LoRA


def test_zero_init_adapters_bit_identical(tiny_config):
    m = _randomize(WardrobeDiT(tiny_config), seed=1)
    args = _inputs(tiny_config)
    before = m(*args, 0.6)
    attach_lora(m, 8, 16)
    for ad in m.adapters.values():
        assert not ad.B.any()
        assert abs(ad.A.std().item() - 0.02) < 0.01
    assert torch.equal(m(*args, 0.6), before)


def test_trainable_count_default_config():
    m = WardrobeDiT(ModelConfig())
    targets = attach_lora(m, 8, 16)
    assert len(targets) == 24
    n = sum(p.numel() for p in trainable_parameters(m))
    assert n == 24 * 8 * (128 + 128) == 49_152
    assert all(not p.requires_grad for p in base_state(m).values())


def test_attach_errors(tiny_config):
    m = WardrobeDiT(tiny_config)
    attach_lora(m)
    with pytest.raises(AdapterError, match="already"):
        attach_lora(m)
    m2 = WardrobeDiT(tiny_config)
    with pytest.raises(AdapterError, match="no parameter"):
        attach_lora(m2, targets=["blocks.7.attn.q.weight"])
    with pytest.raises(AdapterError):
        attach_lora(m2, targets=["blocks.0.attn.q.bias"])


def test_merge_zero_adapters_exact(tiny_config):
    m = _randomize(WardrobeDiT(tiny_config), seed=4)
    ref = {k: v.clone() for k, v in base_state(m).items()}
    attach_lora(m)
    merge_lora(m)
    assert all(torch.equal(ref[k], v) for k, v in base_state(m).items())


def test_merge_matches_adapted_forward(tiny_config):
    m = _randomize(WardrobeDiT(tiny_config), seed=5, scale=0.2)
    attach_lora(m, seed=2)
    with torch.no_grad():
        for ad in m.adapters.values():
            ad.B.copy_(torch.randn(ad.B.shape) * 0.1)
    inputs = [_inputs(tiny_config, seed=s) for s in range(10)]
    with torch.no_grad():
        adapted = [m(*a, 0.1 * k) for k, a in enumerate(inputs)]
        merge_lora(m)
        assert not m.adapters
        merged = [m(*a, 0.1 * k) for k, a in enumerate(inputs)]
    assert max((x - y).abs().max().item() for x, y in zip(adapted, merged)) < 1e-5


def test_freeze_contract_100_steps(tiny_config):
    m = _randomize(WardrobeDiT(tiny_config), seed=6, scale=0.1)
    attach_lora(m)
    before = {k: v.clone() for k, v in base_state(m).items()}
    opt = nx.AdamW(trainable_parameters(m), lr=1e-3)
    z, c, b, ids = _inputs(tiny_config)
    for _ in range(100):
        opt.zero_grad()
        (m(z, c, b, ids, 0.5) ** 2).mean().backward()
        opt.step()
    after = base_state(m)
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert any(ad.B.abs().sum() > 0 for ad in m.adapters.values())


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path, tiny_config):
    m = _randomize(WardrobeDiT(tiny_config), seed=8, scale=0.1)
    save_checkpoint(tmp_path / "base.ckpt", m, sections=("base",))
    attach_lora(m, seed=3)
    with torch.no_grad():
        for ad in m.adapters.values():
            ad.B.normal_()
    save_checkpoint(tmp_path / "ad.ckpt", m, sections=("adapters",))
    raw = (tmp_path / "ad.ckpt").read_bytes()
    assert raw.startswith(MAGIC)

    back = load_base(tmp_path / "base.ckpt")
    assert state_digest(base_state(back)) == state_digest(base_state(m))
    load_adapters(back, tmp_path / "ad.ckpt")
    assert state_digest(adapter_state(back)) == state_digest(adapter_state(m))
    args = _inputs(tiny_config)
    assert torch.equal(back(*args, 0.2), m(*args, 0.2))
    header, tensors = read_checkpoint(tmp_path / "ad.ckpt")
    assert set(tensors) == {"adapters"} and header["adapter_meta"]["rank"] == 8


def test_checkpoint_errors(tmp_path, tiny_config):
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "junk")
    m = WardrobeDiT(tiny_config)
    path = save_checkpoint(tmp_path / "b.ckpt", m, sections=("base",))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(path)
    attach_lora(m)
    save_checkpoint(tmp_path / "a.ckpt", m, sections=("adapters",))
    with pytest.raises(CheckpointError, match="different model config"):
        load_adapters(WardrobeDiT(ModelConfig(d_model=16, heads=2, blocks=2, t_dim=16)), tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError, match="no base"):
        load_base(tmp_path / "a.ckpt")

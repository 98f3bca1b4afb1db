"""End-to-end reproduction protocol behind the long-running acceptance checks.

Stages are cached under one run directory, each keyed by a JSON stamp of the
settings that produced it, so an interrupted run resumes where it stopped and
a finished run can be re-scored without retraining:

    data/                      synthetic dataset
    base/base.ckpt             pretrained base (frozen afterwards)
    adapt/{variant}_s{seed}    adapters with / without the selective loss
    reports/...json            benchmark reports per adapter and pool
    summary.json               the numbers the acceptance suite checks
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .evaluate import BenchmarkSpec, MetricReport, compare_ablation, run_benchmark
from .flow import TrainConfig, adapt_batch, adapt_lora, cell_attention_mass, pretrain_base
from .model import ModelConfig, WardrobeDiT, base_state, load_adapters, load_base, state_digest
from .numerics import RngStream
from .persona import DataConfig, generate_dataset, load_dataset
from .polyptych import build_layout

log = logging.getLogger(__name__)

VARIANTS = {"with_ssr": 0.5, "without_ssr": 0.0}


@dataclass
class ReproConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    adapt_seeds: tuple = (0, 1, 2)
    attention_samples: int = 20


def _stamp_ok(path: Path, stamp: dict) -> bool:
    return path.exists() and json.loads(path.read_text()) == stamp


def _write_stamp(path: Path, stamp: dict):
    path.write_text(json.dumps(stamp, indent=1, sort_keys=True) + "\n")


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: asdict(o) if hasattr(o, "__dataclass_fields__") else list(o)))


def prepare_data(cfg: ReproConfig, run: Path):
    stamp = {"data": _jsonable(cfg.data)}
    if not _stamp_ok(run / "data" / "stamp.json", stamp):
        generate_dataset(cfg.data, run / "data")
        _write_stamp(run / "data" / "stamp.json", stamp)
    return load_dataset(run / "data" / "manifest.json")


def prepare_base(cfg: ReproConfig, run: Path, dataset) -> Path:
    stamp = {"data": _jsonable(cfg.data), "model": _jsonable(cfg.model), "train": _jsonable(cfg.train)}
    path = run / "base" / "base.ckpt"
    if not (path.exists() and _stamp_ok(run / "base" / "stamp.json", stamp)):
        torch.manual_seed(cfg.train.seed)
        t0 = time.time()
        model = WardrobeDiT(cfg.model, seed=cfg.train.seed)
        pretrain_base(model, dataset, cfg.train, run / "base")
        _write_stamp(run / "base" / "stamp.json", stamp)
        log.info("pretraining took %.0f s", time.time() - t0)
    return path


def adapter_path(run: Path, variant: str, seed: int) -> Path:
    return run / "adapt" / f"{variant}_s{seed}" / "adapters.ckpt"


def prepare_adapter(cfg: ReproConfig, run: Path, dataset, base: Path, variant: str, seed: int) -> Path:
    tcfg = TrainConfig(**{**asdict(cfg.train), "p_ssr": VARIANTS[variant], "seed": seed})
    out = adapter_path(run, variant, seed).parent
    stamp = {"base": state_digest(base_state(load_base(base))), "train": _jsonable(tcfg)}
    if not (adapter_path(run, variant, seed).exists() and _stamp_ok(out / "stamp.json", stamp)):
        model = load_base(base)
        before = state_digest(base_state(model))
        t0 = time.time()
        model, _, _ = adapt_lora(model, dataset, tcfg, out)
        after = state_digest(base_state(model))
        (out / "freeze.json").write_text(json.dumps({"base_before": before, "base_after": after,
                                                     "identical": before == after,
                                                     "seconds": round(time.time() - t0, 1)}, indent=1) + "\n")
        _write_stamp(out / "stamp.json", stamp)
    return adapter_path(run, variant, seed)


def load_adapted(base: Path, adapters: Path):
    model = load_base(base)
    load_adapters(model, adapters)
    model.eval()
    return model


def prepare_report(cfg: ReproConfig, run: Path, dataset, base: Path, variant: str, seed: int, pool: str):
    spec = BenchmarkSpec(**{**asdict(cfg.bench), "pool": pool})
    ad = adapter_path(run, variant, seed)
    path = run / "reports" / f"{variant}_s{seed}_{pool}.json"
    stamp = {"adapters": state_digest(json_free_state(ad)), "spec": asdict(spec)}
    stamp_path = path.with_suffix(".stamp.json")
    if not (path.exists() and _stamp_ok(stamp_path, stamp)):
        path.parent.mkdir(parents=True, exist_ok=True)
        model = load_adapted(base, ad)
        t0 = time.time()
        report = run_benchmark(model, dataset, spec, meta={"variant": variant, "adapt_seed": seed,
                                                           "adapters": str(ad.relative_to(run))})
        report.meta["seconds"] = round(time.time() - t0, 1)
        report.save(path)
        _write_stamp(stamp_path, stamp)
    return MetricReport.from_dict(json.loads(path.read_text()))


def json_free_state(ckpt: Path) -> dict:
    from .model import read_checkpoint

    _, tensors = read_checkpoint(ckpt)
    return {f"{s}/{k}": v for s, sec in tensors.items() for k, v in sec.items()}


def attention_diagnostic(cfg: ReproConfig, run: Path, dataset, base: Path, variant="with_ssr", seed=0):
    """Attention mass of upper-garment canvas queries on each wardrobe cell."""
    model = load_adapted(base, adapter_path(run, variant, seed))
    layout = build_layout()
    out = {}
    for pool in ("train", "test"):
        ids = sorted(dataset.train_ids if pool == "train" else dataset.test_ids)
        samples = adapt_batch(dataset, ids, layout, RngStream(cfg.bench.seed).child("attention", pool),
                              cfg.attention_samples)
        mass = cell_attention_mass(model, samples, "upper", t=0.5, seed=cfg.bench.seed)
        out[pool] = {"cell_mass": [float(m) for m in mass],
                     "upper_dominant": bool(mass[1] > mass[0] and mass[1] > mass[2])}
    base_model = load_base(base)
    samples = adapt_batch(dataset, sorted(dataset.test_ids), layout,
                          RngStream(cfg.bench.seed).child("attention", "test"), cfg.attention_samples)
    out["base_test_cell_mass"] = [float(m) for m in cell_attention_mass(base_model, samples, "upper", 0.5,
                                                                        cfg.bench.seed)]
    return out


def log_losses(path: Path) -> dict:
    return {rec["step"]: rec["loss"] for rec in map(json.loads, path.read_text().splitlines())}


def log_seconds(path: Path) -> float:
    return sum(json.loads(line)["wall_ms"] for line in path.read_text().splitlines()) / 1000.0


def pretrain_curve(cfg: ReproConfig, run: Path, dataset, seeds=(0, 1, 2), early: int = 100) -> dict:
    """Loss at step ``early`` and at the last pretraining step, for several pretraining seeds."""
    last = cfg.train.pretrain_iterations
    out = {}
    for seed in seeds:
        if seed == cfg.train.seed:
            path = run / "base" / "pretrain_log.jsonl"
        else:
            d = run / "curve" / f"s{seed}"
            tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
            stamp = {"data": _jsonable(cfg.data), "model": _jsonable(cfg.model), "train": _jsonable(tcfg)}
            path = d / "pretrain_log.jsonl"
            if not (path.exists() and _stamp_ok(d / "stamp.json", stamp)):
                pretrain_base(WardrobeDiT(cfg.model, seed=seed), dataset, tcfg, d)
                _write_stamp(d / "stamp.json", stamp)
        losses = log_losses(path)
        out[str(seed)] = {"early": losses[early - 1], "final": losses[last - 1]}
    early_med = float(np.median([v["early"] for v in out.values()]))
    final_med = float(np.median([v["final"] for v in out.values()]))
    return {"per_seed": out, "median_early": early_med, "median_final": final_med, "steps": [early, last]}


def run_reproduction(run_dir, cfg: ReproConfig | None = None, stages=("c7", "c8", "c9")) -> dict:
    cfg = cfg or ReproConfig()
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    dataset = prepare_data(cfg, run)
    base = prepare_base(cfg, run, dataset)
    summary_path = run / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    summary["config"] = _jsonable(asdict(cfg))

    first = cfg.adapt_seeds[0]
    prepare_adapter(cfg, run, dataset, base, "with_ssr", first)
    if "c7" in stages:
        rep = prepare_report(cfg, run, dataset, base, "with_ssr", first, "test")
        o = rep.overall
        summary["c7"] = {"identity_similarity": o["identity_similarity"],
                         "shuffled_identity_similarity": o["shuffled_identity_similarity"],
                         "margin": o["identity_similarity"] - o["shuffled_identity_similarity"],
                         "generations": o["n"], "prompt_adherence": o["prompt_adherence"]}
        ad_dir = adapter_path(run, "with_ssr", first).parent
        summary["freeze"] = json.loads((ad_dir / "freeze.json").read_text())
        summary["c7"]["seconds"] = {"pretrain": log_seconds(run / "base" / "pretrain_log.jsonl"),
                                    "adapt": log_seconds(ad_dir / "adapters_log.jsonl"),
                                    "benchmark": rep.meta.get("seconds")}
        summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")

    if "c9" in stages:
        summary["c9"] = attention_diagnostic(cfg, run, dataset, base, "with_ssr", first)
        summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")

    if "c8" in stages:
        per_seed = []
        for seed in cfg.adapt_seeds:
            reports = {}
            for variant in VARIANTS:
                prepare_adapter(cfg, run, dataset, base, variant, seed)
                reports[variant] = {pool: prepare_report(cfg, run, dataset, base, variant, seed, pool)
                                    for pool in ("train", "test")}
            cmp = compare_ablation(reports["with_ssr"], reports["without_ssr"])
            cmp["seed"] = seed
            cmp["absolute"] = {v: {p: {"identity_similarity": r.overall["identity_similarity"],
                                       "prompt_adherence": r.overall["prompt_adherence"]}
                                   for p, r in reports[v].items()} for v in reports}
            per_seed.append(cmp)
            summary["c8_per_seed"] = per_seed
            summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        pools = ("train", "test")
        mean = {p: {"delta_is": float(np.mean([c["pools"][p]["delta_is"] for c in per_seed])),
                    "delta_ps": float(np.mean([c["pools"][p]["delta_ps"] for c in per_seed]))} for p in pools}
        summary["c8"] = {"seeds": list(cfg.adapt_seeds), "mean": mean,
                         "matches_paper_direction": all(mean[p]["delta_is"] > 0 for p in pools),
                         "ps_not_worse_by_0_05": all(mean[p]["delta_ps"] >= -0.05 for p in pools)}
        summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")

    if "curve" in stages:
        summary["curve"] = pretrain_curve(cfg, run, dataset)
        summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary

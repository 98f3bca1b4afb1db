"""``wplora`` command line: data synthesis, training, generation, evaluation, probing.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 missing or unusable
artifact, 5 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, RunConfig, load_config
from .flow import NumericAbort

log = logging.getLogger("wplora")

EXIT_CONFIG, EXIT_IO, EXIT_ARTIFACT, EXIT_NUMERIC = 2, 3, 4, 5


class MissingArtifact(Exception):
    pass


def _require(path, what: str) -> Path:
    if path is None:
        raise MissingArtifact(f"{what}: no path given (set paths.{what} in the config or pass --{what.replace('_', '-')})")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what}: {p} does not exist")
    return p


def _dataset(cfg: RunConfig):
    from .persona import generate_dataset, load_dataset

    if cfg.paths.data:
        root = _require(cfg.paths.data, "data")
        return load_dataset(root)
    return generate_dataset(cfg.data)


def _adapted(cfg: RunConfig, adapters=None):
    from .model import load_adapters, load_base

    model = load_base(_require(cfg.paths.base, "base"))
    load_adapters(model, _require(adapters or cfg.paths.adapters, "adapters"))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(cfg: RunConfig, args):
    from .persona import generate_dataset

    ds = generate_dataset(cfg.data, args.out, jobs=args.jobs)
    log.info("wrote %d identities, %d views to %s", len(ds.personas), sum(map(len, ds.views.values())), args.out)


def cmd_pretrain(cfg: RunConfig, args):
    from .flow import pretrain_base
    from .model import WardrobeDiT

    model = WardrobeDiT(cfg.model, seed=cfg.train.seed)
    path, hist = pretrain_base(model, _dataset(cfg), cfg.train, args.out, steps=args.steps)
    log.info("base checkpoint %s (final loss %.5f)", path, hist[-1].loss if hist else float("nan"))


def cmd_adapt(cfg: RunConfig, args):
    from .flow import adapt_lora

    base = _require(cfg.paths.base, "base")
    _, path, hist = adapt_lora(base, _dataset(cfg), cfg.train, args.out, steps=args.steps)
    log.info("adapter checkpoint %s (final loss %.5f)", path, hist[-1].loss if hist else float("nan"))


def cmd_generate(cfg: RunConfig, args):
    from .flow import generate, inference_sample
    from .numerics import RngStream
    from .polyptych import save_sample

    g = cfg.generate
    model = _adapted(cfg)
    sample = inference_sample(_dataset(cfg), list(g.sources), g.pose, g.background,
                              RngStream(cfg.seed).child("wardrobe"))
    out = Path(args.out)
    save_sample(sample, out, "input")
    seeds = [cfg.seed + k for k in range(g.count)]
    for k, frame in enumerate(generate(model, [sample] * g.count, seeds, g.steps)):
        Image.fromarray(frame).save(out / f"gen_{k:02d}.png")
    log.info("wrote %d generations to %s", g.count, out)


def cmd_eval(cfg: RunConfig, args):
    from .evaluate import compare_ablation, run_benchmark

    ds = _dataset(cfg)
    out = Path(args.out)
    variants = {"with_ssr": cfg.paths.adapters}
    if args.ablation:
        variants["without_ssr"] = _require(cfg.paths.adapters_ablation, "adapters_ablation")
    reports = {}
    for name, ad in variants.items():
        model = _adapted(cfg, ad)
        reports[name] = {}
        for pool in ("train", "test"):
            spec = replace(cfg.bench, pool=pool)
            rep = run_benchmark(model, ds, spec, meta={"adapters": str(ad), "base": str(cfg.paths.base)},
                                out_dir=out / "sheets" / name)
            (out / "reports").mkdir(parents=True, exist_ok=True)
            rep.save(out / "reports" / f"{name}_{pool}.json")
            reports[name][pool] = rep
            o = rep.overall
            log.info("%s/%s: I.S. %.4f (shuffled %.4f)  P.S. %.3f", name, pool, o["identity_similarity"],
                     o["shuffled_identity_similarity"], o["prompt_adherence"])
    if args.ablation:
        cmp = compare_ablation(reports["with_ssr"], reports["without_ssr"])
        (out / "ablation.json").write_text(json.dumps(cmp, indent=1, sort_keys=True) + "\n")
        log.info("ablation: dI.S. train %+.4f test %+.4f, matches paper direction: %s",
                 cmp["pools"]["train"]["delta_is"], cmp["pools"]["test"]["delta_is"], cmp["matches_paper_direction"])


def cmd_probe_attention(cfg: RunConfig, args):
    from .flow import adapt_batch, attention_overlay, cell_attention_mass, record_attention
    from .numerics import RngStream
    from .persona import PARTS
    from .polyptych import build_layout, mask_to_tokens

    p = cfg.probe
    ds = _dataset(cfg)
    model = _adapted(cfg)
    layout = build_layout()
    ids = sorted(ds.train_ids if p.pool == "train" else ds.test_ids)
    samples = adapt_batch(ds, ids, layout, RngStream(cfg.seed).child("probe"), p.samples)
    mass = cell_attention_mass(model, samples, p.part, p.t, cfg.seed, layout)
    j = PARTS.index(p.part)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    verdict = bool(all(mass[j] > mass[k] for k in range(len(mass)) if k != j))
    doc = {"part": p.part, "cell_mass": dict(zip(PARTS, map(float, mass))), "own_cell_dominant": verdict}
    (out / "attention.json").write_text(json.dumps(doc, indent=1) + "\n")

    # heatmaps for the query nearest the part's centroid in the first sample
    grid = mask_to_tokens(samples[0].subject_masks[j]).grid
    rows, cols = np.nonzero(grid)
    k = int(np.argmin((rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2))
    query = int(rows[k] * grid.shape[1] + cols[k])
    probe = record_attention(model, samples[0], p.t, query, cfg.seed, layout)
    Image.fromarray(attention_overlay(samples[0], probe["mean"])).save(out / "overlay_mean.png")
    for layer, maps in enumerate(probe["maps"]):
        Image.fromarray(attention_overlay(samples[0], maps.mean(0))).save(out / f"overlay_layer{layer}.png")
    log.info("cell mass %s -> %s cell dominant: %s", np.round(mass, 4).tolist(), p.part, verdict)


def cmd_reproduce(cfg: RunConfig, args):
    from .experiment import ReproConfig, run_reproduction

    rc = ReproConfig(data=cfg.data, model=cfg.model, train=cfg.train, bench=cfg.bench,
                     adapt_seeds=tuple(cfg.train.seed + k for k in range(3)), attention_samples=cfg.probe.samples)
    summary = run_reproduction(args.out, rc)
    log.info("summary written to %s", Path(args.out) / "summary.json")
    return summary


COMMANDS = {
    "synth-data": (cmd_synth_data, "render the synthetic persona dataset"),
    "pretrain": (cmd_pretrain, "train the base inpainting model"),
    "adapt": (cmd_adapt, "train LoRA adapters on a frozen base"),
    "generate": (cmd_generate, "generate people from a wardrobe of parts"),
    "eval": (cmd_eval, "run the set-1/2/3 benchmark (optionally the with/without ablation)"),
    "probe-attention": (cmd_probe_attention, "attention mass of canvas queries on wardrobe cells"),
    "reproduce": (cmd_reproduce, "full pretrain, adapt, benchmark and ablation protocol"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wplora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for data synthesis")
        p.add_argument("--steps", type=int, help="override the iteration count of a training command")
        p.add_argument("--ablation", action="store_true", help="eval: also score the without-L_ssr adapters")
        p.add_argument("--data", help="dataset directory (overrides paths.data)")
        p.add_argument("--base", help="base checkpoint (overrides paths.base)")
        p.add_argument("--adapters", help="adapter checkpoint (overrides paths.adapters)")
        p.add_argument("--adapters-ablation", help="without-L_ssr adapters (overrides paths.adapters_ablation)")
    return parser


def _setup_logging():
    level = os.environ.get("WPL_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(asctime)s %(levelname)s %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    torch.set_num_threads(1)
    from .model import CheckpointError
    from .persona import DatasetError

    try:
        cfg = load_config(args.config, args.seed)
        overrides = {k: getattr(args, k) for k in ("data", "base", "adapters", "adapters_ablation")
                     if getattr(args, k) is not None}
        if overrides:
            cfg = replace(cfg, paths=replace(cfg.paths, **overrides))
        args.out.mkdir(parents=True, exist_ok=True)
        cfg.echo(args.out)
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (MissingArtifact, CheckpointError, DatasetError) as e:
        log.error("missing or unusable artifact: %s", e)
        return EXIT_ARTIFACT
    except NumericAbort as e:
        log.error("numeric abort: %s", e)
        return EXIT_NUMERIC
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())

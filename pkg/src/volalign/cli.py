"""Command-line entry point: ``volalign <command> [options]``.

Configuration files are JSON objects with optional ``generator``, ``train``
and ``eval`` sections (see README). Flags override file values. Each
command writes its outputs plus ``manifest.json`` into ``--out-dir``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import cip
from .errors import VolAlignError
from .fewshot import accuracy_curve, evaluate_episode, mean_ci95, u_grid
from .geometry import KernelSpec
from .suites import IDENTITIES, gradient_suite, identity_suite
from .synthdata import GeneratorConfig, episode_records, gen_class_centers, save_embeddings
from .trainer import (
    TrainConfig,
    ablate,
    held_out_episodes,
    load_checkpoint,
    loss_variants,
    prompt_variants,
    save_checkpoint,
    toy_generator,
    toy_train_config,
    train,
)

TOKEN_ENV = "VOLALIGN_API_TOKEN"
EVAL_DEFAULTS = {"episodes": 200, "val_episodes": 50, "u": 0.5, "grid_step": 0.1, "seeds": [0, 1, 2, 3, 4],
                 "table": "loss"}

log = logging.getLogger("volalign")


class CommandFailed(Exception):
    """A command ran but its checks did not pass (exit status 1)."""


# ------------------------------------------------------------------ config


def resolve_config(args) -> dict:
    """Merge defaults, the ``--config`` file and flag overrides."""
    gen = toy_generator().to_dict()
    tr = toy_train_config().to_dict()
    ev = dict(EVAL_DEFAULTS)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if "command" in raw and "config" in raw:
            # a previous run's manifest: replay its resolved configuration
            raw = {k: v for k, v in raw["config"].items() if k in ("generator", "train", "eval")}
        unknown = set(raw) - {"generator", "train", "eval"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        gen.update(raw.get("generator", {}))
        tr.update(raw.get("train", {}))
        ev.update(raw.get("eval", {}))
    if args.seed is not None:
        gen["seed"] = tr["seed"] = args.seed
    for flag, key in (("loss_variant", "loss_variant"), ("anchor", "anchor"), ("tau", "temperature")):
        if getattr(args, flag) is not None:
            tr[key] = getattr(args, flag)
    if args.kernel is not None or args.sigma is not None:
        kern = dict(tr["kernel"])
        if args.kernel is not None and args.kernel != kern.get("kind"):
            kern = {"kind": args.kernel}
        if args.sigma is not None:
            kern["sigma"] = args.sigma
        tr["kernel"] = KernelSpec.from_dict(kern).to_dict()
    for flag in ("episodes", "u", "grid_step"):
        if getattr(args, flag) is not None:
            ev[flag] = getattr(args, flag)
    # validate eagerly so bad configs fail before any work
    GeneratorConfig.from_dict(gen)
    TrainConfig.from_dict(tr)
    return {"generator": gen, "train": tr, "eval": ev}


def _configs(resolved):
    return GeneratorConfig.from_dict(resolved["generator"]), TrainConfig.from_dict(resolved["train"])


# ----------------------------------------------------------------- outputs


class Outputs:
    """Collects the files a command writes and emits the run manifest."""

    def __init__(self, out_dir, command, resolved):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.resolved = resolved
        self.paths = []
        self.started = _now()

    def path(self, name) -> Path:
        p = self.dir / name
        self.paths.append(str(p))
        return p

    def json(self, name, obj):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[_cell(v) for v in r] for r in rows])

    def manifest(self):
        seed = self.resolved.get("train", {}).get("seed", self.resolved.get("seed"))
        doc = {"command": self.command, "config": self.resolved, "seed": seed,
               "started": self.started, "finished": _now(), "outputs": self.paths}
        with open(self.dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------- commands


def cmd_identities(args, out: Outputs):
    results = identity_suite(args.seed or 0, args.count, inject=args.inject_bug)
    out.json("identities.json", [r.to_dict() for r in results])
    out.csv("identities.csv", ["name", "instances", "max_error", "tolerance", "passed"],
            [[r.name, r.instances, r.max_error, r.tolerance, r.passed] for r in results])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_error={r.max_error:.3e} tol={r.tolerance:.0e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CommandFailed("identities failed: " + ", ".join(failed))


def cmd_gradcheck(args, out: Outputs):
    results = gradient_suite(args.seed or 0, args.count)
    out.json("gradcheck.json", [r.to_dict() for r in results])
    out.csv("gradcheck.csv", ["name", "instances", "max_relative_error", "tolerance", "passed"],
            [[r.name, r.instances, r.max_error, r.tolerance, r.passed] for r in results])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CommandFailed("gradient checks failed: " + ", ".join(failed))


def cmd_train(args, out: Outputs):
    gen, cfg = _configs(out.resolved)
    params, trace = train(cfg, gen)
    save_checkpoint(out.path("checkpoint.txt"), params, {"train": cfg.to_dict(), "generator": gen.to_dict()})
    fields = ["epoch", "total_loss", "ce_loss", "align_loss", "train_accuracy", "degenerate"]
    rows = [[getattr(r, f) for f in fields] for r in trace.records]
    out.csv("metrics.csv", fields, rows)
    out.json("metrics.json", [dict(zip(fields, r)) for r in rows])
    if trace.records:
        last = trace.records[-1]
        print(f"epoch {last.epoch}: loss {last.total_loss:.4f} train accuracy {last.train_accuracy:.4f}")


def _load(args, out):
    params, meta = load_checkpoint(args.checkpoint)
    gen = GeneratorConfig.from_dict(meta.get("generator", out.resolved["generator"]))
    if args.seed is not None:
        gen = replace(gen, seed=args.seed)
    cfg = TrainConfig.from_dict(meta.get("train", out.resolved["train"]))
    out.resolved["checkpoint"] = str(args.checkpoint)
    out.resolved["generator"] = gen.to_dict()
    return params, gen, cfg


def cmd_eval(args, out: Outputs):
    params, gen, cfg = _load(args, out)
    ev = out.resolved["eval"]
    eps = held_out_episodes(gen, cfg, int(ev["episodes"]), "test")
    accs = [evaluate_episode(e, params, float(ev["u"]), cfg.temperature, cfg.fusion) for e in eps]
    mean, half = mean_ci95(100.0 * np.asarray(accs))
    out.csv("eval_episodes.csv", ["episode", "accuracy"], [[i, a] for i, a in enumerate(accs)])
    out.json("eval.json", {"episodes": len(accs), "u": float(ev["u"]), "accuracy": mean, "ci95": half})
    print(f"accuracy {mean:.2f} +- {half:.2f} over {len(accs)} episodes at u={ev['u']}")


def cmd_sweep_u(args, out: Outputs):
    params, gen, cfg = _load(args, out)
    ev = out.resolved["eval"]
    us = u_grid(float(ev["grid_step"]))
    eps = held_out_episodes(gen, cfg, int(ev["episodes"]), "val")
    curve = accuracy_curve(eps, params, us, cfg.fusion)
    best = float(us[int(np.argmax(curve))])
    out.csv("sweep_u.csv", ["u", "accuracy"], [[float(u), float(a)] for u, a in zip(us, curve)])
    out.json("sweep_u.json", {"u": [float(u) for u in us], "accuracy": [float(a) for a in curve],
                              "best_u": best, "episodes": len(eps)})
    print(f"best u {best} accuracy {float(np.max(curve)):.4f}")


def cmd_ablate(args, out: Outputs):
    gen, cfg = _configs(out.resolved)
    ev = out.resolved["eval"]
    table = args.table or ev.get("table", "loss")
    variants = loss_variants() if table == "loss" else prompt_variants()
    rows = ablate(cfg, gen, variants, seeds=tuple(ev["seeds"]), n_test=int(ev["episodes"]),
                  n_val=int(ev["val_episodes"]), grid_step=float(ev["grid_step"]))
    out.csv("ablation.csv", ["variant", "mean", "ci95", "per_seed", "u"],
            [[r.name, r.mean, r.ci95, " ".join(repr(x) for x in r.per_seed), " ".join(repr(x) for x in r.u)]
             for r in rows])
    out.json("ablation.json", [r.to_dict() for r in rows])
    for r in rows:
        print(f"{r.name:20s} {r.mean:6.2f} +- {r.ci95:.2f}")


def cmd_gen_data(args, out: Outputs):
    gen, cfg = _configs(out.resolved)
    count = int(out.resolved["eval"]["episodes"])
    centers = gen_class_centers(gen)
    records = []
    for split in ("val", "test"):
        for ep in held_out_episodes(gen, cfg, count, split, centers):
            records += episode_records(ep)
    save_embeddings(out.path("embeddings.jsonl"), records)
    out.json("data_summary.json", {"records": len(records), "episodes_per_split": count, "dim": gen.dim})
    print(f"wrote {len(records)} records")


def cmd_gen_prompt(args, out: Outputs):
    text = cip.build_prompt(args.class_name, args.image or (), args.variant)
    with open(out.path("prompt.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)


def cmd_describe(args, out: Outputs):
    if not args.endpoint or not args.model:
        raise ValueError("describe needs --endpoint and --model")
    cfg = cip.ClientConfig(args.endpoint, args.model, os.environ.get(TOKEN_ENV), timeout=args.timeout or 30.0)
    prompt = cip.build_prompt(args.class_name, args.image or (), args.variant)
    desc = cip.request_description(cfg, prompt, args.variant, class_name=args.class_name)
    out.json("description.json", {"class_name": desc.class_name, "stages": desc.stage_outputs,
                                   "conclusion": desc.conclusion, "complete": desc.complete,
                                   "warnings": desc.warnings})
    print(desc.conclusion)


COMMANDS = {
    "identities": cmd_identities, "gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "sweep-u": cmd_sweep_u, "gen-data": cmd_gen_data, "gen-prompt": cmd_gen_prompt,
    "describe": cmd_describe,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="runs")
    common.add_argument("--episodes", type=int)
    common.add_argument("--u", type=float)
    common.add_argument("--grid-step", type=float)
    common.add_argument("--kernel", choices=["linear", "poly", "rbf"])
    common.add_argument("--sigma", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--loss-variant", choices=["none", "infonce", "linear_volume", "kernel_volume"])
    common.add_argument("--anchor", choices=["text", "vision"])
    common.add_argument("--variant", choices=sorted(cip.TAG_SETS), default=cip.DEFAULT_VARIANT,
                        help="prompt tag set")
    common.add_argument("--endpoint")
    common.add_argument("--model")
    common.add_argument("--timeout", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="volalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("identities", parents=[common], help="volume identity suite")
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--inject-bug", choices=IDENTITIES, help="flip a sign inside one identity (negative control)")
    s = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    s.add_argument("--count", type=int, default=100)
    sub.add_parser("train", parents=[common], help="train on synthetic episodes")
    for name, text in (("eval", "test accuracy of a checkpoint"), ("sweep-u", "accuracy across fusion factors")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--checkpoint", required=True)
    s = sub.add_parser("ablate", parents=[common], help="compare loss or prompt variants")
    s.add_argument("--table", choices=["loss", "prompt"])
    sub.add_parser("gen-data", parents=[common], help="write held-out episodes as embedding records")
    for name, text in (("gen-prompt", "print the staged description prompt"),
                       ("describe", "request a staged description from an endpoint")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--class-name", required=True)
        s.add_argument("--image", action="append", help="image reference, repeatable")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        resolved = resolve_config(args)
        resolved["command_args"] = {k: v for k, v in sorted(vars(args).items())
                                    if k not in ("config", "out_dir", "verbose")}
        out = Outputs(args.out_dir, args.command, resolved)
        try:
            COMMANDS[args.command](args, out)
        finally:
            out.manifest()
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (VolAlignError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

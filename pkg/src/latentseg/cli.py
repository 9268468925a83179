"""Command-line pipeline: ``latentseg {probe,synth,train,eval,ablate,report} --config PATH``.

Exit codes: 0 success, 2 invalid config, 3 missing or stale upstream artifact,
4 output exists (pass --force), 5 runtime failure, 6 output root locked by
another command, 7 hash chain inconsistent (report).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import pipeline as pl
from .evalharness import MetricsReport, ablation_sweep
from .masksynth import DatasetManifest, SynthesisError
from .probe import ProbeDivergenceError
from .segnet import TrainingDivergenceError, load_checkpoint, model_from_checkpoint

log = logging.getLogger("latentseg")

EXIT_OK, EXIT_CONFIG, EXIT_UPSTREAM, EXIT_EXISTS, EXIT_RUNTIME, EXIT_LOCKED, EXIT_CHAIN = 0, 2, 3, 4, 5, 6, 7
COMMANDS = ("probe", "synth", "train", "eval", "ablate", "report")


class OutputExistsError(RuntimeError):
    pass


class ChainError(RuntimeError):
    pass


def _refuse_existing(paths, force):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise OutputExistsError(f"output already exists: {', '.join(existing)} (use --force to overwrite)")


def _require(path, keys_expected, artifact, command):
    path = Path(path)
    if not path.exists():
        raise pl.MissingUpstreamError(f"{artifact} ({path})", command)
    if pl.recorded_hash(path) != keys_expected:
        raise pl.MissingUpstreamError(f"{artifact} ({path})", command,
                                      "stale (its config hash does not match the current config)")


class Context:
    def __init__(self, cfg: pl.PipelineConfig, workers: int, force: bool):
        self.cfg = cfg
        self.workers = workers
        self.force = force
        self.layout = pl.Layout(cfg.output_root)
        self.gen = cfg.generator()
        self.keys = pl.stage_keys(cfg, self.gen)


def cmd_probe(ctx: Context):
    lay = ctx.layout
    _refuse_existing([lay.direction("light"), lay.direction("dark")], ctx.force)
    pair = pl.run_probe(ctx.gen, ctx.cfg, lay, ctx.keys["probe"])
    print(f"directions written to {lay.directions} (dot {pair.dot:.4f})")


def cmd_synth(ctx: Context):
    lay = ctx.layout
    for pol in ("light", "dark"):
        _require(lay.direction(pol), ctx.keys["probe"], f"{pol} direction record", "probe")
    _refuse_existing([lay.manifest], ctx.force)
    man = pl.run_synth(ctx.gen, ctx.cfg, lay, pl.load_pair(lay), ctx.keys, ctx.workers)
    print(f"{man.count} samples written to {lay.dataset} (acceptance rate {man.acceptance_rate:.4f})")


def cmd_train(ctx: Context):
    lay = ctx.layout
    _require(lay.manifest, ctx.keys["synth"], "dataset manifest", "synth")
    _refuse_existing([lay.checkpoint], ctx.force)
    pl.run_train(ctx.cfg, lay, DatasetManifest.load(lay.dataset), ctx.keys)
    ckpt = load_checkpoint(lay.checkpoint)
    print(f"checkpoint written to {lay.checkpoint} (final loss {ckpt.loss_history[-1][1]:.4f})")


def _eval_targets(ctx: Context):
    """Datasets the eval command scores, with the held-out set rendered lazily."""
    names = []
    if isinstance(ctx.gen, pl.ToyCompositor) and ctx.cfg.data["eval"]["heldout_count"] > 0:
        names.append("toy-heldout")
    try:
        configured = pl.eval_datasets(ctx.cfg)
    except (OSError, ValueError) as exc:
        raise pl.ConfigError(f"eval.datasets: {exc}") from None
    names += [ds.name for ds in configured]
    if len(set(names)) != len(names):
        raise pl.ConfigError("eval.datasets: dataset names must be unique")
    return names, configured


def cmd_eval(ctx: Context):
    lay = ctx.layout
    _require(lay.checkpoint, ctx.keys["train"], "segmenter checkpoint", "train")
    names, datasets = _eval_targets(ctx)
    if not names:
        raise pl.ConfigError("eval: nothing to evaluate (no held-out set and no eval.datasets)")
    _refuse_existing([lay.eval_report(n) for n in names], ctx.force)
    held = pl.ensure_heldout(ctx.gen, ctx.cfg, lay, ctx.keys["heldout"])
    if held is not None:
        datasets = [held] + datasets
    model = model_from_checkpoint(load_checkpoint(lay.checkpoint))
    lay.reports.mkdir(parents=True, exist_ok=True)
    for rep in pl.run_eval(model, ctx.cfg, datasets, ctx.keys, ctx.workers):
        rep.save(lay.eval_report(rep.name))
        agg = rep.aggregate
        print(f"{rep.name}: acc {agg['acc']:.4f} iou {agg['iou']:.4f} "
              f"f_beta {agg['f_beta']:.4f} max_f_beta {agg['max_f_beta']:.4f}")


def cmd_ablate(ctx: Context):
    lay = ctx.layout
    sweeps = ctx.cfg.data["ablate"]["sweeps"]
    _refuse_existing([lay.reports / f"ablation_{s['axis']}.json" for s in sweeps], ctx.force)
    for sw in sweeps:
        table = ablation_sweep(ctx.gen, sw["axis"], sw["values"], ctx.cfg, out_root=lay.root,
                               workers=ctx.workers)
        for row in table["rows"]:
            if row["status"] == "ok":
                print(f"{sw['axis']}={row['value']}: acc {row['acc']:.4f} iou {row['iou']:.4f}")
            else:
                print(f"{sw['axis']}={row['value']}: FAILED {row['error']}")


def _chain(ctx: Context):
    """Collect each artifact's recorded hash and check it against the current config and upstream."""
    lay, keys = ctx.layout, ctx.keys
    entries = []  # (label, path, expected hash, upstream note)
    entries.append(("direction light", lay.direction("light"), keys["probe"]))
    entries.append(("direction dark", lay.direction("dark"), keys["probe"]))
    entries.append(("dataset manifest", lay.manifest, keys["synth"]))
    entries.append(("checkpoint", lay.checkpoint, keys["train"]))
    for p in sorted(lay.reports.glob("eval_*.json")) if lay.reports.exists() else []:
        entries.append((f"report {p.stem[5:]}", p, keys["eval"]))
    rows, problems = [], []
    for label, path, expected in entries:
        if not path.exists():
            rows.append((label, path, "missing", None))
            continue
        got = pl.recorded_hash(path)
        status = "ok" if got == expected else "MISMATCH"
        if status != "ok":
            problems.append(f"{label}: recorded {str(got)[:12]}, expected {expected[:12]}")
        rows.append((label, path, status, got))
    if lay.manifest.exists():
        up = pl.read_json(lay.manifest).get("directions_hash")
        if lay.direction("light").exists() and up != pl.recorded_hash(lay.direction("light")):
            problems.append("dataset manifest was built from different directions")
    if lay.checkpoint.exists() and lay.manifest.exists():
        up = load_checkpoint(lay.checkpoint).meta.get("dataset_hash")
        if up != pl.recorded_hash(lay.manifest):
            problems.append("checkpoint was trained on a different dataset")
    for label, path, status, _ in rows:
        if label.startswith("report") and status != "missing":
            up = pl.read_json(path).get("meta", {}).get("checkpoint_hash")
            if lay.checkpoint.exists() and up != pl.recorded_hash(lay.checkpoint):
                problems.append(f"{label} was produced by a different checkpoint")
    return rows, problems


def cmd_report(ctx: Context):
    lay = ctx.layout
    _refuse_existing([lay.summary], ctx.force)
    rows, problems = _chain(ctx)
    sweeps = sorted(lay.reports.glob("ablation_*.json")) if lay.reports.exists() else []
    if all(status == "missing" for _, _, status, _ in rows) and not sweeps:
        raise pl.MissingUpstreamError(f"every artifact under {lay.root}", "probe")
    lines = [f"config hash: {ctx.cfg.hash()}", "", "artifacts:"]
    for label, path, status, got in rows:
        rel = path.relative_to(lay.root)
        lines.append(f"  {label:<22} {status:<8} {str(got)[:12] if got else '-':<12} {rel}")
    if lay.direction("light").exists() and lay.direction("dark").exists():
        pair = pl.load_pair(lay)
        lines += ["", f"direction dot product: {pair.dot:.4f}"]
    if lay.manifest.exists():
        man = DatasetManifest.load(lay.dataset)
        counts = man.data["counts"]
        lines.append(f"dataset: {man.count} accepted of {counts['attempted']} "
                     f"(rate {man.acceptance_rate:.4f}, rejected {counts['rejected']})")
    if lay.checkpoint.exists():
        hist = load_checkpoint(lay.checkpoint).loss_history
        k = min(100, len(hist))
        first = sum(v for _, v in hist[:k]) / k
        last = sum(v for _, v in hist[-k:]) / k
        lines.append(f"training: {len(hist)} steps, mean loss first {k} {first:.4f}, last {k} {last:.4f}")
    for p in sorted(lay.reports.glob("eval_*.json")) if lay.reports.exists() else []:
        agg = MetricsReport.load(p).aggregate
        lines.append(f"eval {p.stem[5:]}: acc {agg['acc']:.4f} iou {agg['iou']:.4f} "
                     f"f_beta {agg['f_beta']:.4f} max_f_beta {agg['max_f_beta']:.4f}")
    for p in sweeps:
        table = pl.read_json(p)
        lines.append(f"ablation over {table['axis']}:")
        for row in table["rows"]:
            if row["status"] == "ok":
                lines.append(f"  {row['value']!s:<10} acc {row['acc']:.4f} iou {row['iou']:.4f} "
                             f"dot {row['dot']:.4f}")
            else:
                lines.append(f"  {row['value']!s:<10} failed: {row['error']}")
    lines += ["", "hash chain: " + ("consistent" if not problems else "INCONSISTENT")]
    lines += [f"  {p}" for p in problems]
    text = "\n".join(lines) + "\n"
    lay.reports.mkdir(parents=True, exist_ok=True)
    lay.summary.write_text(text)
    print(text, end="")
    if problems:
        raise ChainError("; ".join(problems))


HANDLERS = {"probe": cmd_probe, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentseg", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. probe.lambda_edge=0.8 (repeatable)")
    parser.add_argument("--workers", type=int, default=1, help="worker threads (default 1, deterministic)")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command: str, config_path, overrides=(), workers: int = 1, force: bool = False) -> int:
    try:
        if workers < 1:
            raise pl.ConfigError("--workers must be >= 1")
        cfg = pl.PipelineConfig.from_file(config_path, overrides)
        ctx = Context(cfg, workers, force)
    except pl.ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    root = cfg.output_root
    root.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(str(root / ".lock"), timeout=0):
            HANDLERS[command](ctx)
    except Timeout:
        print(f"{root} is locked by another command", file=sys.stderr)
        return EXIT_LOCKED
    except pl.ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pl.MissingUpstreamError, FileNotFoundError) as exc:
        print(f"missing upstream: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except OutputExistsError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_EXISTS
    except ChainError as exc:
        print(f"hash chain inconsistent: {exc}", file=sys.stderr)
        return EXIT_CHAIN
    except (SynthesisError, TrainingDivergenceError, ProbeDivergenceError, ValueError, OSError) as exc:
        print(f"{command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.overrides, args.workers, args.force)


if __name__ == "__main__":
    sys.exit(main())

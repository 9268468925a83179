"""Experiment configuration, artifact layout and the stage runner behind the CLI and sweeps.

Every artifact records a ``config_hash``: a digest of exactly the configuration
that determines it, including the hashes of its upstream artifacts. Seeds for
the stages derive from the single global seed:

    probe   seed      (dark direction: seed + 1)
    synth   seed + 2
    init    seed + 3
    train   seed + 4
    heldout seed + 5
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import shutil
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .evalharness import (DIRECTION_MODES, EvalDataset, MetricsReport, evaluate, iou,
                          load_dataset, write_toy_heldout)
from .generator import (Generator, ToyCompositor, build_generator, draw_latents,
                        toy_oracle_masks)
from .masksynth import DatasetManifest, RefineConfig, mask_deltas, synthesize_dataset
from .probe import (DirectionPair, ProbeConfig, find_direction_pair, load_direction,
                    save_direction)
from .segnet import (SegArchConfig, TrainConfig, init_model, load_checkpoint,
                     model_from_checkpoint, save_checkpoint, train)

log = logging.getLogger(__name__)

SEED_OFFSETS = {"probe": 0, "synth": 2, "init": 3, "train": 4, "heldout": 5}


class ConfigError(ValueError):
    pass


class MissingUpstreamError(RuntimeError):
    def __init__(self, artifact: str, command: str, detail: str = "missing"):
        super().__init__(f"{artifact} is {detail}; run `{command}` first")
        self.command = command


def _dataclass_defaults(cls, skip=()):
    return {f.name: f.default for f in fields(cls) if f.name not in skip}


DEFAULTS = {
    "seed": 0,
    "output_root": "runs/toy",
    "generator": {"id": "toy-compositor-v1", "params": {}},
    "probe": _dataclass_defaults(ProbeConfig, skip=("seed",)),
    "synth": {"n_accepted": 500, "epsilon": 2.0, "mode": "pair",
              "refine": _dataclass_defaults(RefineConfig)},
    "train": dict(_dataclass_defaults(TrainConfig, skip=("seed",)),
                  arch=_dataclass_defaults(SegArchConfig)),
    "eval": {"heldout_count": 200, "n_thresholds": 255, "datasets": []},
    "ablate": {"sweeps": [{"axis": "lambda", "values": [0.1, 0.2, 0.8]},
                          {"axis": "direction_mode", "values": list(DIRECTION_MODES)}]},
}

# subtrees whose contents are not checked against DEFAULTS
_FREE = {("generator", "params"), ("eval", "datasets"), ("ablate", "sweeps")}


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _merge(base: dict, extra: dict, path=()):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(base[key], dict) and path + (key,) not in _FREE:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_types(default, value, path):
    if isinstance(default, dict) and path not in _FREE:
        for k in default:
            _check_types(default[k], value[k], path + (k,))
        return
    where = ".".join(path)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def parse_override(item: str):
    """``"a.b=value"`` to ``("a.b", value)``; values parse as JSON when they can."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _nest(dotted: dict) -> dict:
    out: dict = {}
    for key, value in dotted.items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} conflicts with another override")
        node[parts[-1]] = value
    return out


class PipelineConfig:
    """Validated experiment configuration; ``data`` is the fully resolved JSON document."""

    def __init__(self, data: dict | None = None):
        merged = _merge(DEFAULTS, data or {})
        _check_types(DEFAULTS, merged, ())
        self.data = merged
        self._validate()

    @classmethod
    def from_file(cls, path, overrides=()) -> "PipelineConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = cls(data)
        if overrides:
            cfg = cfg.with_overrides(dict(parse_override(o) for o in overrides))
        return cfg

    def with_overrides(self, dotted: dict) -> "PipelineConfig":
        return PipelineConfig(_merge(self.data, _nest(dotted)))

    def _validate(self):
        d = self.data
        try:
            self.probe_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"probe: {exc}") from None
        try:
            self.refine_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth.refine: {exc}") from None
        try:
            self.arch_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train.arch: {exc}") from None
        try:
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None
        if d["synth"]["mode"] not in ("pair", "light", "dark"):
            raise ConfigError("synth.mode: expected pair, light or dark")
        if d["synth"]["n_accepted"] < 1:
            raise ConfigError("synth.n_accepted: must be >= 1")
        if d["synth"]["epsilon"] <= 0:
            raise ConfigError("synth.epsilon: must be positive")
        if d["eval"]["heldout_count"] < 0 or d["eval"]["n_thresholds"] < 1:
            raise ConfigError("eval: heldout_count must be >= 0 and n_thresholds >= 1")
        for i, ds in enumerate(d["eval"]["datasets"]):
            if not isinstance(ds, dict) or not isinstance(ds.get("path"), str):
                raise ConfigError(f"eval.datasets[{i}]: expected an object with a 'path'")
            extra = set(ds) - {"name", "path", "center_crop"}
            if extra:
                raise ConfigError(f"eval.datasets[{i}]: unknown fields {sorted(extra)}")
        for i, sw in enumerate(d["ablate"]["sweeps"]):
            if not isinstance(sw, dict) or set(sw) != {"axis", "values"}:
                raise ConfigError(f"ablate.sweeps[{i}]: expected {{'axis', 'values'}}")
            if sw["axis"] not in ("lambda", "epsilon", "direction_mode") or not sw["values"]:
                raise ConfigError(f"ablate.sweeps[{i}]: bad axis or empty values")
        try:
            self.generator()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"generator: {exc}") from None

    # -- typed views ------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def output_root(self) -> Path:
        return Path(self.data["output_root"])

    def stage_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    def generator(self) -> Generator:
        return build_generator(self.data["generator"])

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(**self.data["probe"], seed=self.stage_seed("probe"))

    def refine_config(self) -> RefineConfig:
        return RefineConfig(**self.data["synth"]["refine"])

    def arch_config(self) -> SegArchConfig:
        return SegArchConfig(**self.data["train"]["arch"])

    def train_config(self) -> TrainConfig:
        block = {k: v for k, v in self.data["train"].items() if k != "arch"}
        return TrainConfig(**block, seed=self.stage_seed("train"))

    def hash(self) -> str:
        return digest({k: v for k, v in self.data.items() if k != "output_root"})

    def dump(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True)


# -- layout and stage keys --------------------------------------------------

class Layout:
    def __init__(self, root):
        self.root = Path(root)

    directions = property(lambda self: self.root / "directions")
    dataset = property(lambda self: self.root / "dataset")
    checkpoints = property(lambda self: self.root / "checkpoints")
    reports = property(lambda self: self.root / "reports")
    plots = property(lambda self: self.root / "plots")
    heldout = property(lambda self: self.root / "heldout")

    def direction(self, polarity):
        return self.directions / f"{polarity}.json"

    @property
    def manifest(self):
        return self.dataset / "manifest.json"

    @property
    def checkpoint(self):
        return self.checkpoints / "segnet.ckpt"

    def eval_report(self, name):
        return self.reports / f"eval_{name}.json"

    @property
    def summary(self):
        return self.reports / "summary.txt"


def stage_keys(cfg: PipelineConfig, gen: Generator) -> dict:
    d = cfg.data
    keys = {"probe": digest({"generator": gen.config(), "probe": asdict(cfg.probe_config())})}
    keys["synth"] = digest({"probe": keys["probe"], "synth": d["synth"], "seed": cfg.stage_seed("synth")})
    keys["train"] = digest({"synth": keys["synth"], "train": d["train"],
                            "init": cfg.stage_seed("init"), "seed": cfg.stage_seed("train")})
    keys["heldout"] = digest({"generator": gen.config(), "count": d["eval"]["heldout_count"],
                              "seed": cfg.stage_seed("heldout")})
    keys["eval"] = digest({"train": keys["train"], "heldout": keys["heldout"], "eval": d["eval"]})
    return keys


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    tmp.replace(path)


def recorded_hash(path):
    """The ``config_hash`` an artifact embeds, or None if it is absent or unreadable."""
    path = Path(path)
    try:
        if path.suffix == ".ckpt":
            return load_checkpoint(path).meta.get("config_hash")
        d = read_json(path)
        return d.get("config_hash") or d.get("meta", {}).get("config_hash")
    except (OSError, ValueError, KeyError):
        return None


def heldout_latents(gen: Generator, count: int, seed: int):
    return draw_latents(gen.spec, count, np.random.default_rng(seed))


# -- stages -------------------------------------------------------------------

def run_probe(gen, cfg: PipelineConfig, layout: Layout, key: str) -> DirectionPair:
    pcfg = cfg.probe_config()
    pair = find_direction_pair(gen, pcfg)
    layout.directions.mkdir(parents=True, exist_ok=True)
    save_direction(layout.direction("light"), pair.v_light, gen, pcfg, key)
    save_direction(layout.direction("dark"), pair.v_dark, gen, pcfg, key)
    return pair


def load_pair(layout: Layout) -> DirectionPair:
    light, _ = load_direction(layout.direction("light"))
    dark, _ = load_direction(layout.direction("dark"))
    return DirectionPair(light, dark)


def select_directions(pair: DirectionPair, mode: str):
    return {"pair": pair, "light": pair.v_light, "dark": pair.v_dark}[mode]


def run_synth(gen, cfg: PipelineConfig, layout: Layout, pair: DirectionPair, keys: dict,
              workers: int = 1) -> DatasetManifest:
    if layout.dataset.exists():
        shutil.rmtree(layout.dataset)
    s = cfg.data["synth"]
    return synthesize_dataset(
        gen, select_directions(pair, s["mode"]), s["epsilon"], s["n_accepted"],
        cfg.refine_config(), cfg.stage_seed("synth"), layout.dataset, workers=workers,
        extra_meta={"config_hash": keys["synth"], "directions_hash": keys["probe"]},
    )


def run_train(cfg: PipelineConfig, layout: Layout, manifest: DatasetManifest, keys: dict):
    h, w = manifest.data["resolution"]
    model = init_model(cfg.arch_config(), cfg.stage_seed("init"), (h, w))
    ckpt = train(model, manifest, cfg.train_config())
    ckpt.meta.update(config_hash=keys["train"], dataset_hash=manifest.data["config_hash"],
                     init_seed=cfg.stage_seed("init"))
    layout.checkpoints.mkdir(parents=True, exist_ok=True)
    save_checkpoint(layout.checkpoint, ckpt)
    return model


def ensure_heldout(gen, cfg: PipelineConfig, layout: Layout, key: str) -> EvalDataset | None:
    """The toy held-out set (rendered once and reused); None for generators without an oracle."""
    count = cfg.data["eval"]["heldout_count"]
    if not isinstance(gen, ToyCompositor) or count == 0:
        return None
    meta = layout.heldout / "heldout.json"
    if meta.exists() and recorded_hash(meta) == key:
        return load_dataset(layout.heldout, "toy-heldout")
    if layout.heldout.exists():
        shutil.rmtree(layout.heldout)
    ds = write_toy_heldout(gen, count, cfg.stage_seed("heldout"), layout.heldout)
    write_json(meta, {"config_hash": key, "count": count, "seed": cfg.stage_seed("heldout"),
                      "generator_fingerprint": gen.fingerprint()})
    return ds


def eval_datasets(cfg: PipelineConfig) -> list[EvalDataset]:
    out = []
    for ds in cfg.data["eval"]["datasets"]:
        out.append(load_dataset(ds["path"], ds.get("name"), bool(ds.get("center_crop", False))))
    return out


def run_eval(model, cfg: PipelineConfig, datasets, keys: dict, workers: int = 1) -> list[MetricsReport]:
    reports = []
    for ds in datasets:
        rep = evaluate(model, ds, cfg.data["eval"]["n_thresholds"], workers=workers)
        rep.meta = {"config_hash": keys["eval"], "checkpoint_hash": keys["train"]}
        reports.append(rep)
    return reports


def toy_mask_iou(gen, directions, epsilon: float, values, labels=None) -> float:
    """Mean IoU of extracted masks against the compositor's oracle masks."""
    masks = mask_deltas(gen, values, labels, directions, epsilon) > 0
    oracle = toy_oracle_masks(gen, values, labels)
    return float(np.mean([iou(m, o) for m, o in zip(masks, oracle)]))


# -- runner used by sweeps ------------------------------------------------------

class Runner:
    """Runs pipeline cells with stage outputs cached by config hash.

    Cached stages live under ``<root>/ablate/store``; a stage whose artifact in
    the main layout under ``root`` already carries the right hash is reused
    from there instead.
    """

    def __init__(self, cfg: PipelineConfig, root, workers: int = 1, generator: Generator | None = None):
        self.cfg = cfg
        self.main = Layout(root)
        self.store = Path(root) / "ablate" / "store"
        self.workers = workers
        self.gen = generator if generator is not None else cfg.generator()

    def _cell_config(self, axis, value) -> PipelineConfig:
        if axis == "lambda":
            return self.cfg.with_overrides({"probe.lambda_edge": value})
        if axis == "epsilon":
            return self.cfg.with_overrides({"probe.epsilon": value, "synth.epsilon": value})
        return self.cfg.with_overrides({"synth.mode": value})

    def _layout(self, stage, key, main_artifact):
        if main_artifact.exists() and recorded_hash(main_artifact) == key:
            return self.main, True
        lay = Layout(self.store / f"{stage}-{key[:16]}")
        return lay, False

    def pair(self, cfg, keys) -> DirectionPair:
        lay, hit = self._layout("probe", keys["probe"], self.main.direction("dark"))
        if not hit and recorded_hash(lay.direction("dark")) != keys["probe"]:
            log.info("probe %s", keys["probe"][:12])
            run_probe(self.gen, cfg, lay, keys["probe"])
        return load_pair(lay)

    def model(self, cfg, keys):
        lay, hit = self._layout("train", keys["train"], self.main.checkpoint)
        if not hit and recorded_hash(lay.checkpoint) != keys["train"]:
            pair = self.pair(cfg, keys)
            dlay, dhit = self._layout("synth", keys["synth"], self.main.manifest)
            if not dhit and recorded_hash(dlay.manifest) != keys["synth"]:
                log.info("synth %s", keys["synth"][:12])
                run_synth(self.gen, cfg, dlay, pair, keys, self.workers)
            log.info("train %s", keys["train"][:12])
            run_train(cfg, lay, DatasetManifest.load(dlay.dataset), keys)
        ckpt = load_checkpoint(lay.checkpoint)
        return model_from_checkpoint(ckpt), DatasetManifest.load(self._synth_root(keys))

    def _synth_root(self, keys):
        lay, _ = self._layout("synth", keys["synth"], self.main.manifest)
        return lay.dataset

    def heldout(self, cfg, keys):
        ds = ensure_heldout(self.gen, cfg, self.main, keys["heldout"])
        if ds is None:
            raise ValueError("sweeps need a generator with an oracle and eval.heldout_count > 0")
        return ds

    def sweep_cell(self, axis, value) -> dict:
        if axis == "direction_mode" and value == "ensemble":
            members = [self._cell_config(axis, m) for m in ("light", "dark")]
            models = []
            for mcfg in members:
                keys = stage_keys(mcfg, self.gen)
                models.append(self.model(mcfg, keys)[0])
            predictor = models
            cfg = members[0]
            keys = stage_keys(cfg, self.gen)
            row = {"mask_iou": None, "acceptance_rate": None}
        else:
            cfg = self._cell_config(axis, value)
            keys = stage_keys(cfg, self.gen)
            predictor, manifest = self.model(cfg, keys)
            row = {"acceptance_rate": manifest.acceptance_rate}
        pair = self.pair(cfg, keys)
        ds = self.heldout(cfg, keys)
        rep = evaluate(predictor, ds, cfg.data["eval"]["n_thresholds"], workers=self.workers)
        if "mask_iou" not in row:
            vals, labs = heldout_latents(self.gen, len(ds), cfg.stage_seed("heldout"))
            row["mask_iou"] = toy_mask_iou(self.gen, select_directions(pair, cfg.data["synth"]["mode"]),
                                           cfg.data["synth"]["epsilon"], vals, labs)
        row.update({k: rep.aggregate[k] for k in ("acc", "iou", "f_beta", "max_f_beta")})
        row["dot"] = pair.dot
        return row

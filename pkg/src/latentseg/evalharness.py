"""Segmentation metrics, benchmark folders, dataset evaluation and ablation sweeps."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .masksynth import uint8_to_image, write_pair
from .segnet import SegModel, ensemble_predict, predict

log = logging.getLogger(__name__)

REPORT_SCHEMA = "latentseg.report/1"
SWEEP_SCHEMA = "latentseg.sweep/1"
BETA_SQ = 0.3
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


# -- metrics --------------------------------------------------------------

def _pair(pred, gt):
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def pixel_accuracy(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return int(np.count_nonzero(pred == gt)) / pred.size


def iou(pred, gt) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    pred, gt = _pair(pred, gt)
    union = int(np.count_nonzero(pred | gt))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(pred & gt)) / union


def f_from_counts(tp, pp, g, beta_sq: float = BETA_SQ):
    """F-beta from true positives, predicted positives and gt positives.

    Works elementwise on arrays. Both masks empty scores 1; an empty
    prediction has precision 0 and an empty gt has recall 0.
    """
    tp, pp, g = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (tp, pp, g)))
    precision = np.divide(tp, pp, out=np.zeros_like(tp), where=pp > 0)
    recall = np.divide(tp, g, out=np.zeros_like(tp), where=g > 0)
    den = beta_sq * precision + recall
    num = (1.0 + beta_sq) * precision * recall
    f = np.divide(num, den, out=np.zeros_like(tp), where=den > 0)
    return np.where((pp == 0) & (g == 0), 1.0, f)


def f_beta(pred, gt, beta_sq: float = BETA_SQ) -> float:
    pred, gt = _pair(pred, gt)
    tp = np.count_nonzero(pred & gt)
    return float(f_from_counts(tp, np.count_nonzero(pred), np.count_nonzero(gt), beta_sq))


def thresholds(n: int) -> np.ndarray:
    """``k / (n + 1)`` for ``k = 1..n``."""
    if n < 1:
        raise ValueError("need at least one threshold")
    return np.arange(1, n + 1) / (n + 1)


def threshold_counts(soft, gt, ts):
    """Per-threshold predicted positives and true positives for ``soft >= t``."""
    soft = np.asarray(soft, dtype=np.float64)
    gt = np.asarray(gt) > 0
    if soft.shape != gt.shape:
        raise ValueError(f"soft mask {soft.shape} and ground truth {gt.shape} differ in shape")
    every = np.sort(soft, axis=None)
    fg = np.sort(soft[gt], axis=None)
    pp = every.size - np.searchsorted(every, ts, side="left")
    tp = fg.size - np.searchsorted(fg, ts, side="left")
    return tp, pp, fg.size


def max_f_beta(preds, gts, n_thresholds: int = 255, beta_sq: float = BETA_SQ) -> float:
    """Best dataset-mean F-beta over the uniform threshold grid ``k / (n + 1)``."""
    return float(f_beta_curve(preds, gts, n_thresholds, beta_sq).max())


def f_beta_curve(preds, gts, n_thresholds: int = 255, beta_sq: float = BETA_SQ) -> np.ndarray:
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError("need equally many (at least one) soft masks and ground truths")
    ts = thresholds(n_thresholds)
    per_image = np.empty((len(preds), ts.size))
    for i, (p, g) in enumerate(zip(preds, gts)):
        per_image[i] = f_from_counts(*threshold_counts(p, g, ts), beta_sq)
    return np.array([math.fsum(col) / len(preds) for col in per_image.T])


# -- datasets -------------------------------------------------------------

def _by_stem(folder: Path) -> dict:
    found = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in found:
                raise ValueError(f"{folder}: duplicate stem {p.stem!r}")
            found[p.stem] = p
    return found


def center_square(arr: np.ndarray) -> np.ndarray:
    """Largest centred square of an ``(H, W, ...)`` array."""
    h, w = arr.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return arr[top:top + side, left:left + side]


@dataclass
class EvalDataset:
    name: str
    items: list
    center_crop: bool
    native_resolutions: list

    def __len__(self):
        return len(self.items)

    @property
    def stems(self) -> list[str]:
        return [Path(ip).stem for ip, _ in self.items]

    def load(self, index: int):
        """``(image, mask)``: ``(3, h, w)`` floats in [-1, 1] and an ``(h, w)`` {0, 1} mask."""
        ip, mp = self.items[index]
        with PILImage.open(ip) as im:
            img = np.asarray(im.convert("RGB"))
        with PILImage.open(mp) as im:
            mask = (np.asarray(im.convert("L"), dtype=np.float64) > 127.5).astype(np.uint8)
        if self.center_crop:
            img, mask = center_square(img), center_square(mask)
        return uint8_to_image(img), mask


def load_dataset(root, name: str | None = None, center_crop: bool = False) -> EvalDataset:
    """Pair ``root/images/*`` with ``root/masks/*`` by filename stem."""
    root = Path(root)
    if not (root / "images").is_dir() or not (root / "masks").is_dir():
        raise FileNotFoundError(f"{root}: expected images/ and masks/ subfolders")
    images, masks = _by_stem(root / "images"), _by_stem(root / "masks")
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise ValueError(f"{root}: unmatched stems {unmatched[:10]}")
    items, sizes = [], []
    for stem in sorted(images):
        try:
            with PILImage.open(images[stem]) as im:
                w, h = im.size
            with PILImage.open(masks[stem]) as im:
                im.verify()
        except OSError as exc:
            raise OSError(f"{root}: cannot read {stem}: {exc}") from exc
        items.append((images[stem], masks[stem]))
        sizes.append((h, w))
    return EvalDataset(name or root.name, items, center_crop, sizes)


def write_toy_heldout(gen, count: int, seed: int, out_path) -> EvalDataset:
    """Render ``count`` toy images with their oracle masks in the benchmark layout."""
    from .generator import draw_latents, toy_oracle_masks

    root = Path(out_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    values, labels = draw_latents(gen.spec, count, np.random.default_rng(seed))
    images = gen.forward(values, labels)
    masks = toy_oracle_masks(gen, values, labels)
    for i in range(count):
        write_pair(root, i, images[i], masks[i])
    return load_dataset(root, "toy-heldout")


# -- evaluation -----------------------------------------------------------

@dataclass
class MetricsReport:
    name: str
    stems: list
    per_image: dict
    aggregate: dict
    config: dict
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"schema": REPORT_SCHEMA, "dataset": self.name, "stems": self.stems,
                "per_image": self.per_image, "aggregate": self.aggregate,
                "config": self.config, "meta": self.meta}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"{path}: not a metrics report")
        return cls(d["dataset"], d["stems"], d["per_image"], d["aggregate"], d["config"], d["meta"])


def _predictor(model):
    if isinstance(model, SegModel):
        return lambda img: predict(model, img)
    if isinstance(model, (list, tuple)):
        return lambda img: ensemble_predict(list(model), img)
    if callable(model):
        return model
    raise TypeError("expected a SegModel, a list of them, or a callable")


def evaluate(model, dataset: EvalDataset, n_thresholds: int = 255, beta_sq: float = BETA_SQ,
             workers: int = 1) -> MetricsReport:
    """Score a model, an ensemble (list of models) or an ``image -> soft mask`` callable."""
    if len(dataset) == 0:
        raise ValueError(f"dataset {dataset.name!r} is empty")
    fn = _predictor(model)

    def one(i):
        image, gt = dataset.load(i)
        if image.shape[-2:] != gt.shape:
            raise ValueError(f"{dataset.stems[i]}: image {image.shape[-2:]} and mask {gt.shape} differ")
        soft = np.asarray(fn(image), dtype=np.float64)
        if soft.shape != gt.shape:
            raise ValueError(f"{dataset.stems[i]}: prediction {soft.shape} vs mask {gt.shape}")
        hard = soft >= 0.5
        return soft, gt, (pixel_accuracy(hard, gt), iou(hard, gt), f_beta(hard, gt, beta_sq))

    idx = range(len(dataset))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, idx))
    else:
        rows = [one(i) for i in idx]
    softs = [r[0] for r in rows]
    gts = [r[1] for r in rows]
    per_image = {k: [r[2][j] for r in rows] for j, k in enumerate(("acc", "iou", "f_beta"))}
    n = len(rows)
    aggregate = {k: math.fsum(v) / n for k, v in per_image.items()}
    aggregate["max_f_beta"] = max_f_beta(softs, gts, n_thresholds, beta_sq)
    config = {"n_thresholds": n_thresholds, "beta_sq": beta_sq, "threshold": 0.5,
              "center_crop": dataset.center_crop}
    return MetricsReport(dataset.name, dataset.stems, per_image, aggregate, config)


# -- ablation sweeps ------------------------------------------------------

SWEEP_AXES = ("lambda", "epsilon", "direction_mode")
DIRECTION_MODES = ("light", "dark", "pair", "ensemble")


def ablation_sweep(gen, axis: str, values, base_config, seed: int | None = None, out_root=None,
                   workers: int = 1, plot: bool = True) -> dict:
    """Run the full pipeline once per ``values`` entry and tabulate held-out Acc and IoU.

    ``base_config`` is a ``PipelineConfig``; ``gen`` overrides its generator
    when given. Stage outputs are cached by configuration key under
    ``out_root``, so cells that share a stage (for example the probe in a
    direction-mode sweep) compute it once. A failing cell is recorded with its
    error and the sweep carries on.
    """
    from . import pipeline

    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ValueError("values must be nonempty")
    if axis == "direction_mode" and set(values) - set(DIRECTION_MODES):
        raise ValueError(f"direction modes must be among {DIRECTION_MODES}")
    cfg = base_config if seed is None else base_config.with_overrides({"seed": seed})
    root = Path(out_root if out_root is not None else cfg.output_root)
    runner = pipeline.Runner(cfg, root, workers=workers, generator=gen)
    rows = []
    for value in values:
        row = {"value": value}
        try:
            row.update(runner.sweep_cell(axis, value))
            row["status"] = "ok"
        except Exception as exc:  # a failed cell must not abort the sweep
            log.exception("sweep cell %s=%r failed", axis, value)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    table = {"schema": SWEEP_SCHEMA, "axis": axis, "seed": cfg.seed, "rows": rows,
             "config_hash": cfg.hash()}
    reports = root / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    with open(reports / f"ablation_{axis}.json", "w") as fh:
        json.dump(table, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if plot:
        plot_sweep(table, root / "plots" / f"ablation_{axis}.png")
    return table


def plot_sweep(table: dict, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r for r in table["rows"] if r["status"] == "ok"]
    labels = [str(r["value"]) for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key, style in (("acc", "o-"), ("iou", "s-")):
        ax.plot(x, [r[key] for r in rows], style, label=key)
    ax.set_xticks(x, labels)
    ax.set_xlabel(table["axis"])
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)

"""Mask extraction from direction-shifted renderings and synthetic dataset writing."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .generator import Generator, LatentCode, indexed_latent
from .probe import Direction, DirectionPair

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "latentseg.manifest/1"


class SynthesisError(RuntimeError):
    """Too few samples survived refinement within the attempt budget."""


@dataclass(frozen=True)
class RefineConfig:
    max_area_fraction: float = 0.5
    min_mean_abs_change: float = 0.02
    min_component_fraction: float = 0.001
    connectivity: int = 4

    def __post_init__(self):
        if not 0 < self.max_area_fraction <= 1:
            raise ValueError("max_area_fraction must lie in (0, 1]")
        if self.min_mean_abs_change < 0:
            raise ValueError("min_mean_abs_change must be non-negative")
        if not 0 <= self.min_component_fraction < 1:
            raise ValueError("min_component_fraction must lie in [0, 1)")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass
class MaskedSample:
    image: np.ndarray
    mask: np.ndarray
    latent: LatentCode
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape[-2:] != self.mask.shape:
            raise ValueError("image and mask shapes disagree")


@dataclass(frozen=True)
class Rejection:
    reason: str  # "area" or "low-contrast"
    value: float


def _labels_of(z):
    return None if z.class_label is None else np.array([z.class_label])


def mask_deltas(gen: Generator, values: np.ndarray, labels, directions, epsilon: float,
                base: np.ndarray | None = None) -> np.ndarray:
    """Channel-mean brightness difference used for the mask, shape ``(N, H, W)``.

    Pair: ``G(z + eps v_l) - G(z + eps v_d)``; single light:
    ``G(z + eps v_l) - G(z)``; single dark: ``G(z) - G(z + eps v_d)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(directions, DirectionPair):
        lit = gen.forward(values + epsilon * directions.v_light.values, labels)
        drk = gen.forward(values + epsilon * directions.v_dark.values, labels)
        return (lit - drk).mean(axis=1)
    if not isinstance(directions, Direction):
        raise TypeError("directions must be a Direction or DirectionPair")
    if base is None:
        base = gen.forward(values, labels)
    shifted = gen.forward(values + epsilon * directions.values, labels)
    if directions.polarity == "light":
        return (shifted - base).mean(axis=1)
    return (base - shifted).mean(axis=1)


def extract_mask(gen: Generator, z: LatentCode, directions, epsilon: float):
    """Return ``(mask, delta)``; foreground where delta > 0, ties go to background."""
    delta = mask_deltas(gen, z.values[None], _labels_of(z), directions, epsilon)[0]
    return (delta > 0).astype(np.uint8), delta


def _structure(connectivity: int):
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def remove_small_components(mask: np.ndarray, min_fraction: float, connectivity: int = 4) -> np.ndarray:
    """Drop foreground components with fewer than ``min_fraction * H * W`` pixels."""
    if not 0 <= min_fraction < 1:
        raise ValueError("min_fraction must lie in [0, 1)")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask)
    labels, count = ndimage.label(mask > 0, structure=_structure(connectivity))
    if count == 0:
        return mask.astype(np.uint8)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_fraction * mask.size
    keep[0] = False
    return keep[labels].astype(np.uint8)


def refine(sample: MaskedSample, delta: np.ndarray, cfg: RefineConfig):
    """Apply the area, contrast and small-component filters in that order.

    Returns the cleaned sample, or a ``Rejection`` naming the filter that fired.
    """
    if delta.shape != sample.mask.shape:
        raise ValueError("delta and mask shapes disagree")
    area = float(sample.mask.mean())
    if area > cfg.max_area_fraction:
        return Rejection("area", area)
    change = float(np.abs(delta).mean())
    if change < cfg.min_mean_abs_change:
        return Rejection("low-contrast", change)
    cleaned = remove_small_components(sample.mask, cfg.min_component_fraction, cfg.connectivity)
    meta = dict(sample.meta, area_fraction=float(cleaned.mean()), mean_abs_change=change,
                removed_pixels=int(sample.mask.sum() - cleaned.sum()))
    return MaskedSample(sample.image, cleaned, sample.latent, meta)


# -- persistence ----------------------------------------------------------

def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` in [-1, 1] to ``(H, W, 3)`` uint8."""
    scaled = np.clip((np.asarray(image) + 1.0) * 127.5, 0, 255)
    return np.rint(scaled).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_image(arr: np.ndarray) -> np.ndarray:
    """``(H, W, 3)`` uint8 to ``(3, H, W)`` float in [-1, 1]."""
    return np.asarray(arr, dtype=np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def write_pair(root: Path, index: int, image: np.ndarray, mask: np.ndarray):
    name = f"{index:06d}.png"
    PILImage.fromarray(image_to_uint8(image), mode="RGB").save(root / "images" / name)
    PILImage.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(root / "masks" / name)


def direction_summary(directions) -> list[dict]:
    members = ([directions.v_light, directions.v_dark]
               if isinstance(directions, DirectionPair) else [directions])
    return [{"polarity": d.polarity, "fingerprint": d.fingerprint()} for d in members]


@dataclass
class DatasetManifest:
    root: Path
    data: dict

    @property
    def count(self) -> int:
        return self.data["counts"]["accepted"]

    @property
    def acceptance_rate(self) -> float:
        return self.data["acceptance_rate"]

    def pairs(self):
        for i in range(self.count):
            name = f"{i:06d}.png"
            yield self.root / "images" / name, self.root / "masks" / name

    def load_arrays(self):
        """All samples as ``(N, 3, H, W)`` float32 images and ``(N, H, W)`` uint8 masks."""
        images, masks = [], []
        for ip, mp in self.pairs():
            images.append(uint8_to_image(np.asarray(PILImage.open(ip).convert("RGB"))))
            masks.append((np.asarray(PILImage.open(mp)) > 127).astype(np.uint8))
        return np.stack(images).astype(np.float32), np.stack(masks)

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        with open(root / "manifest.json") as fh:
            data = json.load(fh)
        if data.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"{root}: not a dataset manifest")
        return cls(root, data)


def _attempt(gen, directions, epsilon, cfg, seed, index):
    z = indexed_latent(gen.spec, seed, index)
    labels = _labels_of(z)
    image = gen.forward(z.values[None], labels)
    delta = mask_deltas(gen, z.values[None], labels, directions, epsilon, base=image)[0]
    sample = MaskedSample(image[0], (delta > 0).astype(np.uint8), z, {"index": index})
    return refine(sample, delta, cfg)


def synthesize_dataset(gen: Generator, directions, probe_epsilon: float, n_accepted: int,
                       cfg: RefineConfig, seed: int, out_path, workers: int = 1,
                       extra_meta: dict | None = None) -> DatasetManifest:
    """Draw codes, extract and refine masks, and write the first ``n_accepted`` survivors.

    Code ``i`` comes from the stream keyed by ``(seed, i)`` and candidates are
    accepted in index order, so the result does not depend on ``workers``.
    """
    if n_accepted < 1:
        raise ValueError("n_accepted must be >= 1")
    root = Path(out_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    budget = 10 * n_accepted
    chunk = max(1, 4 * workers)
    accepted = 0
    attempts = 0
    rejections = {"area": 0, "low-contrast": 0}
    removed = 0
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while accepted < n_accepted and attempts < budget:
            idx = range(attempts, min(attempts + chunk, budget))
            if pool is None:
                results = [_attempt(gen, directions, probe_epsilon, cfg, seed, i) for i in idx]
            else:
                results = list(pool.map(
                    lambda i: _attempt(gen, directions, probe_epsilon, cfg, seed, i), idx))
            for res in results:
                if accepted == n_accepted:
                    break
                attempts += 1
                if isinstance(res, Rejection):
                    rejections[res.reason] += 1
                    continue
                write_pair(root, accepted, res.image, res.mask)
                removed += res.meta["removed_pixels"]
                accepted += 1
    finally:
        if pool is not None:
            pool.shutdown()
    rate = accepted / attempts
    if accepted < n_accepted:
        raise SynthesisError(
            f"only {accepted}/{n_accepted} samples accepted after {attempts} attempts "
            f"(acceptance rate {rate:.4f}, rejections {rejections})"
        )
    data = {
        "schema": MANIFEST_SCHEMA,
        "generator": gen.config(),
        "generator_fingerprint": gen.fingerprint(),
        "directions": direction_summary(directions),
        "mode": "pair" if isinstance(directions, DirectionPair) else directions.polarity,
        "epsilon": probe_epsilon,
        "refine": asdict(cfg),
        "seed": seed,
        "counts": {"accepted": accepted, "attempted": attempts, "rejected": rejections,
                   "removed_component_pixels": removed},
        "acceptance_rate": rate,
        "resolution": [gen.spec.height, gen.spec.width],
    }
    data.update(extra_meta or {})
    tmp = root / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, root / "manifest.json")
    log.info("wrote %d samples to %s (acceptance %.3f)", accepted, root, rate)
    return DatasetManifest(root, data)

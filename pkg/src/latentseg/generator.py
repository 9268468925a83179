"""Generators: latent sampling, the toy compositor and the adapter registry.

A generator maps a batch of latent codes ``(N, D)`` (plus optional class
labels) to images ``(N, 3, H, W)`` in ``[-1, 1]``. Generators running in
``analytic`` gradient mode also expose a vector-Jacobian product.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

TOY_GENERATOR_ID = "toy-compositor-v1"

GRADIENT_MODES = ("analytic", "finite_difference")


@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int
    height: int
    width: int
    channels: int = 3
    value_range: tuple[float, float] = (-1.0, 1.0)
    conditional: bool = False
    num_classes: int = 0
    gradient_mode: str = "analytic"

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ValueError(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"height and width must be >= 8, got {self.height}x{self.width}")
        if self.channels != 3:
            raise ValueError(f"channels must be 3, got {self.channels}")
        if self.conditional and self.num_classes < 2:
            raise ValueError("conditional generators need num_classes >= 2")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray
    class_label: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


def stack_latents(codes: Sequence[LatentCode]) -> tuple[np.ndarray, np.ndarray | None]:
    """Turn a list of codes into a ``(N, D)`` value array and a label array."""
    if len(codes) == 0:
        raise ValueError("empty latent batch")
    values = np.stack([c.values for c in codes])
    labels = [c.class_label for c in codes]
    if all(lab is None for lab in labels):
        return values, None
    if any(lab is None for lab in labels):
        raise ValueError("batch mixes labelled and unlabelled codes")
    return values, np.asarray(labels, dtype=np.int64)


def draw_latents(spec: GeneratorSpec, count: int, rng: np.random.Generator):
    """Draw ``count`` codes from ``rng`` as arrays (values, labels or None)."""
    values = rng.standard_normal((count, spec.latent_dim))
    labels = rng.integers(0, spec.num_classes, size=count) if spec.conditional else None
    return values, labels


def sample_latent(spec: GeneratorSpec, count: int, seed: int) -> list[LatentCode]:
    """Sample i.i.d. standard normal codes, with uniform labels if conditional."""
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    values, labels = draw_latents(spec, count, np.random.default_rng(seed))
    if labels is None:
        return [LatentCode(v) for v in values]
    return [LatentCode(v, int(lab)) for v, lab in zip(values, labels)]


def indexed_latent(spec: GeneratorSpec, seed: int, index: int) -> LatentCode:
    """Code number ``index`` of the stream keyed by ``seed``.

    Each index gets its own generator so parallel producers stay reproducible.
    """
    values, labels = draw_latents(spec, 1, np.random.default_rng([seed, index]))
    return LatentCode(values[0], None if labels is None else int(labels[0]))


class Generator:
    """Base class for in-process generators.

    Subclasses implement ``forward`` and, in analytic mode, ``vjp``.
    """

    spec: GeneratorSpec
    generator_id: str = "generic"

    def forward(self, values: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, values: np.ndarray, labels: np.ndarray | None, cotangent: np.ndarray) -> np.ndarray:
        """Return ``J(z_i)^T cotangent_i`` for every sample, shape ``(N, D)``."""
        raise NotImplementedError(f"{type(self).__name__} has no analytic gradients")

    def config(self) -> dict:
        return {"id": self.generator_id, "params": {}}

    def fingerprint(self) -> str:
        blob = json.dumps(self.config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check_batch(self, values: np.ndarray, labels: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.spec.latent_dim:
            raise ValueError(
                f"latent batch has shape {values.shape}, expected (N, {self.spec.latent_dim})"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("latent code contains non-finite entries")
        if self.spec.conditional:
            if labels is None:
                raise ValueError("conditional generator needs class labels")
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (values.shape[0],):
                raise ValueError("one class label per code is required")
            if np.any(labels < 0) or np.any(labels >= self.spec.num_classes):
                raise ValueError("class label out of range")
        elif labels is not None:
            raise ValueError("unconditional generator got class labels")
        return values, labels


def generate(gen: Generator, z: LatentCode) -> np.ndarray:
    """Render a single code as a ``(3, H, W)`` image."""
    labels = None if z.class_label is None else np.array([z.class_label])
    return gen.forward(z.values[None, :], labels)[0]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class ToyCompositorParams:
    """Parameters of the analytic compositor.

    The latent code (``D = 16``) splits into a shape block (5), foreground
    appearance (3), background appearance (3) and an entanglement block (5).
    The foreground colour mixes the foreground and entanglement blocks. The
    background level is ``-lighting_coupling`` times that mix plus
    ``background_level_gain`` times a mix of its own block; its spatial
    gradient mixes the background and entanglement blocks.

    With a nonzero ``background_level_gain`` the background can be brightened
    independently of the object, and since the radial prior has positive mass
    over the background the light probe then brightens the whole frame.
    """

    sharpness: float = 8.0
    shape_scale: float = 0.15
    radius_base: float = 0.2
    radius_span: float = 0.1
    mixing_seed: int = 0
    appearance_gain: float = 0.5
    background_level_gain: float = 0.0
    lighting_coupling: float = 0.5
    gradient_gain: float = 0.5
    height: int = 64
    width: int = 64
    num_classes: int = 0

    def __post_init__(self):
        for name in ("sharpness", "shape_scale", "radius_base", "radius_span"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.radius_base + self.radius_span >= 0.5:
            raise ValueError("radius_base + radius_span must be < 0.5")
        if not 0 <= self.lighting_coupling <= 1:
            raise ValueError("lighting_coupling must lie in [0, 1]")
        if self.num_classes == 1 or self.num_classes < 0:
            raise ValueError("num_classes must be 0 (unconditional) or >= 2")


SHAPE = slice(0, 5)
FG = slice(5, 8)
BG = slice(8, 11)
ENT = slice(11, 16)


class ToyCompositor(Generator):
    """Soft rotated ellipse composited over a shaded background.

    ``image = alpha * fg + (1 - alpha) * bg`` with
    ``alpha = sigmoid(k * (1 - q(u)))`` and ``q`` the ellipse quadratic form.
    Foreground colour is ``tanh`` of a dense mix of the foreground and
    entanglement blocks; the background is ``tanh`` of a mean level plus a
    linear spatial gradient, all mixed from the background and entanglement
    blocks.
    """

    generator_id = TOY_GENERATOR_ID
    latent_dim = 16

    def __init__(self, params: ToyCompositorParams | None = None):
        self.params = params or ToyCompositorParams()
        p = self.params
        self.spec = GeneratorSpec(
            latent_dim=self.latent_dim,
            height=p.height,
            width=p.width,
            conditional=p.num_classes > 0,
            num_classes=p.num_classes,
        )
        rng = np.random.default_rng(p.mixing_seed)
        scale = p.appearance_gain / np.sqrt(8.0)
        # rows: output channel, columns: [own block (3), entanglement (5)]
        self.fg_mix = rng.standard_normal((3, 8)) * scale
        # Lighting: the background level follows the foreground response with
        # the opposite sign; the background's own block only nudges it.
        self.bg_own = rng.standard_normal((3, 3)) * (p.background_level_gain * p.appearance_gain / np.sqrt(3.0))
        self.bg_grad_x = rng.standard_normal((3, 8)) * (p.gradient_gain / np.sqrt(8.0))
        self.bg_grad_y = rng.standard_normal((3, 8)) * (p.gradient_gain / np.sqrt(8.0))
        if p.num_classes:
            self.class_offsets = 0.5 * rng.standard_normal((p.num_classes, 3))
        else:
            self.class_offsets = None
        self.ux = (np.arange(p.width) + 0.5) / p.width
        self.uy = (np.arange(p.height) + 0.5) / p.height

    def config(self) -> dict:
        return {"id": self.generator_id, "params": asdict(self.params)}

    # -- forward pieces -------------------------------------------------
    def _shape(self, z):
        p = self.params
        tx, ty = np.tanh(z[:, 0]), np.tanh(z[:, 1])
        sa, sb = _sigmoid(z[:, 2]), _sigmoid(z[:, 3])
        tr = np.tanh(z[:, 4])
        cx = 0.5 + p.shape_scale * tx
        cy = 0.5 + p.shape_scale * ty
        a = p.radius_base + p.radius_span * sa
        b = p.radius_base + p.radius_span * sb
        theta = (np.pi / 4) * tr
        dx = self.ux[None, None, :] - cx[:, None, None]
        dy = self.uy[None, :, None] - cy[:, None, None]
        c, s = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
        pa = c * dx + s * dy
        pb = -s * dx + c * dy
        a3, b3 = a[:, None, None], b[:, None, None]
        q = (pa / a3) ** 2 + (pb / b3) ** 2
        alpha = _sigmoid(p.sharpness * (1.0 - q))
        return dict(tx=tx, ty=ty, sa=sa, sb=sb, tr=tr, a=a3, b=b3, c=c, s=s,
                    dx=dx, dy=dy, pa=pa, pb=pb, alpha=alpha)

    def _appearance(self, z, labels):
        wf = np.concatenate([z[:, FG], z[:, ENT]], axis=1)
        wb = np.concatenate([z[:, BG], z[:, ENT]], axis=1)
        fg_lin = wf @ self.fg_mix.T
        fg_pre = fg_lin if self.class_offsets is None else fg_lin + self.class_offsets[labels]
        fg = np.tanh(fg_pre)
        level = z[:, BG] @ self.bg_own.T - self.params.lighting_coupling * fg_lin
        gx = wb @ self.bg_grad_x.T
        gy = wb @ self.bg_grad_y.T
        bg_pre = (level[:, :, None, None]
                  + gx[:, :, None, None] * (self.ux - 0.5)[None, None, None, :]
                  + gy[:, :, None, None] * (self.uy - 0.5)[None, None, :, None])
        bg = np.tanh(bg_pre)
        return fg, bg

    def alpha(self, values: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
        """Soft compositing coefficient, shape ``(N, H, W)``."""
        values, labels = self.check_batch(values, labels)
        return self._shape(values)["alpha"]

    def layers(self, values, labels=None):
        """Return ``(alpha, fg, bg)`` so tests can check the decomposition."""
        values, labels = self.check_batch(values, labels)
        fg, bg = self._appearance(values, labels)
        return self._shape(values)["alpha"], fg, bg

    def forward(self, values, labels=None):
        values, labels = self.check_batch(values, labels)
        alpha = self._shape(values)["alpha"][:, None]
        fg, bg = self._appearance(values, labels)
        return alpha * fg[:, :, None, None] + (1.0 - alpha) * bg

    def vjp(self, values, labels, cotangent):
        values, labels = self.check_batch(values, labels)
        p = self.params
        n = values.shape[0]
        g = np.asarray(cotangent, dtype=np.float64)
        if g.shape != (n, 3, p.height, p.width):
            raise ValueError(f"cotangent shape {g.shape} does not match images")
        sh = self._shape(values)
        fg, bg = self._appearance(values, labels)
        alpha = sh["alpha"]
        grad = np.zeros_like(values)

        # image = alpha * fg + (1 - alpha) * bg
        g_alpha = np.einsum("nchw,nchw->nhw", g, fg[:, :, None, None] - bg)
        g_fg = np.einsum("nchw,nhw->nc", g, alpha)
        g_bg_pre = g * (1.0 - alpha[:, None]) * (1.0 - bg ** 2)

        ux = (self.ux - 0.5)[None, None, None, :]
        uy = (self.uy - 0.5)[None, None, :, None]
        g_level = g_bg_pre.sum(axis=(2, 3))
        g_gx = (g_bg_pre * ux).sum(axis=(2, 3))
        g_gy = (g_bg_pre * uy).sum(axis=(2, 3))
        g_wb = g_gx @ self.bg_grad_x + g_gy @ self.bg_grad_y
        g_wf = (g_fg * (1.0 - fg ** 2) - p.lighting_coupling * g_level) @ self.fg_mix
        grad[:, BG] += g_level @ self.bg_own
        grad[:, FG] += g_wf[:, :3]
        grad[:, ENT] += g_wf[:, 3:]
        grad[:, BG] += g_wb[:, :3]
        grad[:, ENT] += g_wb[:, 3:]

        # alpha = sigmoid(k (1 - q))
        g_q = -p.sharpness * g_alpha * alpha * (1.0 - alpha)
        a, b, pa, pb = sh["a"], sh["b"], sh["pa"], sh["pb"]
        g_pa = g_q * 2.0 * pa / a ** 2
        g_pb = g_q * 2.0 * pb / b ** 2
        g_a = (g_q * (-2.0) * pa ** 2 / a ** 3).sum(axis=(1, 2))
        g_b = (g_q * (-2.0) * pb ** 2 / b ** 3).sum(axis=(1, 2))
        c, s, dx, dy = sh["c"], sh["s"], sh["dx"], sh["dy"]
        g_dx = g_pa * c - g_pb * s
        g_dy = g_pa * s + g_pb * c
        # d pa / d theta = pb, d pb / d theta = -pa
        g_theta = (g_pa * pb - g_pb * pa).sum(axis=(1, 2))
        g_cx = -g_dx.sum(axis=(1, 2))
        g_cy = -g_dy.sum(axis=(1, 2))

        grad[:, 0] += g_cx * p.shape_scale * (1.0 - sh["tx"] ** 2)
        grad[:, 1] += g_cy * p.shape_scale * (1.0 - sh["ty"] ** 2)
        grad[:, 2] += g_a * p.radius_span * sh["sa"] * (1.0 - sh["sa"])
        grad[:, 3] += g_b * p.radius_span * sh["sb"] * (1.0 - sh["sb"])
        grad[:, 4] += g_theta * (np.pi / 4) * (1.0 - sh["tr"] ** 2)
        return grad


def toy_oracle_mask(gen: Generator, z: LatentCode) -> np.ndarray:
    """Exact foreground of a toy image: ``alpha >= 0.5`` as a uint8 mask."""
    if not isinstance(gen, ToyCompositor):
        raise TypeError("oracle masks are only available for the toy compositor")
    labels = None if z.class_label is None else np.array([z.class_label])
    return (gen.alpha(z.values[None], labels)[0] >= 0.5).astype(np.uint8)


def toy_oracle_masks(gen: ToyCompositor, values: np.ndarray, labels=None) -> np.ndarray:
    if not isinstance(gen, ToyCompositor):
        raise TypeError("oracle masks are only available for the toy compositor")
    return (gen.alpha(values, labels) >= 0.5).astype(np.uint8)


def directional_derivative_check(gen: Generator, z: LatentCode, v, h: float,
                                 n_probes: int = 16, seed: int = 0) -> float:
    """Relative error of the analytic directional derivative against central FD.

    The analytic side is only reachable through the VJP, so both derivatives
    are compared through ``n_probes`` random image-space projections:
    ``<u, J v>`` from ``<J^T u, v>`` versus ``<u, (G(z+hv) - G(z-hv)) / 2h>``.
    """
    if h == 0:
        raise ValueError("step h must be nonzero")
    if h < 0:
        raise ValueError("step h must be positive")
    if gen.spec.gradient_mode != "analytic":
        raise ValueError("generator has no analytic gradients")
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError("direction must have unit norm")
    labels = None if z.class_label is None else np.array([z.class_label])
    z0 = z.values[None]
    fd = (gen.forward(z0 + h * v, labels) - gen.forward(z0 - h * v, labels))[0] / (2 * h)
    probes = np.random.default_rng(seed).standard_normal((n_probes,) + fd.shape)
    lab = None if labels is None else np.repeat(labels, n_probes)
    jt_u = gen.vjp(np.repeat(z0, n_probes, axis=0), lab, probes)
    analytic = jt_u @ v
    numeric = np.einsum("kchw,chw->k", probes, fd)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-300))


# -- adapter registry ----------------------------------------------------

_REGISTRY: dict[str, Callable[[dict], Generator]] = {}


def register_generator(name: str):
    """Decorator registering a factory ``params dict -> Generator`` by name."""

    def deco(factory):
        if name in _REGISTRY:
            raise ValueError(f"generator {name!r} already registered")
        _REGISTRY[name] = factory
        return factory

    return deco


def registered_generators() -> list[str]:
    return sorted(_REGISTRY)


def build_generator(config: dict) -> Generator:
    """Instantiate a generator from ``{"id": ..., "params": {...}}``."""
    gen_id = config.get("id")
    if gen_id not in _REGISTRY:
        raise KeyError(f"unknown generator id {gen_id!r}; known: {registered_generators()}")
    return _REGISTRY[gen_id](dict(config.get("params") or {}))


@register_generator(TOY_GENERATOR_ID)
def _toy_factory(params: dict) -> ToyCompositor:
    return ToyCompositor(ToyCompositorParams(**params))

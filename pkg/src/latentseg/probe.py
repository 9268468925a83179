"""Search for universal foreground-lighter / foreground-darker latent directions.

The objective for a unit direction ``v`` over a batch ``z_1..z_N`` is::

    loss(v) = s * Lc(v) + lam * Ls(v)
    Lc(v)   = mean_i sum_c <G(z_i + eps v)_c, r>
    Ls(v)   = mean_i || S(G(z_i + eps v)) - S(G(z_i)) ||^2

with ``r`` the radial prior, ``S`` the channel-summed squared Sobel response
and ``s = -1`` for the light polarity (brighten the centre), ``+1`` for dark.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .generator import Generator, draw_latents, stack_latents

POLARITIES = ("light", "dark")


class ProbeDivergenceError(FloatingPointError):
    """Raised when the probe objective becomes non-finite."""


@dataclass(frozen=True)
class Direction:
    values: np.ndarray
    polarity: str
    loss_history: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("direction must be a vector")
        if abs(np.linalg.norm(values) - 1.0) > 1e-6:
            raise ValueError(f"direction must have unit norm, got {np.linalg.norm(values)}")
        if self.polarity not in POLARITIES:
            raise ValueError(f"unknown polarity {self.polarity!r}")
        object.__setattr__(self, "values", values)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.polarity.encode())
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class DirectionPair:
    v_light: Direction
    v_dark: Direction

    def __post_init__(self):
        if self.v_light.polarity != "light" or self.v_dark.polarity != "dark":
            raise ValueError("pair needs one light and one dark direction")

    @property
    def dot(self) -> float:
        return float(self.v_light.values @ self.v_dark.values)


@dataclass(frozen=True)
class ProbeConfig:
    lambda_edge: float = 0.2
    epsilon: float = 2.0
    batch_size: int = 32
    steps: int = 1000
    learning_rate: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # True: negate the edge weight for the dark direction instead of
    # flipping the contrast sign.
    literal_lambda_sign: bool = False
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lambda_edge < 0:
            raise ValueError("lambda_edge must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


# -- Sobel energy ---------------------------------------------------------

def _sobel_responses(x):
    """Horizontal and vertical 3x3 Sobel responses with reflect padding."""
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad, mode="reflect")
    d = xp[..., :, :-2] - xp[..., :, 2:]
    gh = d[..., :-2, :] + 2.0 * d[..., 1:-1, :] + d[..., 2:, :]
    e = xp[..., :-2, :] - xp[..., 2:, :]
    gv = e[..., :, :-2] + 2.0 * e[..., :, 1:-1] + e[..., :, 2:]
    return gh, gv


def _sobel_responses_adjoint(cot_h, cot_v):
    """Transpose of ``_sobel_responses`` (including the reflect padding)."""
    shape = cot_h.shape[:-2] + (cot_h.shape[-2] + 2, cot_h.shape[-1] + 2)
    xp = np.zeros(shape)
    d = np.zeros(shape[:-1] + (shape[-1] - 2,))
    d[..., :-2, :] += cot_h
    d[..., 1:-1, :] += 2.0 * cot_h
    d[..., 2:, :] += cot_h
    xp[..., :, :-2] += d
    xp[..., :, 2:] -= d
    e = np.zeros(shape[:-2] + (shape[-2] - 2, shape[-1]))
    e[..., :, :-2] += cot_v
    e[..., :, 1:-1] += 2.0 * cot_v
    e[..., :, 2:] += cot_v
    xp[..., :-2, :] += e
    xp[..., 2:, :] -= e
    # fold the reflected border back: padded row 0 is row 1, last is row -2
    rows = xp[..., 1:-1, :].copy()
    rows[..., 1, :] += xp[..., 0, :]
    rows[..., -2, :] += xp[..., -1, :]
    out = rows[..., :, 1:-1].copy()
    out[..., :, 1] += rows[..., :, 0]
    out[..., :, -2] += rows[..., :, -1]
    return out


def sobel_energy(image: np.ndarray) -> np.ndarray:
    """Per-pixel sum over channels of squared horizontal + vertical Sobel responses.

    Accepts ``(3, H, W)`` or a batch ``(N, 3, H, W)``; returns ``(H, W)`` or
    ``(N, H, W)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise ValueError(f"expected 3-channel image(s), got shape {image.shape}")
    if image.shape[-1] < 3 or image.shape[-2] < 3:
        raise ValueError("Sobel needs H, W >= 3")
    gh, gv = _sobel_responses(image)
    return (gh ** 2 + gv ** 2).sum(axis=-3)


def sobel_energy_vjp(image: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Pull an ``(..., H, W)`` cotangent on the energy back to the image."""
    gh, gv = _sobel_responses(image)
    c = cotangent[..., None, :, :]
    return _sobel_responses_adjoint(2.0 * gh * c, 2.0 * gv * c)


def radial_prior(H: int, W: int) -> np.ndarray:
    """Quadratic centre-positive prior: 1 at the centre, -1 at the corners."""
    if H < 2 or W < 2:
        raise ValueError("radial prior needs H, W >= 2")
    i = np.arange(1, H + 1)[:, None]
    j = np.arange(1, W + 1)[None, :]
    alpha = ((H - 1) ** 2 + (W - 1) ** 2) / 8.0
    return 1.0 - ((i - (H + 1) / 2) ** 2 + (j - (W + 1) / 2) ** 2) / alpha


# -- objective --------------------------------------------------------------

def _signs(polarity: str, cfg: ProbeConfig) -> tuple[float, float]:
    if polarity not in POLARITIES:
        raise ValueError(f"unknown polarity {polarity!r}")
    if cfg.literal_lambda_sign:
        return 1.0, cfg.lambda_edge if polarity == "light" else -cfg.lambda_edge
    return (-1.0 if polarity == "light" else 1.0), cfg.lambda_edge


def _as_batch(batch):
    if isinstance(batch, tuple):
        values, labels = batch
        return np.asarray(values, dtype=np.float64), labels
    return stack_latents(batch)


def objective_terms(gen: Generator, v, batch, epsilon: float):
    """Return ``(Lc, Ls)`` for direction ``v`` on ``batch`` without gradients."""
    values, labels = _as_batch(batch)
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    x0 = gen.forward(values, labels)
    x1 = gen.forward(values + epsilon * v, labels)
    r = radial_prior(gen.spec.height, gen.spec.width)
    lc = float(np.einsum("nchw,hw->", x1, r) / len(values))
    ls = float(((sobel_energy(x1) - sobel_energy(x0)) ** 2).sum() / len(values))
    return lc, ls


def probe_objective(gen: Generator, v, batch, cfg: ProbeConfig, polarity: str):
    """Loss and gradient with respect to ``v`` of the combined objective.

    ``batch`` is a list of LatentCode or a ``(values, labels)`` tuple. Uses
    the generator's VJP in analytic mode and per-coordinate central
    differences otherwise.
    """
    values, labels = _as_batch(batch)
    if len(values) == 0:
        raise ValueError("empty latent batch")
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    s, lam = _signs(polarity, cfg)
    eps = cfg.epsilon
    n = len(values)

    if gen.spec.gradient_mode != "analytic":
        lc, ls = objective_terms(gen, v, (values, labels), eps)
        loss = s * lc + lam * ls
        grad = np.zeros_like(v)
        for k in range(len(v)):
            step = np.zeros_like(v)
            step[k] = cfg.fd_step
            lp = objective_terms(gen, v + step, (values, labels), eps)
            lm = objective_terms(gen, v - step, (values, labels), eps)
            grad[k] = (s * (lp[0] - lm[0]) + lam * (lp[1] - lm[1])) / (2 * cfg.fd_step)
        if not np.isfinite(loss):
            raise ProbeDivergenceError("non-finite probe loss")
        return float(loss), grad

    r = radial_prior(gen.spec.height, gen.spec.width)
    shifted = values + eps * v
    x0 = gen.forward(values, labels)
    x1 = gen.forward(shifted, labels)
    gh, gv = _sobel_responses(x1)
    diff = (gh ** 2 + gv ** 2).sum(axis=1) - sobel_energy(x0)
    lc = np.einsum("nchw,hw->", x1, r) / n
    ls = (diff ** 2).sum() / n
    loss = s * lc + lam * ls
    if not np.isfinite(loss):
        raise ProbeDivergenceError("non-finite probe loss")
    cot = np.broadcast_to(s * r, x1.shape) / n
    if lam != 0.0:
        # d/dx1 of sum (S1 - S0)^2 with S1 = sum_c gh^2 + gv^2
        c = (4.0 * lam / n) * diff[:, None]
        cot = cot + _sobel_responses_adjoint(c * gh, c * gv)
    grad_z = gen.vjp(shifted, labels, np.ascontiguousarray(cot))
    return float(loss), eps * grad_z.sum(axis=0)


def _unit(x):
    return x / np.linalg.norm(x)


def optimize_direction(gen: Generator, cfg: ProbeConfig, polarity: str) -> Direction:
    """Adam on the unit sphere: update, then renormalise, with a fresh batch per step."""
    rng = np.random.default_rng(cfg.seed)
    v = _unit(rng.standard_normal(gen.spec.latent_dim))
    m = np.zeros_like(v)
    s2 = np.zeros_like(v)
    history = []
    for t in range(1, cfg.steps + 1):
        batch = draw_latents(gen.spec, cfg.batch_size, rng)
        try:
            loss, grad = probe_objective(gen, v, batch, cfg, polarity)
        except ProbeDivergenceError as err:
            raise ProbeDivergenceError(f"probe diverged at step {t}: {err}") from None
        if not np.all(np.isfinite(grad)):
            raise ProbeDivergenceError(f"probe diverged at step {t}: non-finite gradient")
        history.append(loss)
        m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * grad
        s2 = cfg.adam_beta2 * s2 + (1 - cfg.adam_beta2) * grad ** 2
        m_hat = m / (1 - cfg.adam_beta1 ** t)
        s_hat = s2 / (1 - cfg.adam_beta2 ** t)
        v = _unit(v - cfg.learning_rate * m_hat / (np.sqrt(s_hat) + cfg.adam_eps))
    return Direction(v, polarity, tuple(history))


def find_direction_pair(gen: Generator, cfg: ProbeConfig) -> DirectionPair:
    light = optimize_direction(gen, cfg, "light")
    dark = optimize_direction(gen, replace(cfg, seed=cfg.seed + 1), "dark")
    return DirectionPair(light, dark)


@dataclass(frozen=True)
class DiagnosticsRecord:
    dot: float
    mean_change_light: float
    mean_change_dark: float
    center_border_light: float
    center_border_dark: float


def direction_diagnostics(pair: DirectionPair, gen: Generator, n: int, seed: int,
                          epsilon: float = 2.0) -> DiagnosticsRecord:
    """Summarise how each shift changes brightness, overall and centre vs border.

    The centre is where the radial prior is positive, the border the rest.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    values, labels = draw_latents(gen.spec, n, np.random.default_rng(seed))
    x0 = gen.forward(values, labels)
    center = radial_prior(gen.spec.height, gen.spec.width) > 0
    out = {}
    for name, d in (("light", pair.v_light), ("dark", pair.v_dark)):
        delta = (gen.forward(values + epsilon * d.values, labels) - x0).mean(axis=1)
        out[f"mean_change_{name}"] = float(delta.mean())
        out[f"center_border_{name}"] = float(delta[:, center].mean() - delta[:, ~center].mean())
    return DiagnosticsRecord(dot=pair.dot, **out)


# -- persistence ----------------------------------------------------------

DIRECTION_SCHEMA = "latentseg.direction/1"


def direction_record(direction: Direction, gen: Generator, cfg: ProbeConfig,
                     config_hash: str | None = None) -> dict:
    return {
        "schema": DIRECTION_SCHEMA,
        "generator_fingerprint": gen.fingerprint(),
        "polarity": direction.polarity,
        "latent_dim": int(direction.values.size),
        "values": [float(x) for x in direction.values],
        "fingerprint": direction.fingerprint(),
        "probe_config": asdict(cfg),
        "config_hash": config_hash,
    }


def save_direction(path, direction: Direction, gen: Generator, cfg: ProbeConfig,
                   config_hash: str | None = None) -> dict:
    rec = direction_record(direction, gen, cfg, config_hash)
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return rec


def load_direction(path) -> tuple[Direction, dict]:
    with open(path) as fh:
        rec = json.load(fh)
    if rec.get("schema") != DIRECTION_SCHEMA:
        raise ValueError(f"{path}: not a direction record")
    values = np.asarray(rec["values"], dtype=np.float64)
    if values.size != rec["latent_dim"]:
        raise ValueError(f"{path}: latent_dim does not match coefficient count")
    return Direction(values, rec["polarity"]), rec

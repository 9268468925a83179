"""UNet segmenter distilled from synthetic (image, mask) pairs."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LSEGCKPT"
CHECKPOINT_VERSION = 1


class TrainingDivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SegArchConfig:
    levels: int = 4
    base_channels: int = 16
    in_channels: int = 3
    out_channels: int = 1
    resampling: str = "bilinear"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.in_channels != 3 or self.out_channels != 1:
            raise ValueError("the segmenter maps 3 channels to 1 logit map")
        if self.resampling != "bilinear":
            raise ValueError("only bilinear resampling is supported")

    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels + 1)]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 16
    learning_rate: float = 1e-3
    decay_factor: float = 0.2
    decay_step: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate <= 0 or self.decay_factor <= 0:
            raise ValueError("learning_rate and decay_factor must be positive")
        if not 0 < self.decay_step < self.steps:
            raise ValueError("decay_step must lie strictly between 0 and steps")


def parameter_count(arch: SegArchConfig) -> int:
    """Closed-form number of weights of the UNet built by ``init_model``."""
    def conv(cin, cout, k=3):
        return k * k * cin * cout + cout

    ch = arch.channels()
    total = 0
    cin = arch.in_channels
    for level in range(arch.levels):
        total += conv(cin, ch[level]) + conv(ch[level], ch[level])
        cin = ch[level]
    total += conv(ch[-2], ch[-1]) + conv(ch[-1], ch[-1])
    for level in range(arch.levels):
        total += conv(ch[level + 1] + ch[level], ch[level]) + conv(ch[level], ch[level])
    return total + conv(ch[0], arch.out_channels, k=1)


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder/decoder with bilinear 2x resampling and skip concatenation."""

    def __init__(self, arch: SegArchConfig):
        super().__init__()
        ch = arch.channels()
        self.down = nn.ModuleList()
        cin = arch.in_channels
        for level in range(arch.levels):
            self.down.append(_double_conv(cin, ch[level]))
            cin = ch[level]
        self.bottom = _double_conv(ch[-2], ch[-1])
        self.up = nn.ModuleList(
            _double_conv(ch[level + 1] + ch[level], ch[level])
            for level in reversed(range(arch.levels))
        )
        self.head = nn.Conv2d(ch[0], arch.out_channels, 1)

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
        x = self.bottom(x)
        for block in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


@dataclass
class SegModel:
    arch: SegArchConfig
    input_size: tuple[int, int]
    net: UNet

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def flat_parameters(self) -> np.ndarray:
        with torch.no_grad():
            vec = nn.utils.parameters_to_vector(self.net.parameters())
        return vec.detach().cpu().numpy().copy()

    def load_flat_parameters(self, flat: np.ndarray):
        flat = np.asarray(flat)
        if flat.size != parameter_count(self.arch):
            raise ValueError(f"expected {parameter_count(self.arch)} parameters, got {flat.size}")
        with torch.no_grad():
            nn.utils.vector_to_parameters(torch.as_tensor(flat, dtype=self.dtype), self.net.parameters())

    def logits(self, images: np.ndarray) -> np.ndarray:
        """``(N, 3, H, W)`` images at model resolution to ``(N, H, W)`` logits."""
        with torch.no_grad():
            out = self.net(torch.as_tensor(np.asarray(images), dtype=self.dtype))
        return out[:, 0].cpu().numpy()


def init_model(arch: SegArchConfig, seed: int, input_size=(64, 64), dtype=torch.float32) -> SegModel:
    h, w = input_size
    step = 2 ** arch.levels
    if h % step or w % step:
        raise ValueError(f"input {h}x{w} is not divisible by 2^levels = {step}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet(arch).to(dtype)
    return SegModel(arch, (int(h), int(w)), net)


def bce_loss(logits: np.ndarray, mask: np.ndarray) -> float:
    """Mean pixel-wise binary cross-entropy of logits against a {0, 1} mask.

    ``-log p(m | s)`` is ``log(1 + exp(-s))`` for foreground and
    ``log(1 + exp(s))`` for background, evaluated with ``logaddexp``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask)
    if logits.shape != mask.shape:
        raise ValueError(f"logits {logits.shape} and mask {mask.shape} differ in shape")
    signed = np.where(mask > 0, logits, -logits)
    return float(np.logaddexp(0.0, -signed).mean())


@dataclass
class Checkpoint:
    arch: SegArchConfig
    input_size: tuple[int, int]
    parameters: np.ndarray
    step: int
    loss_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.asarray(self.parameters).size != parameter_count(self.arch):
            raise ValueError("parameter count does not match the architecture")


def _batches(n, batch_size, rng):
    """Endless stream of index batches; reshuffles after each pass over the data."""
    order = rng.permutation(n)
    pos = 0
    while True:
        idx = []
        while len(idx) < batch_size:
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            take = min(batch_size - len(idx), n - pos)
            idx.extend(order[pos:pos + take])
            pos += take
        yield np.asarray(idx)


def train(model: SegModel, dataset, cfg: TrainConfig, log_every: int = 250) -> Checkpoint:
    """Adam on the BCE loss with one step-decay of the learning rate.

    ``dataset`` is a ``DatasetManifest`` or an ``(images, masks)`` array pair.
    The model is updated in place.
    """
    if hasattr(dataset, "load_arrays"):
        images, masks = dataset.load_arrays()
    else:
        images, masks = dataset
    if len(images) == 0:
        raise ValueError("empty training set")
    if tuple(images.shape[-2:]) != model.input_size:
        raise ValueError(f"training images are {images.shape[-2:]}, model expects {model.input_size}")
    x_all = torch.as_tensor(np.asarray(images), dtype=model.dtype)
    y_all = torch.as_tensor(np.asarray(masks)[:, None], dtype=model.dtype)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)
    history = []
    model.net.train()
    stream = _batches(len(x_all), cfg.batch_size, rng)
    for step in range(cfg.steps):
        if step == cfg.decay_step:
            for group in opt.param_groups:
                group["lr"] = cfg.learning_rate * cfg.decay_factor
        idx = torch.as_tensor(next(stream))
        loss = F.binary_cross_entropy_with_logits(model.net(x_all[idx]), y_all[idx])
        value = float(loss.item())
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"non-finite training loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((step, value))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, value)
    model.net.eval()
    return Checkpoint(model.arch, model.input_size, model.flat_parameters().astype(np.float32),
                      cfg.steps, history, {"train": asdict(cfg)})


def save_checkpoint(path, ckpt: Checkpoint):
    params = np.asarray(ckpt.parameters, dtype="<f4")
    header = {
        "arch": asdict(ckpt.arch),
        "input_size": list(ckpt.input_size),
        "parameter_count": int(params.size),
        "step": int(ckpt.step),
        "loss_history": [[int(s), float(v)] for s, v in ckpt.loss_history],
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a segmenter checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    params = np.frombuffer(data[16 + hlen:], dtype="<f4").copy()
    if params.size != header["parameter_count"]:
        raise ValueError(f"{path}: truncated parameter block")
    return Checkpoint(SegArchConfig(**header["arch"]), tuple(header["input_size"]), params,
                      header["step"], [tuple(x) for x in header["loss_history"]], header["meta"])


def model_from_checkpoint(ckpt: Checkpoint) -> SegModel:
    model = init_model(ckpt.arch, 0, ckpt.input_size)
    model.load_flat_parameters(ckpt.parameters)
    model.net.eval()
    return model


def resize_maps(x: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of ``(..., H, W)`` arrays; identity when already sized."""
    x = np.asarray(x)
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    lead = x.shape[:-2]
    t = torch.as_tensor(x.reshape((-1, 1) + x.shape[-2:]), dtype=torch.float64)
    antialias = size[0] < x.shape[-2] or size[1] < x.shape[-1]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False, antialias=antialias)
    return out.numpy().reshape(lead + tuple(size))


def predict(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Soft foreground mask in [0, 1] at the input image's resolution."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    src = image.shape[-2:]
    x = resize_maps(image, model.input_size)
    soft = 1.0 / (1.0 + np.exp(-model.logits(x[None])[0].astype(np.float64)))
    return np.clip(resize_maps(soft, src), 0.0, 1.0)


def ensemble_predict(models, image: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the member soft masks."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    return np.mean([predict(m, image) for m in models], axis=0)

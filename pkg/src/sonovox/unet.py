"""Two-stage 3D U-Net: parameters, forward pass, training loop, checkpoints.

The encoder halves the spatial dims twice, doubling feature channels per
stage; the bottleneck widens to four times the base width (64 channels at
the default base of 16). Symmetric decoder stages use learnable
transposed convolutions and concatenated skip connections, and a 1x1x1
head produces two-class voxel probabilities through a softmax.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataset import DatasetSplit, Frame, OccupancyMask
from .nn import Tensor
from .volume import Volume

Array = np.ndarray

_CKPT_HEADER = struct.Struct("<4sHHIIIBBHHH")
_CKPT_MAGIC = b"CVCK"
_CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_FROM_CODE = {0: np.float32, 1: np.float64}


@dataclass
class UNetParams:
    """All learnable tensors, keyed by layer name in a fixed order."""

    tensors: dict[str, Tensor]
    base_channels: int = 16
    in_channels: int = 1
    n_classes: int = 2
    seed: int = 0

    def data(self) -> dict[str, Array]:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict[str, Array]:
        return {k: np.zeros_like(t.data) if t.grad is None else t.grad for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def _layer_plan(base: int, in_ch: int, n_classes: int) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) per learnable tensor, in init order."""
    c1, c2, c4 = base, 2 * base, 4 * base
    plan: list[tuple[str, tuple[int, ...], int]] = []

    def conv(name: str, co: int, ci: int, k: int = 3) -> None:
        plan.append((f"{name}.w", (co, ci, k, k, k), ci * k ** 3))
        plan.append((f"{name}.b", (co,), ci * k ** 3))

    def up(name: str, ci: int, co: int) -> None:
        plan.append((f"{name}.w", (ci, co, 2, 2, 2), ci))
        plan.append((f"{name}.b", (co,), ci))

    conv("enc1.conv1", c1, in_ch)
    conv("enc1.conv2", c1, c1)
    conv("enc2.conv1", c2, c1)
    conv("enc2.conv2", c2, c2)
    conv("bott.conv1", c4, c2)
    conv("bott.conv2", c4, c4)
    up("dec2.up", c4, c2)
    conv("dec2.conv1", c2, 2 * c2)
    conv("dec2.conv2", c2, c2)
    up("dec1.up", c2, c1)
    conv("dec1.conv1", c1, 2 * c1)
    conv("dec1.conv2", c1, c1)
    conv("head", n_classes, c1, k=1)
    return plan


def init_unet(base_channels: int = 16, in_channels: int = 1, n_classes: int = 2,
              seed: int = 0, dtype=np.float64) -> UNetParams:
    """Seeded He-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, fan_in in _layer_plan(base_channels, in_channels, n_classes):
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = nn.he_uniform(rng, shape, fan_in, dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return UNetParams(tensors=tensors, base_channels=base_channels,
                      in_channels=in_channels, n_classes=n_classes, seed=seed)


def unet_forward(params: UNetParams, x: Tensor) -> Tensor:
    """Softmax class probabilities with the input's spatial shape.

    Spatial dims must be divisible by 4 (two pooling stages).
    """
    _, _, d, h, w = x.data.shape
    for name, dim in (("D", d), ("H", h), ("W", w)):
        if dim % 4:
            raise nn.ShapeError(f"{name} axis ({dim}) must be divisible by 4")
    t = params.tensors

    def block(v: Tensor, name: str) -> Tensor:
        v = nn.relu(nn.conv3d(v, t[f"{name}.conv1.w"], t[f"{name}.conv1.b"]))
        return nn.relu(nn.conv3d(v, t[f"{name}.conv2.w"], t[f"{name}.conv2.b"]))

    e1 = block(x, "enc1")
    e2 = block(nn.maxpool3d(e1), "enc2")
    bt = block(nn.maxpool3d(e2), "bott")
    u2 = nn.upconv3d(bt, t["dec2.up.w"], t["dec2.up.b"])
    d2 = block(nn.concat_channels(u2, e2), "dec2")
    u1 = nn.upconv3d(d2, t["dec1.up.w"], t["dec1.up.b"])
    d1 = block(nn.concat_channels(u1, e1), "dec1")
    logits = nn.conv3d(d1, t["head.w"], t["head.b"])
    return nn.softmax_channels(logits)


@dataclass
class TrainConfig:
    max_epochs: int = 20
    batch_size: int = 1
    initial_lr: float = 1e-4
    lr_drop_period: int = 10
    lr_drop_factor: float = 0.3
    shuffle: bool = True
    seed: int = 0
    base_channels: int = 16
    dtype: str = "float64"
    smooth: float = 1e-5
    normalize: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.max_epochs < 1 or self.initial_lr <= 0 or self.lr_drop_period < 1:
            raise ValueError("training config values must be positive")
        if self.batch_size != 1:
            raise NotImplementedError("only mini-batch size 1 is implemented")

    @property
    def np_dtype(self):
        return {"float32": np.float32, "float64": np.float64}[self.dtype]


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise schedule: drop by the factor every ``lr_drop_period`` epochs."""
    if epoch < 1:
        raise ValueError("epochs count from 1")
    return cfg.initial_lr * cfg.lr_drop_factor ** ((epoch - 1) // cfg.lr_drop_period)


def frame_to_tensors(frame: Frame, dtype, normalize: bool = True) -> tuple[Array, Array]:
    """Intensity as [1, 1, H, D, W]; mask as one-hot [1, 2, H, D, W]."""
    x = frame.intensity.values.astype(dtype)[None, None]
    if normalize:
        peak = x.max()
        if peak > 0:
            x = x / peak
    labels = frame.mask.labels
    t = np.empty((1, 2) + labels.shape, dtype=dtype)
    t[0, 1] = labels
    t[0, 0] = 1 - labels
    return x, t


@dataclass
class TrainResult:
    params: UNetParams
    adam: nn.AdamState
    epoch: int
    log: list[tuple[int, float, float, float]] = field(default_factory=list)  # epoch, train, val, lr

    @property
    def best_val_loss(self) -> float:
        vals = [row[2] for row in self.log if np.isfinite(row[2])]
        return min(vals) if vals else float("nan")


def train(dataset: DatasetSplit, cfg: TrainConfig | None = None) -> TrainResult:
    """Seeded batch-1 training with per-epoch shuffling and validation.

    The log holds one (epoch, train_loss, val_loss, lr) row per epoch;
    val_loss is NaN when the validation set is empty.
    """
    if cfg is None:
        cfg = TrainConfig()
    if not dataset.train:
        raise ValueError("training set is empty")
    dtype = cfg.np_dtype
    params = init_unet(base_channels=cfg.base_channels, seed=cfg.seed, dtype=dtype)
    state = nn.init_adam(params.data())
    rng = np.random.default_rng(cfg.seed)
    log: list[tuple[int, float, float, float]] = []
    steps = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(dataset.train)) if cfg.shuffle else np.arange(len(dataset.train))
        losses = []
        for i in order:
            x, t = frame_to_tensors(dataset.train[i], dtype, cfg.normalize)
            params.zero_grad()
            probs = unet_forward(params, Tensor(x))
            loss = nn.dice_loss(probs, t, smooth=cfg.smooth)
            loss.backward()
            nn.adam_step(params.data(), params.grads(), state, lr)
            losses.append(float(loss.data))
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val = validation_loss(params, dataset.val, cfg)
        log.append((epoch, float(np.mean(losses)), val, lr))
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return TrainResult(params=params, adam=state, epoch=epoch, log=log)


@contextmanager
def _inference(params: UNetParams):
    """Temporarily drop requires_grad so forward passes skip graph building."""
    flags = [(t, t.requires_grad) for t in params.tensors.values()]
    for t, _ in flags:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in flags:
            t.requires_grad = flag


def validation_loss(params: UNetParams, frames: list[Frame], cfg: TrainConfig) -> float:
    """Mean Dice loss over frames without touching gradients."""
    if not frames:
        return float("nan")
    dtype = cfg.np_dtype
    losses = []
    with _inference(params):
        for frame in frames:
            x, t = frame_to_tensors(frame, dtype, cfg.normalize)
            probs = unet_forward(params, Tensor(x))
            losses.append(float(nn.dice_loss(probs, t, smooth=cfg.smooth).data))
    return float(np.mean(losses))


def predict(params: UNetParams, intensity: Volume, normalize: bool = True) -> OccupancyMask:
    """Argmax class per voxel."""
    dtype = next(iter(params.tensors.values())).data.dtype
    x = intensity.values.astype(dtype)[None, None]
    if normalize:
        peak = x.max()
        if peak > 0:
            x = x / peak
    with _inference(params):
        probs = unet_forward(params, Tensor(x))
    labels = probs.data[0].argmax(axis=0).astype(np.uint8)
    return OccupancyMask(labels=labels, grid=intensity.grid)


def hard_object_dice(params: UNetParams, frames: list[Frame], normalize: bool = True) -> float:
    """Dice of the argmax prediction against the mask, object class only."""
    inter = 0
    total = 0
    for frame in frames:
        pred = predict(params, frame.intensity, normalize=normalize).labels.astype(np.int64)
        gt = frame.mask.labels.astype(np.int64)
        inter += int((pred * gt).sum())
        total += int(pred.sum() + gt.sum())
    return 2.0 * inter / total if total else 1.0


def save_checkpoint(path, result: TrainResult) -> None:
    """Named-tensor container: params plus Adam moments and the epoch counter."""
    params = result.params
    dtype = next(iter(params.tensors.values())).data.dtype
    code = _DTYPE_CODES[np.dtype(dtype)]
    entries: list[tuple[str, Array]] = []
    for k, t in params.tensors.items():
        entries.append((f"p/{k}", t.data))
    for k in params.tensors:
        entries.append((f"m/{k}", result.adam.m[k]))
    for k in params.tensors:
        entries.append((f"v/{k}", result.adam.v[k]))
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, 0, result.epoch, result.adam.step,
                                  len(entries), code, 0, params.base_channels,
                                  params.in_channels, params.n_classes))
        for name, arr in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,))))
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path) -> TrainResult:
    with open(path, "rb") as f:
        head = f.read(_CKPT_HEADER.size)
        if len(head) < _CKPT_HEADER.size:
            raise ValueError(f"{path}: truncated checkpoint header")
        magic, version, _, epoch, adam_t, n_entries, code, _, base, in_ch, n_classes = _CKPT_HEADER.unpack(head)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        dtype = np.dtype(_DTYPE_FROM_CODE[code])
        tensors: dict[str, Array] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{max(ndim, 1)}I", f.read(4 * max(ndim, 1)))[:ndim]
            count = int(np.prod(shape)) if ndim else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) < count * dtype.itemsize:
                raise ValueError(f"{path}: truncated tensor payload for {name}")
            tensors[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    params = UNetParams(
        tensors={k[2:]: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith("p/")},
        base_channels=base, in_channels=in_ch, n_classes=n_classes)
    adam = nn.AdamState(
        m={k[2:]: v for k, v in tensors.items() if k.startswith("m/")},
        v={k[2:]: v for k, v in tensors.items() if k.startswith("v/")},
        step=adam_t)
    return TrainResult(params=params, adam=adam, epoch=epoch, log=[])

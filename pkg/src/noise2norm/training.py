"""AdamW, cosine learning-rate schedule, early-stopped training and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data_io import atomic_write
from .errors import CheckpointError, ConfigError, InvalidArgumentError, InvalidStateError, NonFiniteError
from .model import ModelConfig, ParameterSet, init_model, mnet_forward, validate_parameters
from .msssim import LossConfig, SsimParams, mix_loss
from .noise import NoiseConfig, inject_noise, make_multiscale
from .tensor import Tensor, backward, clear_graph, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"N2NCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-3
    betas: tuple = (0.5, 0.999)
    weight_decay: float = 1e-2
    eps: float = 1e-8
    t_max: int = 100
    eta_min: float = 1e-6
    max_epochs: int = 150
    patience: int = 20
    val_fraction: float = 0.2
    batch_size: int = 4
    image_size: int = 64
    split_seed: int = 0
    init_seed: int = 0
    noise_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise InvalidArgumentError(f"betas must be two values in [0, 1), got {self.betas}")
        if not 0.0 < self.val_fraction < 1.0:
            raise InvalidArgumentError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        if self.eta_min > self.lr0:
            raise InvalidArgumentError("eta_min must not exceed lr0")
        if self.t_max < 1 or self.max_epochs < 1 or self.batch_size < 1 or self.image_size < 1:
            raise InvalidArgumentError("t_max, max_epochs, batch_size and image_size must be >= 1")


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: ParameterSet, state: AdamWState, lr: float, cfg: TrainConfig) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    w <- w - lr * (m_hat / (sqrt(v_hat) + eps)) - lr * wd * w, with the decay
    term using the pre-update weights.
    """
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise InvalidStateError(f"no gradient for parameter {missing[0]}")
    b1, b2 = cfg.betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        t.data = (t.data - lr * cfg.weight_decay * t.data - lr * update).astype(t.dtype, copy=False)
    return state


def cosine_lr(epoch: float, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise InvalidArgumentError("epoch must be >= 0")
    phase = math.fmod(epoch, cfg.t_max) / cfg.t_max
    return cfg.eta_min + 0.5 * (cfg.lr0 - cfg.eta_min) * (1.0 + math.cos(math.pi * phase))


def split_train_val(items: Sequence, val_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle; the last ceil(n * val_fraction) items form the validation split."""
    items = list(items)
    if not items:
        raise ConfigError("cannot split an empty item list")
    if not 0.0 < val_fraction < 1.0:
        raise InvalidArgumentError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    order = np.random.Generator(np.random.Philox(int(seed))).permutation(len(items))
    n_val = math.ceil(len(items) * val_fraction)
    if n_val >= len(items):
        raise ConfigError(f"{len(items)} item(s) with val_fraction {val_fraction} leave an empty train split")
    shuffled = [items[i] for i in order]
    return shuffled[:-n_val], shuffled[-n_val:]


class EarlyStopping:
    """Tracks the best validation loss; ``step`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


# ----------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    model: ModelConfig
    ssim: SsimParams
    loss: LossConfig
    noise: NoiseConfig
    params: ParameterSet
    meta: dict = field(default_factory=dict)

    def configs_dict(self) -> dict:
        return {"model": _cfg_dict(self.model), "ssim": _cfg_dict(self.ssim),
                "loss": _cfg_dict(self.loss), "noise": _cfg_dict(self.noise)}


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for name, t in ckpt.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format_version": CHECKPOINT_VERSION, **ckpt.configs_dict(), "meta": ckpt.meta, "params": table}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write magic, length-prefixed JSON header, then little-endian float32 arrays."""
    atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path: str, expected_model: ModelConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    n_magic = len(CHECKPOINT_MAGIC)
    if raw[:n_magic] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < n_magic + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", raw[n_magic:n_magic + 8])
    start = n_magic + 8
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != {CHECKPOINT_VERSION}")
    data = raw[start + hlen:]
    expected_len = sum(p["nbytes"] for p in header["params"])
    if len(data) != expected_len:
        raise CheckpointError(f"{path}: parameter payload is {len(data)} bytes, header declares {expected_len}")
    arrays = OrderedDict()
    for p in header["params"]:
        buf = data[p["offset"]:p["offset"] + p["nbytes"]]
        arrays[p["name"]] = np.frombuffer(buf, dtype="<f4").reshape(p["shape"]).astype(np.float32)
    try:
        model = ModelConfig(**header["model"])
        ckpt = Checkpoint(model=model, ssim=SsimParams(**header["ssim"]), loss=LossConfig(**header["loss"]),
                          noise=NoiseConfig(**header["noise"]), params=ParameterSet.from_arrays(arrays),
                          meta=header.get("meta", {}))
    except (TypeError, KeyError) as e:
        raise CheckpointError(f"{path}: invalid configuration in header: {e}") from e
    validate_parameters(ckpt.params, model)
    if expected_model is not None:
        validate_parameters(ckpt.params, expected_model)
    return ckpt


# ------------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def _stack(images: Sequence[Tensor]) -> Tensor:
    return Tensor(np.concatenate([im.data for im in images], axis=0))


def batch_loss(images: Tensor, params: ParameterSet, model_cfg: ModelConfig, noise_cfg: NoiseConfig,
               ssim: SsimParams, loss_cfg: LossConfig, seed: int) -> Tensor:
    x0, x_noisy = inject_noise(images, noise_cfg, seed)
    recon = mnet_forward(make_multiscale(x_noisy, model_cfg.num_scales), params, model_cfg)
    return mix_loss(recon, x0, ssim, loss_cfg)


def validation_loss(images: Sequence[Tensor], params: ParameterSet, model_cfg: ModelConfig,
                    noise_cfg: NoiseConfig, ssim: SsimParams, loss_cfg: LossConfig,
                    noise_seed: int, batch_size: int) -> float:
    """Mean loss over the validation images with noise fixed by ``noise_seed``."""
    total, count = 0.0, 0
    with no_grad():
        for b in range(0, len(images), batch_size):
            chunk = images[b:b + batch_size]
            loss = batch_loss(_stack(chunk), params, model_cfg, noise_cfg, ssim, loss_cfg,
                              derive_seed(noise_seed, 1, b))
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / count


def train(images: Sequence[Tensor], model_cfg: ModelConfig = ModelConfig(), noise_cfg: NoiseConfig = NoiseConfig(),
          ssim: SsimParams = SsimParams(), loss_cfg: LossConfig = LossConfig(),
          train_cfg: TrainConfig = TrainConfig(),
          on_epoch: Callable[[EpochRecord], None] | None = None) -> Checkpoint:
    """Train on anomaly-free images (each a (1, 3, h, w) tensor in [0, 1]).

    Returns the checkpoint with the lowest validation loss. Noise is re-drawn
    for every training step; validation noise is fixed across epochs.
    """
    train_set, val_set = split_train_val(list(images), train_cfg.val_fraction, train_cfg.split_seed)
    params = init_model(model_cfg, train_cfg.init_seed)
    state = AdamWState()
    stopper = EarlyStopping(train_cfg.patience)
    best_arrays = params.to_arrays()
    history: list[EpochRecord] = []
    bs = train_cfg.batch_size

    for epoch in range(train_cfg.max_epochs):
        lr = cosine_lr(epoch, train_cfg)
        order = np.random.Generator(np.random.Philox(derive_seed(train_cfg.noise_seed, 0, epoch))).permutation(len(train_set))
        running, seen = 0.0, 0
        for step, b in enumerate(range(0, len(order), bs)):
            batch = _stack([train_set[i] for i in order[b:b + bs]])
            clear_graph()
            params.zero_grad()
            try:
                loss = batch_loss(batch, params, model_cfg, noise_cfg, ssim, loss_cfg,
                                  derive_seed(train_cfg.noise_seed, 2, epoch, step))
                backward(loss)
            except NonFiniteError as e:
                clear_graph()
                raise NonFiniteError(f"non-finite value at epoch {epoch}, step {step}: {e}") from e
            adamw_step(params, state, lr, train_cfg)
            running += loss.item() * batch.shape[0]
            seen += batch.shape[0]
        val = validation_loss(val_set, params, model_cfg, noise_cfg, ssim, loss_cfg, train_cfg.noise_seed, bs)
        record = EpochRecord(epoch, running / seen, val, lr)
        history.append(record)
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, record.train_loss, val, lr)
        if on_epoch is not None:
            on_epoch(record)
        stop = stopper.step(epoch, val)
        if stopper.improved_last:
            best_arrays = params.to_arrays()
        if stop:
            break

    meta = {"epochs_run": len(history), "best_epoch": stopper.best_epoch, "best_val_loss": stopper.best,
            "train_size": len(train_set), "val_size": len(val_set), "train": _cfg_dict(train_cfg)}
    return Checkpoint(model_cfg, ssim, loss_cfg, noise_cfg, ParameterSet.from_arrays(best_arrays), meta)


def overfit_single_image(image: Tensor, steps: int = 500, steps_per_epoch: int = 50,
                         model_cfg: ModelConfig = ModelConfig(), noise_cfg: NoiseConfig = NoiseConfig(),
                         ssim: SsimParams = SsimParams(), loss_cfg: LossConfig = LossConfig(),
                         train_cfg: TrainConfig = TrainConfig()) -> list[float]:
    """Fit one image repeatedly; returns the mean loss of each block of ``steps_per_epoch`` steps."""
    params = init_model(model_cfg, train_cfg.init_seed)
    state = AdamWState()
    losses, epoch_means = [], []
    for step in range(steps):
        clear_graph()
        params.zero_grad()
        loss = batch_loss(image, params, model_cfg, noise_cfg, ssim, loss_cfg,
                          derive_seed(train_cfg.noise_seed, 3, step))
        backward(loss)
        adamw_step(params, state, cosine_lr(step // steps_per_epoch, train_cfg), train_cfg)
        losses.append(loss.item())
        if len(losses) == steps_per_epoch:
            epoch_means.append(float(np.mean(losses)))
            losses = []
    if losses:
        epoch_means.append(float(np.mean(losses)))
    return epoch_means

"""AUROC metrics, checkpoint evaluation and ablation sweeps.

Image-level score is the maximum of the smoothed anomaly map. Pixel AUROC
pools every pixel of every test image into one ranking (no per-image
averaging). Inference noise for a test image is seeded from a hash of its
path relative to the dataset root, so results do not depend on scan order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .config import RunConfig, config_fingerprint
from .data_io import DatasetIndex, load_image, load_mask, scan_dataset
from .errors import ConfigError, DatasetError, InvalidArgumentError
from .model import mnet_forward
from .msssim import AnomalyMap, anomaly_map_batch
from .noise import inject_noise, make_multiscale
from .tensor import Tensor, no_grad
from .training import Checkpoint, derive_seed, train

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("category", "image_auroc", "pixel_auroc", "n_normal", "n_anomalous", "config_hash")


def image_score(amap: AnomalyMap | np.ndarray) -> float:
    pixels = np.asarray(getattr(amap, "pixels", amap))
    if pixels.size == 0:
        raise InvalidArgumentError("empty anomaly map")
    return float(np.max(pixels))


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC: (concordant + 0.5 * tied pairs) / (n_pos * n_neg).

    Ties get average ranks; all intermediate quantities are half-integers, so
    the result is exact in float64 for any realistic sample size.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise InvalidArgumentError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgumentError("labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0:
        raise InvalidArgumentError("auroc needs at least one positive (label 1) sample")
    if n_neg == 0:
        raise InvalidArgumentError("auroc needs at least one negative (label 0) sample")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (float(n_pos) * float(n_neg)))


@dataclass
class EvalReport:
    category: str
    image_auroc: float
    pixel_auroc: float
    n_normal: int
    n_anomalous: int
    n_pixels_normal: int
    n_pixels_anomalous: int
    config_hash: str
    image_scores: list = field(default_factory=list, repr=False)

    def row(self) -> list:
        return [self.category, f"{self.image_auroc:.6f}", f"{self.pixel_auroc:.6f}",
                self.n_normal, self.n_anomalous, self.config_hash]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerow(self.row())
        return buf.getvalue()

    def pretty(self) -> str:
        return (f"{self.category}: image AUROC {self.image_auroc * 100:.2f}%  "
                f"pixel AUROC {self.pixel_auroc * 100:.2f}%  "
                f"({self.n_normal} normal / {self.n_anomalous} anomalous images, "
                f"{self.n_pixels_anomalous} anomalous of {self.n_pixels_normal + self.n_pixels_anomalous} pixels "
                f"pooled; config {self.config_hash})")


def path_seed(relpath: str, noise_seed: int) -> int:
    digest = hashlib.sha256(relpath.encode("utf-8")).digest()
    return derive_seed(noise_seed, int.from_bytes(digest[:7], "little"))


def infer_maps(ckpt: Checkpoint, images: Sequence[Tensor], seeds: Sequence[int], batch_size: int = 8):
    """Anomaly maps (n, h, w) and reconstructions (n, 3, h, w) for raw [0, 1] images.

    With ``inference_draws > 1`` the maps are averaged over independent noise
    draws and the reconstruction of the first draw is returned.
    """
    maps, recons = [], []
    cfg = ckpt.noise
    with no_grad():
        for b in range(0, len(images), batch_size):
            chunk = images[b:b + batch_size]
            acc, first = None, None
            for draw in range(cfg.inference_draws):
                x0s, noisy = [], []
                for im, seed in zip(chunk, seeds[b:b + batch_size]):
                    x0, xn = inject_noise(im, cfg, seed if draw == 0 else derive_seed(seed, draw))
                    x0s.append(x0.data)
                    noisy.append(xn.data)
                x0 = Tensor(np.concatenate(x0s))
                recon = mnet_forward(make_multiscale(Tensor(np.concatenate(noisy)), ckpt.model.num_scales),
                                     ckpt.params, ckpt.model)
                m = anomaly_map_batch(x0, recon, ckpt.ssim, ckpt.loss)
                acc = m if acc is None else acc + m
                if first is None:
                    first = recon.data
            maps.append(acc / cfg.inference_draws)
            recons.append(first)
    return np.concatenate(maps), np.concatenate(recons)


def checkpoint_fingerprint(ckpt: Checkpoint) -> str:
    return config_fingerprint(ckpt.configs_dict())


def evaluate(ckpt: Checkpoint, index: DatasetIndex, image_size: int, noise_seed: int = 0,
             batch_size: int = 8) -> EvalReport:
    if not index.test:
        raise DatasetError(f"{index.category}: empty test split")
    labels = np.array([t.label for t in index.test])
    if labels.min() == labels.max():
        raise DatasetError(f"{index.category}: test split needs both normal and anomalous images")
    images, masks, seeds = [], [], []
    for item in index.test:
        images.append(load_image(item.path, image_size))
        if item.label == 1:
            if item.mask_path is None:
                raise DatasetError(f"anomalous image {item.path} has no mask")
            masks.append(load_mask(item.mask_path, image_size))
        else:
            masks.append(np.zeros((image_size, image_size), dtype=np.uint8))
        seeds.append(path_seed(index.relpath(item.path), noise_seed))
    maps, _ = infer_maps(ckpt, images, seeds, batch_size)
    scores = [image_score(m) for m in maps]
    mask_arr = np.stack(masks)
    return EvalReport(
        category=index.category,
        image_auroc=auroc(scores, labels),
        pixel_auroc=auroc(maps.reshape(-1), mask_arr.reshape(-1)),
        n_normal=int((labels == 0).sum()),
        n_anomalous=int((labels == 1).sum()),
        n_pixels_normal=int((mask_arr == 0).sum()),
        n_pixels_anomalous=int(mask_arr.sum()),
        config_hash=checkpoint_fingerprint(ckpt),
        image_scores=scores,
    )


# ------------------------------------------------------------------ pipelines

def train_from_config(cfg: RunConfig, index: DatasetIndex | None = None, on_epoch=None) -> Checkpoint:
    index = index or scan_dataset(cfg.data_root, cfg.data_category)
    images = [load_image(p, cfg.train.image_size) for p in index.train]
    return train(images, cfg.model, cfg.noise, cfg.ssim, cfg.loss, cfg.train, on_epoch=on_epoch)


def run_experiment(cfg: RunConfig, index: DatasetIndex | None = None) -> tuple[Checkpoint, EvalReport]:
    index = index or scan_dataset(cfg.data_root, cfg.data_category)
    ckpt = train_from_config(cfg, index)
    return ckpt, evaluate(ckpt, index, cfg.train.image_size, cfg.train.noise_seed)


SWEEP_COLUMNS = ("parameter", "value") + REPORT_COLUMNS


@dataclass
class SweepRow:
    parameter: str
    value: object
    report: EvalReport

    def row(self) -> list:
        v = self.value
        if isinstance(v, bool):
            v = "on" if v else "off"
        return [self.parameter, v] + self.report.row()


def validate_sweep(base: RunConfig, sweep: dict) -> list[tuple[str, object, RunConfig]]:
    """Expand a sweep into concrete configs; every key and value is checked first."""
    if not sweep:
        raise ConfigError("empty sweep")
    runs = []
    for key, values in sweep.items():
        if not values:
            raise ConfigError(f"sweep over {key} has no values")
        for v in values:
            runs.append((key, v, base.with_overrides(**{key: v})))
    return runs


def ablate(base: RunConfig, sweep: dict, index: DatasetIndex | None = None) -> list[SweepRow]:
    """Train and evaluate one run per swept value with the base seeds.

    ``{"noise.lambda": [0, 0.2, 0.3, 0.4]}`` reproduces the noise-coefficient
    table; ``{"model.residual_attention": [True, False]}`` the attention one.
    """
    runs = validate_sweep(base, sweep)
    index = index or scan_dataset(base.data_root, base.data_category)
    rows = []
    for key, value, cfg in runs:
        log.info("ablation run %s=%r", key, value)
        _, report = run_experiment(cfg, index)
        rows.append(SweepRow(key, value, report))
    return rows


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()

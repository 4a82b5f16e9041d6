"""End to end at toy scale: synthetic data, a short training run, evaluation and heatmaps.

The full desk benchmark uses the CLI defaults and takes a few minutes; this
script trims widths and epochs so it finishes in well under a minute.
"""
import tempfile
from pathlib import Path

from noise2norm.config import RunConfig
from noise2norm.data_io import RawImage, SyntheticSpec, load_image, make_synthetic_dataset, render_heatmap, save_png, \
    scan_dataset
from noise2norm.evaluation import infer_maps, path_seed, run_experiment

root = Path(tempfile.mkdtemp())
make_synthetic_dataset(root, SyntheticSpec(n_train=16, n_test_good=4, n_test_defect=6))
cfg = RunConfig(data_root=str(root)).with_overrides(**{
    "model.base_channels": 8, "train.image_size": 64, "train.max_epochs": 60, "train.lr0": 2e-3})

ckpt, report = run_experiment(cfg)
print(report.pretty())
print("best epoch", ckpt.meta["best_epoch"], "val loss", round(ckpt.meta["best_val_loss"], 4))

# heatmaps for the defective test images
index = scan_dataset(root, "synth")
items = [t for t in index.test if t.label == 1]
images = [load_image(t.path, 64) for t in items]
maps, _ = infer_maps(ckpt, images, [path_seed(index.relpath(t.path), 0) for t in items])
out = root / "heatmaps"
for t, img, m in zip(items, images, maps):
    panels = render_heatmap(m, RawImage.from_float(img.data[0].transpose(1, 2, 0)))
    save_png(out / f"{Path(t.path).stem}_overlay.png", panels.overlay.pixels)
print("overlays written to", out)

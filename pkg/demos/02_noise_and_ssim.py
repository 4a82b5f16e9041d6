"""Noise injection, multiscale inputs and the structural similarity losses on a synthetic part."""
import tempfile

import numpy as np

from noise2norm.data_io import SyntheticSpec, load_image, make_synthetic_dataset, scan_dataset
from noise2norm.msssim import SsimParams, ms_ssim_loss, mix_loss, ssim_map
from noise2norm.noise import NoiseConfig, denormalize, inject_noise, make_multiscale

root = tempfile.mkdtemp()
make_synthetic_dataset(root, SyntheticSpec(n_train=2, n_test_good=1, n_test_defect=1))
img = load_image(scan_dataset(root, "synth").train[0], 64)

# blend with Gaussian noise in raw pixel space, then move to [-1, 1]
for lam in (0.0, 0.3, 0.7):
    x0, noisy = inject_noise(img, NoiseConfig(lam=lam), seed=0)
    print(f"lambda={lam}: ms-ssim loss vs clean {ms_ssim_loss(noisy, x0).item():.4f}, "
          f"mix loss {mix_loss(noisy, x0).item():.4f}")

# the network sees a pyramid of the noisy input
print("pyramid shapes:", [t.shape for t in make_multiscale(noisy, 4)])

# denormalize undoes normalize (clamping only if asked)
raw_back = denormalize(x0, NoiseConfig())
print("round trip error:", float(np.abs(raw_back.data - img.data).max()))

# single-scale SSIM maps: small sigmas react to fine texture, large ones to shading
p = SsimParams()
for sigma in p.sigmas:
    print(f"sigma={sigma}: mean ssim {ssim_map(noisy, x0, sigma, p).data.mean():.4f}")

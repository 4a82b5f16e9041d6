"""Build the reconstruction network, count its parameters and run one forward pass."""
import numpy as np

from noise2norm.model import ModelConfig, init_model, layer_table, mnet_forward
from noise2norm.noise import make_multiscale
from noise2norm.tensor import no_grad, randn

cfg = ModelConfig()
params = init_model(cfg, seed=0)
print(f"{len(params)} tensors, {params.num_elements():,} parameters")

# parameters per block
blocks = {}
for name in params:
    key = ".".join(name.split(".")[:2]) if name.startswith(("enc", "dec")) else name.split(".")[0]
    blocks[key] = blocks.get(key, 0) + params[name].data.size
for key, n in blocks.items():
    print(f"  {key:8s} {n:>9,}")

# a 1x1 conv stands in for every residual attention block when attention is off
plain = ModelConfig(residual_attention=False)
print("attention off:", f"{init_model(plain).num_elements():,}", "parameters,",
      sum(1 for layer in layer_table(plain) if layer[0] == "conv"), "convs")

with no_grad():
    x = randn((1, 3, 64, 64), seed=1)
    out = mnet_forward(make_multiscale(x, cfg.num_scales), params, cfg)
print("output", out.shape, "std", float(np.std(out.data)))

"""A tour of the tensor core: build a small graph, backprop, check against finite differences."""
import numpy as np

from noise2norm import ops
from noise2norm.gradcheck import finite_diff_check
from noise2norm.tensor import Tensor, backward, precision, randn

# every op records itself on a thread-local tape; backward() walks it in reverse
x = Tensor(np.arange(12, dtype=np.float32).reshape(1, 3, 2, 2) / 10, requires_grad=True)
y = ops.mean(ops.square(ops.sigmoid(x)))
backward(y)
print("loss", y.item())
print("d loss / dx, channel 0:\n", x.grad[0, 0])

# pixel shuffle and unshuffle are exact inverses
z = randn((2, 16, 4, 4), seed=1)
back = ops.pixel_shuffle(ops.pixel_unshuffle(z, 2), 2)
print("unshuffle then shuffle is exact:", np.array_equal(back.data, z.data))

# gradient checks run in float64; the default working precision is float32
with precision(np.float64):
    w = randn((4, 3, 3, 3), std=0.3, seed=2)
    b = randn((1, 4, 1, 1), seed=3)
    img = randn((1, 3, 8, 8), seed=4)
    err = finite_diff_check(lambda i, w_, b_: ops.mean(ops.square(ops.conv2d(i, w_, b_, padding=1))),
                            [img, w, b], step=1e-6)
print(f"conv2d max relative gradient error: {err:.2e}")

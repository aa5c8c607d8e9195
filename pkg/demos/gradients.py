"""Checking the differentiation engine by hand.

Run:  python demos/gradients.py
"""
import numpy as np

from vfcnn.autograd import Tape, Tensor
from vfcnn.gradcheck import format_table, run_suite
from vfcnn.ops import conv3d, conv_transpose3d, sigmoid

rng = np.random.default_rng(0)

# A tape records every operation performed inside the ``with`` block.
# Backward walks it in reverse and fills ``.grad`` on the leaves.
x = Tensor(rng.standard_normal((1, 1, 6, 6, 6)), requires_grad=True)
w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)), requires_grad=True)
with Tape() as tape:
    y = sigmoid(conv3d(x, w, stride=2, padding=1))
    loss = y.sum()
tape.backward(loss)
print("recorded ops:", tape.ops())
print("d loss / d w has shape", w.grad.shape, "and norm", round(float(np.linalg.norm(w.grad)), 4))

# Transposed convolution is the adjoint of convolution with the same
# weights: <conv(x), y> == <x, conv_transpose(y)>.  The output padding
# picks the right input size when the stride does not divide evenly.
xa = rng.standard_normal((1, 2, 7, 8, 9))
wa = rng.standard_normal((3, 2, 3, 3, 3))
cx = conv3d(xa, wa, stride=2, padding=1).data
ya = rng.standard_normal(cx.shape)
xt = conv_transpose3d(ya, wa, stride=2, padding=1, output_padding=(0, 1, 0)).data
print(f"adjoint gap: {abs(np.vdot(cx, ya) - np.vdot(xa, xt)):.2e}")

# The same finite-difference suite the CLI runs as ``vfcnn gradcheck``.
print()
print(format_table(run_suite(seed=0, include_model=True)))

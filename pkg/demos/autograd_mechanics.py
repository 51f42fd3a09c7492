"""
The tape-based gradient engine
==============================

Every training step records forward ops on a tape and replays it in
reverse. This walks a miniature graph by hand and checks one gradient
against a finite difference.
"""

import numpy as np

from neuvol.autograd import Tape, backward, conv3d_op, leaky_relu_op, nsum, tanh_op

rng = np.random.default_rng(3)
x = rng.standard_normal((4, 4, 4, 2))
w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.2

# Forward: conv -> tanh -> leaky ReLU -> sum. Leaves hold the arrays; each
# op records its parents and a rule that pushes the output gradient back.
tape = Tape()
xn, wn = tape.leaf(x), tape.leaf(w)
h = conv3d_op(tape, xn, wn, None, stride=(1, 1, 1), pad=(1, 1, 1))
h = tanh_op(tape, h)
loss = nsum(tape, leaky_relu_op(tape, h))
print("loss:", float(loss.value))
print("nodes on tape:", len(tape.nodes))

# Backward seeds d(loss)/d(loss) = 1 and sweeps the tape once, reversed.
backward(tape, loss)
print("grad shapes:", xn.grad.shape, wn.grad.shape)

# Check one weight element with a central difference.
def loss_at(delta):
    w2 = w.copy()
    w2[0, 0, 1, 1, 1] += delta
    t = Tape()
    h = conv3d_op(t, t.leaf(x), t.leaf(w2), None, (1, 1, 1), (1, 1, 1))
    return float(nsum(t, leaky_relu_op(t, tanh_op(t, h))).value)

h_step = 1e-6
numeric = (loss_at(h_step) - loss_at(-h_step)) / (2 * h_step)
analytic = wn.grad[0, 0, 1, 1, 1]
print(f"analytic {analytic:.8f} vs central difference {numeric:.8f}")

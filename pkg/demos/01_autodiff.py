"""Tape autodiff in five minutes.

Builds a tiny expression, runs the backward pass, and confirms the
gradients against central finite differences -- the same machinery the
`focusface gradcheck` command runs over every op and loss.
"""

import numpy as np

from focusface.autodiff import Tape
from focusface.checks import run_all

rng = np.random.default_rng(0)

# forward: y = sum(prelu(x @ w) * x2), a little two-input graph
tape = Tape()
x = tape.leaf(rng.normal(size=(4, 3)))
w = tape.leaf(rng.normal(size=(3, 5)), trainable=True)
x2 = tape.leaf(rng.normal(size=(4, 5)))
slope = tape.leaf(np.array(0.25), trainable=True)
y = tape.sum(tape.mul(tape.prelu(tape.matmul(x, w), slope), x2))
print(f"forward value: {y.item():.6f}")

# backward: one call returns the gradient of y wrt every trainable leaf
grads = tape.backward(y)
dw = grads[w.node_id]
print(f"dy/dw norm:    {np.linalg.norm(dw):.6f}")
print(f"dy/dslope:     {float(grads[slope.node_id]):.6f}")

# spot-check dy/dw[0,0] with central differences
h = 1e-6
def value_at(delta):
    t = Tape()
    out = t.sum(t.mul(t.prelu(t.matmul(t.leaf(x.data), t.leaf(w.data + delta)),
                              t.leaf(slope.data)),
                      t.leaf(x2.data)))
    return out.item()

delta = np.zeros_like(w.data)
delta[0, 0] = h
numeric = (value_at(delta) - value_at(-delta)) / (2 * h)
print(f"dy/dw[0,0]: analytic {dw[0, 0]:.8f} numeric {numeric:.8f}")

# the registered check suite does this for every op and loss at 20 points
results = run_all(seed=0)
worst = max(r.max_rel_error for r in results)
print(f"\n{len(results)} registered checks, worst rel error {worst:.2e}, "
      f"all pass: {all(r.passed for r in results)}")

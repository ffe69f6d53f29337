"""The tape engine that powers training.

Records a small computation, pulls gradients back through it, and then runs
the same finite-difference check used across the test suite — first on a
toy function, then on a real rendering loss.
"""
import numpy as np

from growflow import diff
from growflow.core import Camera, GaussianSet
from growflow.diff import ParameterStore, Tape, backward, finite_difference_check
from growflow.splat import render, render_with_grads

# --- a scalar chain rule by hand ------------------------------------------
store = ParameterStore()
store.add("w", np.array([[0.4, -0.3], [0.7, 0.2]]))
store.add("x", np.array([1.0, -2.0]))

tape = Tape()
w = tape.leaf(store, "w")
x = tape.leaf(store, "x")
loss = diff.sigmoid(w @ x).sum()
value = backward(tape, loss)
print("loss =", round(value, 6))
print("d loss / d x =", store.grad("x").round(6))

# gradients accumulate: a second backward pass doubles them
loss.grad = None
backward(tape, loss)
print("after second backward (accumulated):", store.grad("x").round(6))


# --- against central differences -------------------------------------------
def f(s):
    t = Tape()
    ww = t.leaf(s, "w")
    xx = t.leaf(s, "x")
    return backward(t, (diff.exp(ww @ xx) * 0.1).sum())


report = finite_difference_check(f, store, step=1e-6)
print("finite differences:", report)

# --- and through the renderer ----------------------------------------------
cam = Camera(np.eye(3), np.zeros(3), 4.0, 4.0, 2.0, 2.0, 4, 4)
gs = GaussianSet(np.array([[0.1, -0.05, 2.0], [-0.2, 0.1, 2.5]]),
                 [[1, 0, 0, 0], [1, 0, 0, 0]], np.zeros((2, 3)),
                 [0.5, -0.5], [[0.9, 0.1, 0.1], [0.1, 0.2, 0.9]],
                 [True, True])
target = render(gs, cam, background=(0, 0, 0)).pixels + 0.05
loss_val, grads = render_with_grads(gs, cam, target, "l1", background=(0, 0, 0))
print("render loss:", round(loss_val, 6))
print("center gradients:\n", grads["centers"].round(5))

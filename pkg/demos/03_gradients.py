"""
Checking the backward pass
==========================

Central differences against the hand-written gradients of a tiny two-hop
model, one parameter group at a time. W_E feeds both the first hop's
evidence and the second hop's attention, so its gradient has two paths.
"""
import numpy as np

from smemvqa.scenarios import gradcheck_instance
from smemvqa.tensor import finite_diff_check

model, batch = gradcheck_instance(seed=0)
for name, t in model.tensors.items():
    err = finite_diff_check(lambda: model.loss(batch), [t], 1e-5)
    print(f"{name:5s} {str(t.shape):10s} max relative error {err:.1e}")

# the same comparison by hand for W_E, whose gradient sums both paths
model.zero_grad()
model.loss(batch).backward()
full = model["W_E"].grad.copy()
W_E = model["W_E"]
h = 1e-5
num = np.zeros_like(full)
for idx in np.ndindex(full.shape):
    orig = W_E.data[idx]
    W_E.data[idx] = orig + h
    up = float(model.loss(batch).data)
    W_E.data[idx] = orig - h
    down = float(model.loss(batch).data)
    W_E.data[idx] = orig
    num[idx] = (up - down) / (2 * h)
print("W_E analytic vs numeric, largest gap:", np.abs(full - num).max())

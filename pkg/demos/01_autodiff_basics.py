"""A quick tour of the tensor engine.

Builds a tiny computation, runs reverse-mode backward, and checks the
result against central finite differences, which is the same oracle the
test suite uses for every differentiable operation.
"""

import numpy as np

from mora import tensor as T

rng = np.random.default_rng(0)

# forward: loss = sum((x @ w)^2)
x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)

T.reset_tape()
y = T.matmul(x, w)
loss = (y * y).sum()
T.backward(loss)
print(f"loss = {loss.item():.6f}")
print(f"grad wrt x:\n{x.grad}")

# the same gradient by central finite differences
h = 1e-5
fd = np.zeros_like(x.data)
for i in range(3):
    for j in range(4):
        x.data[i, j] += h
        T.reset_tape()
        fp = (T.matmul(x, w) * T.matmul(x, w)).sum().item()
        x.data[i, j] -= 2 * h
        T.reset_tape()
        fm = (T.matmul(x, w) * T.matmul(x, w)).sum().item()
        x.data[i, j] += h
        fd[i, j] = (fp - fm) / (2 * h)
print(f"max |autodiff - finite difference| = {np.abs(x.grad - fd).max():.2e}")

# frozen tensors never accumulate gradient
w.freeze()
T.reset_tape()
T.backward(T.matmul(x, w).sum())
print(f"frozen w grad is {w.grad} (stays empty)")

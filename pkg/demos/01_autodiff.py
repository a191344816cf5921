"""
A tour of the tensor engine
===========================

Every layer of the model is built from a handful of differentiable numpy
primitives. This script exercises a few of them and checks the gradients
against central finite differences.
"""

import numpy as np

from oat import tensor as T
from oat.tensor import Tensor

# Tensors wrap numpy arrays; requires_grad marks leaves we want gradients for
x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True, dtype=np.float64)
w = Tensor([[0.5], [-1.0]], requires_grad=True, dtype=np.float64)

y = T.matmul(x, w)
print("x @ w =", y.data.ravel())

# backward() needs a scalar; the graph is released afterwards
loss = T.sum_(T.square(y))
loss.backward()
print("dL/dw =", w.grad.ravel())

# the same gradient by hand: 2 * x^T (x w)
print("by hand =", (2 * x.data.T @ (x.data @ w.data)).ravel())

# softmax and cross-entropy are the two ops the training loss leans on
logits = Tensor(np.array([[2.0, 0.5, -1.0]]), requires_grad=True, dtype=np.float64)
ce = T.cross_entropy(logits, np.array([0]))
ce.backward()
print("cross-entropy:", float(ce.data.sum()), " grad:", logits.grad.round(4))

# gradcheck perturbs each input coordinate and compares slopes
rng = np.random.default_rng(0)
a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
b = Tensor(rng.normal(size=(4, 5)), requires_grad=True, dtype=np.float64)
err = T.gradcheck(lambda: T.sum_(T.layer_norm(T.matmul(a, b))), [a, b])
print(f"layer_norm(a @ b) max relative error: {err:.1e}")

# inside no_grad nothing is recorded, which is how generation runs
with T.no_grad():
    z = T.relu(T.matmul(a, b))
print("recorded under no_grad:", z.requires_grad)

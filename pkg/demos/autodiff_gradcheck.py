# coding: utf-8
# # Tape autodiff on numpy
#
# Operations record themselves on the active tape; `backward` walks it in
# reverse. Here we check one composed expression against central differences
# and take a few Adam steps.

import numpy as np

from glta import ndgrad as nd

rng = np.random.default_rng(0)

# %% a small two-layer expression with a cross-entropy on top
X = rng.normal(size=(4, 3))
W = rng.normal(size=(3, 5))
targets = [0, 2, 4, 1]


def loss_of(w):
    h = nd.gelu(nd.matmul(nd.Tensor(X), w))
    return nd.cross_entropy(nd.layernorm(h), targets)


with nd.float64_mode():
    w = nd.parameter(W.copy())
    with nd.Tape():
        nd.backward(loss_of(w))
    analytic = w.grad

    h = 1e-6
    numeric = np.zeros_like(W)
    for idx in np.ndindex(*W.shape):
        up, down = W.copy(), W.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = (loss_of(nd.Tensor(up)).item() - loss_of(nd.Tensor(down)).item()) / (2 * h)

rel = np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric))
print("relative gradient error:", rel)

# %% Adam on the same loss, float32 as during training
w = nd.parameter(W.astype(np.float32))
opt = nd.Adam([w], lr=0.05)
for step in range(50):
    with nd.Tape():
        loss = loss_of(w)
        nd.backward(loss)
    opt.step()
    if step % 10 == 0:
        print(f"step {step:2d}  loss {loss.item():.4f}")

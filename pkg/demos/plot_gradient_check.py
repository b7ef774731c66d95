"""
Checking gradients against central differences
===============================================

The model is built on a small reverse-mode autodiff core.  Here the full
fine-tuning objective (task loss plus routing distillation) of a tiny
64-bit model is differentiated twice: once by backpropagation and once by
perturbing every parameter in turn.
"""

import numpy as np

from desmoe import numerics as nx
from desmoe.adaptive_router import init_adaptive_router
from desmoe.datagen import DomainBatch
from desmoe.moe_core import ModelConfig, MoEModel
from desmoe.trainer import des_objective

cfg = ModelConfig(vocab_size=16, model_dim=4, num_layers=1, num_experts=3, expert_hidden=4, max_seq_len=6,
                  precision=64)
model = MoEModel(cfg, seed=1)
init_adaptive_router(model.layers[0], seed=0)
rng = np.random.default_rng(0)
batch = DomainBatch(rng.integers(0, 16, (2, 6)), rng.integers(0, 16, (2, 6)), np.zeros(2, dtype=np.int64))

total, task, kd, _ = des_objective(model, batch, lam=0.5)
total.backward()
print(f"loss {total.item():.6f} = task {task.item():.6f} + blend of kd {kd.item():.6f} and task")

# the distillation term treats the router input and the frozen router as
# constants, so only the adaptive router is perturbed for it; perturb the
# adaptive router's output-layer bias, which touches both terms
b2 = model.layers[0].adaptive.b2
eps = 1e-5
numeric = np.zeros_like(b2.data)
for i in range(b2.size):
    old = b2.data[i]
    vals = []
    for sign in (1, -1):
        b2.data[i] = old + sign * eps
        with nx.no_grad():
            vals.append(des_objective(model, batch, lam=0.5)[0].item())
    b2.data[i] = old
    numeric[i] = (vals[0] - vals[1]) / (2 * eps)
print("backprop  ", b2.grad)
print("numerical ", numeric)

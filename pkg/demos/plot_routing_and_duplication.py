"""
Routing statistics, specialization masks and expert copies
===========================================================

Route a few synthetic domains through an untrained mixture-of-experts
layer, turn the routing counts into per-domain expert masks, and give each
domain a private copy of every expert it shares with another domain.
"""

import numpy as np

from desmoe import numerics as nx
from desmoe.datagen import default_domains, sample_batch
from desmoe.moe_core import ModelConfig, MoEModel, model_forward
from desmoe.specialization import (AffinityState, accumulate_affinity, ema_refresh, mean_overlap,
                                   resolve_shared_experts)

model = MoEModel(ModelConfig(), seed=0)
domains = default_domains(3)

# stream a mixed batch and count which experts each domain's tokens pick
states = [AffinityState(len(domains), m.num_experts, layer=m.index) for m in model.layers]
for step in range(10):
    batch = sample_batch(domains, step, 32, "mixed")
    with nx.no_grad():
        _, records = model_forward(model, batch.inputs)
    for st, rec in zip(states, records):
        accumulate_affinity(st, rec.selected, batch.token_domains)

np.set_printoptions(precision=2, suppress=True)
print("layer 0 affinity (rows: domains, columns: experts)")
print(states[0].affinity)

# fold the counts into the smoothed estimate and derive the masks
for st in states:
    ema_refresh(st)
print("layer 0 mask\n", states[0].mask.astype(int))
print("mean pairwise Jaccard overlap before copies:", round(mean_overlap(states[0].mask), 3))

# every expert claimed by more than one domain is copied; the copy is
# routable only for its new domain, so routing outputs do not move
ids = sample_batch(domains, 99, 8, "mixed")
with nx.no_grad():
    before, _ = model_forward(model, ids.inputs, token_domains=ids.token_domains)
for st, layer in zip(states, model.layers):
    for dup in resolve_shared_experts(st, layer, step=10):
        print(f"layer {dup.layer}: expert {dup.source} copied to {dup.copy} for domain {dup.domain}")
with nx.no_grad():
    after, _ = model_forward(model, ids.inputs, token_domains=ids.token_domains)
print("experts per layer:", [m.num_experts for m in model.layers])
print("max output change:", float(np.abs(after.data - before.data).max()))
print("mean pairwise Jaccard overlap after copies:", round(mean_overlap(states[0].mask), 3))

"""
Forgetting under three fine-tuning policies
============================================

Pretrain a small model on six synthetic tasks plus a held-out "general"
lookup task, then fine-tune on the first N tasks with full fine-tuning, a
fixed expert subset, and the dynamic expert-specialization method, and
compare how much general accuracy each keeps.  The step counts here are
cut down so the script finishes in about a minute; the acceptance tests
run the full five-seed version.
"""

import dataclasses

from desmoe.datagen import default_domains
from desmoe.moe_core import ModelConfig
from desmoe.trainer import PretrainConfig, TrainConfig, pretrain, sweep_domains

domains = default_domains(6)
base, _ = pretrain(ModelConfig(), domains, dataclasses.replace(PretrainConfig(), steps=800))

config = TrainConfig(lr=3e-3, t_update=25, mixed_batches=True)
rows = sweep_domains(base, domains, config, steps_per_domain=20, n_min=2, n_max=4, general_size=64)

print(f"{'N':>2}  {'policy':<12} {'before':>6} {'after':>6} {'retention':>9}")
for r in rows:
    print(f"{r['n']:>2}  {r['policy']:<12} {r['before']:6.3f} {r['after']:6.3f} {r['retention']:9.3f}")

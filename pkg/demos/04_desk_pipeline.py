"""
Desk-scale incremental learning
===============================

Train a small base network on the hard synthetic domain, freeze it, then add
three domains one after another. Easy domains should be answerable from the
first exit; the hard one needs the deeper blocks.

Runs in roughly fifteen minutes on one core with the default sizes. Pass a
smaller train size as the first argument for a quick look, e.g.
``python demos/04_desk_pipeline.py 300``.
"""

import sys

import numpy as np

from amdl.data import generate_synthetic, prepare_domain
from amdl.model import NetworkConfig, attach_domain, base_checksum, build_base, count_params, freeze_base
from amdl.training import TrainConfig, evaluate, train_base, train_domain

n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
sizes = (n_train, 500, 500)
schedule = TrainConfig.desk()  # 30 epochs, lr 0.1 dropping at 20 and 26

hard = prepare_domain(generate_synthetic("hard", sizes, seed=1))
base = build_base(NetworkConfig.tiny(), hard.num_classes, seed=0)
hist = train_base(base, hard, schedule)
freeze_base(base)
print(f"base network: val accuracy {hist.records[-1].accs[0]:.3f}, checksum {base.checksum[:12]}")

# %%
# Each domain gets its own adapters, batch norm and exit heads; the base
# checksum must not move.

for kind in ("easy", "medium", "hard"):
    data = prepare_domain(generate_synthetic(kind, sizes, seed=1))
    domain = attach_domain(base, data.num_classes, "mlp128", seed=1, domain=kind)
    train_domain(base, domain, data, schedule)
    acc = 100 * evaluate(base, domain, data, "test")
    params = count_params(base, domain).exit_params
    print(f"{kind:>6}: test accuracy per exit {np.round(acc, 1)}, parameters per exit {params}")

print("base untouched:", base_checksum(base) == base.checksum)

"""
Checking hand-written gradients
===============================

Every operator in ``amdl.tensor`` carries its own backward rule. Here we
compare a few of them, and then a whole adapted network, against central
differences in float64.
"""

import numpy as np

from amdl.model import NetworkConfig, attach_domain, build_base, forward_multi_exit, freeze_base
from amdl.tensor import Tensor, batchnorm, conv2d, grad_check, softmax_cross_entropy, tsum
from amdl.training import multi_exit_loss

rng = np.random.default_rng(0)

# A 3x3 convolution with a parallel 1x1 adapter folded into its centre tap.
x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
alpha = Tensor(rng.standard_normal((4, 3, 1, 1)) * 0.3, requires_grad=True)
probe = Tensor(rng.standard_normal((2, 4, 3, 3)))

err = grad_check(lambda x, w, a: tsum(conv2d(x, w, None, 2, 1, a) * probe), [x, w, alpha])
print(f"conv2d + adapter, stride 2: max relative error {err:.2e}")

# Batch norm in training mode normalizes with the batch statistics.
h = Tensor(rng.standard_normal((4, 3, 5, 5)), requires_grad=True)
gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
beta = Tensor(rng.standard_normal(3), requires_grad=True)
probe = Tensor(rng.standard_normal((4, 3, 5, 5)))
err = grad_check(lambda h, g, b: tsum(batchnorm(h, g, b, np.zeros(3), np.ones(3), True) * probe), [h, gamma, beta])
print(f"batch norm (train):        max relative error {err:.2e}")

z = Tensor(rng.standard_normal((5, 10)), requires_grad=True)
err = grad_check(lambda z: softmax_cross_entropy(z, [0, 3, 9, 1, 1]), [z])
print(f"softmax cross-entropy:     max relative error {err:.2e}")

# %%
# Now the full tiny network: frozen base, one domain's adapters, batch norm
# and three exit heads, trained with the summed loss over all exits.

base = build_base(NetworkConfig.tiny(8), 3, seed=2, dtype=np.float64)
freeze_base(base)
domain = attach_domain(base, 3, "mlp4", seed=3)
images = Tensor(rng.standard_normal((3, 3, 8, 8)))

names = ["block1.unit0.conv1.adapter.weight", "block3.unit0.bn2.gamma", "exit2.mlp0.weight", "exit3.fc.bias"]
err = grad_check(
    lambda *_: multi_exit_loss(forward_multi_exit(base, domain, images, "eval"), [0, 1, 2]),
    [domain.params[n] for n in names],
    max_elements=6,
)
print(f"tiny adapted network:      max relative error {err:.2e} over {len(names)} tensors")

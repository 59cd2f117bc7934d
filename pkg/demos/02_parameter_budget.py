"""
Where the parameters live
=========================

Counts shared, adapter and head parameters for a single residual unit and
for the 26-layer network, and shows how much of the network an early exit
needs.
"""

from amdl.model import NetworkConfig, attach_domain, build_base, count_params, freeze_base

# One residual unit with I channels: two 3x3 convolutions (plus biases) in
# the shared backbone, two 1x1 adapters plus two domain batch norms per domain.
c = 3
for I in (8, 16, 64):
    cfg = NetworkConfig(input_shape=(8, 8, 3), num_blocks=1, units_per_block=1, block_channels=(I,), stem_channels=I)
    base = build_base(cfg, 2)
    freeze_base(base)
    led = count_params(base, attach_domain(base, 2))
    shared, adapters = led.base_units["block1.unit0"], led.adapter_units["block1.unit0"]
    print(f"I={I:>3}: shared {shared:>6} = 2(c^2 I^2 + I) -> {2 * (c * c * I * I + I):>6}   "
          f"domain {adapters:>5} = 2(I^2 + 3I) -> {2 * (I * I + 3 * I):>5}   ratio {shared / adapters:.2f}")

# %%
# The 26-layer network with 64/128/256 channels and three blocks.

base = build_base(NetworkConfig.resnet26(), 10)
freeze_base(base)
led = count_params(base, attach_domain(base, 10, "mlp128"))
print()
print(f"shared backbone {led.base_shared:,}, one domain adds {led.adapter_total:,} (q = {led.q:.3f})")
for k, (frac, total) in enumerate(zip(led.fractions, led.exit_params), start=1):
    print(f"exit {k}: trunk fraction {frac:6.2%}, parameters to answer {total:>10,}")

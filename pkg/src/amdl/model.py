"""Block-partitioned residual network with per-domain parallel adapters.

The shared backbone is a stem convolution followed by ``K`` blocks of
residual units. Each residual unit is::

    h   = relu(bn1(conv1(x) + adapter1(x)))
    h   = bn2(conv2(h) + adapter2(h))
    out = relu(h + shortcut(x))

where the adapters are 1x1 convolutions owned by a domain and the batch
norm parameters belong to whoever runs the network (the base domain or an
attached domain). The first unit of every block after the first one
downsamples with stride 2 and a 1x1 projection shortcut.

Exit heads sit after every block. Exit ``K`` is always the basic head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .tensor import (
    Tensor,
    batchnorm,
    conv2d,
    global_avg_pool,
    linear,
    relu,
)

ADAPTER_INIT_SCALE = 0.1
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class NetworkConfig:
    """Shape of the shared backbone.

    ``input_shape`` is (H, W, channels). ``stem_channels`` defaults to the
    first block's width.
    """

    input_shape: tuple[int, int, int] = (32, 32, 3)
    num_blocks: int = 3
    units_per_block: int = 1
    block_channels: tuple[int, ...] = (8, 16, 32)
    kernel_size: int = 3
    stem_channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "block_channels", tuple(int(v) for v in self.block_channels))
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.units_per_block < 1:
            raise ValueError("units_per_block must be >= 1")
        if len(self.block_channels) != self.num_blocks:
            raise ValueError(
                f"block_channels has {len(self.block_channels)} entries for {self.num_blocks} blocks"
            )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError("input_shape must be (H, W, C) with positive extents")

    @property
    def num_exits(self) -> int:
        return self.num_blocks

    @property
    def stem_width(self) -> int:
        return self.stem_channels or self.block_channels[0]

    @classmethod
    def resnet26(cls) -> "NetworkConfig":
        return cls(input_shape=(72, 72, 3), num_blocks=3, units_per_block=4, block_channels=(64, 128, 256))

    @classmethod
    def tiny(cls, size: int = 32) -> "NetworkConfig":
        return cls(input_shape=(size, size, 3), num_blocks=3, units_per_block=1, block_channels=(8, 16, 32))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["block_channels"] = list(self.block_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class UnitSpec:
    name: str
    block: int
    in_channels: int
    out_channels: int
    stride: int

    @property
    def projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


def unit_specs(config: NetworkConfig) -> list[UnitSpec]:
    units = []
    prev = config.stem_width
    for k, ch in enumerate(config.block_channels, start=1):
        for u in range(config.units_per_block):
            stride = 2 if (k > 1 and u == 0) else 1
            units.append(UnitSpec(f"block{k}.unit{u}", k, prev, ch, stride))
            prev = ch
    return units


@dataclass(frozen=True)
class ExitTopology:
    """Exit head variant: ``basic``, ``mlp`` (dense widths) or ``conv1x1``."""

    kind: str = "basic"
    widths: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("basic", "mlp", "conv1x1"):
            raise ValueError(f"unknown exit topology {self.kind!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind == "mlp" and not self.widths:
            raise ValueError("mlp exit topology needs at least one width")
        if any(w < 1 for w in self.widths):
            raise ValueError("mlp widths must be positive")
        if self.kind != "mlp" and self.widths:
            raise ValueError(f"{self.kind} exit topology takes no widths")

    @property
    def tag(self) -> str:
        if self.kind == "mlp":
            return "mlp" + "x".join(str(w) for w in self.widths)
        return self.kind

    @classmethod
    def parse(cls, tag: "str | ExitTopology") -> "ExitTopology":
        """Parse ``basic``, ``conv1x1``, ``mlp128`` or ``mlp128x128``."""
        if isinstance(tag, ExitTopology):
            return tag
        tag = tag.strip().lower()
        if tag in ("basic", "conv1x1"):
            return cls(tag)
        if tag.startswith("mlp") and len(tag) > 3:
            try:
                widths = tuple(int(w) for w in tag[3:].split("x"))
            except ValueError:
                raise ValueError(f"bad exit topology tag {tag!r}") from None
            return cls("mlp", widths)
        raise ValueError(f"bad exit topology tag {tag!r}")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _conv_init(rng, out_ch, in_ch, k, dtype, scale=1.0) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * k * k)) * scale
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype)


def _add_conv(params, rng, name, out_ch, in_ch, k, dtype, scale=1.0):
    params[f"{name}.weight"] = Tensor(_conv_init(rng, out_ch, in_ch, k, dtype, scale), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)


def _add_bn(params, buffers, name, ch, dtype):
    params[f"{name}.gamma"] = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
    buffers[f"{name}.running_mean"] = np.zeros(ch, dtype=dtype)
    buffers[f"{name}.running_var"] = np.ones(ch, dtype=dtype)


def _add_dense(params, rng, name, fan_in, fan_out, dtype, gain=2.0):
    w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
    params[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)


def _bn_names(config: NetworkConfig) -> list[tuple[str, int]]:
    names = [("stem.bn", config.stem_width)]
    for u in unit_specs(config):
        names += [(f"{u.name}.bn1", u.out_channels), (f"{u.name}.bn2", u.out_channels)]
    return names


def _add_head(params, buffers, rng, prefix, channels, num_classes, topology, dtype):
    _add_bn(params, buffers, f"{prefix}.bn", channels, dtype)
    feat = channels
    if topology.kind == "conv1x1":
        _add_conv(params, rng, f"{prefix}.conv", channels, channels, 1, dtype)
    for j, width in enumerate(topology.widths):
        _add_dense(params, rng, f"{prefix}.mlp{j}", feat, width, dtype)
        feat = width
    _add_dense(params, rng, f"{prefix}.fc", feat, num_classes, dtype, gain=1.0)


def scope_of(name: str) -> tuple[str, int]:
    """Map a parameter name to ``("block", k)``, ``("exit", k)`` or ``("head", 0)``.

    The stem counts as part of block 1.
    """
    head = name.split(".", 1)[0]
    if head == "stem":
        return ("block", 1)
    if head.startswith("block"):
        return ("block", int(head[5:]))
    if head.startswith("exit"):
        return ("exit", int(head[4:]))
    if head == "head":
        return ("head", 0)
    raise KeyError(name)


class BaseNetwork:
    """Shared backbone plus the base domain's own batch norm and classifier."""

    def __init__(self, config: NetworkConfig, num_classes: int, params: dict, buffers: dict):
        self.config = config
        self.num_classes = num_classes
        self.params: dict[str, Tensor] = params
        self.buffers: dict[str, np.ndarray] = buffers
        self.frozen = False
        self.checksum: str | None = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def shared_names(self) -> list[str]:
        """Convolution weights and biases shared by every domain."""
        return [n for n in self.params if ".conv" in n or ".shortcut" in n]

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        training = _training(mode)
        outs = _trunk(self, self, {}, x, [training] * self.config.num_blocks, self.config.num_blocks)
        return _head(self, "head", ExitTopology(), outs[-1], training)

    __call__ = forward

    def astype(self, dtype) -> "BaseNetwork":
        """Copy of the network with every tensor cast to ``dtype``."""
        params = {n: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad) for n, p in self.params.items()}
        buffers = {n: b.astype(dtype) for n, b in self.buffers.items()}
        out = BaseNetwork(self.config, self.num_classes, params, buffers)
        out.frozen, out.checksum = self.frozen, self.checksum
        return out


class DomainAdapterSet:
    """Everything a single domain adds on top of the frozen base.

    Holds the 1x1 adapters (when ``adapt``), a full set of domain batch
    norm parameters and running statistics, and the exit heads with their
    classifiers.
    """

    def __init__(
        self,
        domain: str,
        config: NetworkConfig,
        num_classes: int,
        topology: ExitTopology,
        adapt: bool,
        params: dict,
        buffers: dict,
    ):
        self.domain = domain
        self.config = config
        self.num_classes = num_classes
        self.topology = topology
        self.adapt = adapt
        self.params: dict[str, Tensor] = params
        self.buffers: dict[str, np.ndarray] = buffers
        self.num_blocks = config.num_blocks

    @property
    def base_config_hash(self) -> str:
        return self.config.config_hash()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_in_scope(self, kind: str, k: int) -> list[str]:
        return [n for n in self.params if scope_of(n) == (kind, k)]

    def adapter_names(self) -> list[str]:
        return [n for n in self.params if ".adapter." in n]

    def exit_topology(self, k: int) -> ExitTopology:
        return ExitTopology() if k == self.config.num_exits else self.topology

    def astype(self, dtype) -> "DomainAdapterSet":
        params = {n: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad) for n, p in self.params.items()}
        buffers = {n: b.astype(dtype) for n, b in self.buffers.items()}
        out = DomainAdapterSet(self.domain, self.config, self.num_classes, self.topology, self.adapt, params, buffers)
        out.num_blocks = self.num_blocks
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Snapshot of all parameter and buffer values."""
        snap = {n: p.data.copy() for n, p in self.params.items()}
        snap.update({n: b.copy() for n, b in self.buffers.items()})
        return snap

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.data[...] = state[n]
        for n, b in self.buffers.items():
            b[...] = state[n]


# ---------------------------------------------------------------------------
# building


def build_base(config: NetworkConfig, num_classes: int, seed: int = 0, dtype=np.float32) -> BaseNetwork:
    """He-initialized backbone with batch norm at gamma=1, beta=0 and a classifier."""
    rng = _rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    c, k = config.input_shape[2], config.kernel_size
    _add_conv(params, rng, "stem.conv", config.stem_width, c, k, dtype)
    _add_bn(params, buffers, "stem.bn", config.stem_width, dtype)
    for u in unit_specs(config):
        _add_conv(params, rng, f"{u.name}.conv1", u.out_channels, u.in_channels, k, dtype)
        _add_bn(params, buffers, f"{u.name}.bn1", u.out_channels, dtype)
        _add_conv(params, rng, f"{u.name}.conv2", u.out_channels, u.out_channels, k, dtype)
        _add_bn(params, buffers, f"{u.name}.bn2", u.out_channels, dtype)
        if u.projection:
            _add_conv(params, rng, f"{u.name}.shortcut", u.out_channels, u.in_channels, 1, dtype)
    _add_head(params, buffers, rng, "head", config.block_channels[-1], num_classes, ExitTopology(), dtype)
    return BaseNetwork(config, num_classes, params, buffers)


def attach_domain(
    base: BaseNetwork,
    num_classes: int,
    exit_topology: "ExitTopology | str" = "basic",
    adapt: bool = True,
    seed: int = 0,
    domain: str = "domain",
    require_frozen: bool = True,
) -> DomainAdapterSet:
    """Create a fresh adapter set for a new domain.

    With ``adapt=False`` only batch norm, exit heads and classifiers are
    learnable (the no-adapter baseline).
    """
    if require_frozen and not base.frozen:
        raise ValueError("freeze the base network before attaching domains")
    topology = ExitTopology.parse(exit_topology)
    config = base.config
    dtype = base.params["stem.conv.weight"].dtype
    rng = _rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, ch in _bn_names(config):
        _add_bn(params, buffers, name, ch, dtype)
    if adapt:
        for u in unit_specs(config):
            _add_conv(params, rng, f"{u.name}.conv1.adapter", u.out_channels, u.in_channels, 1, dtype, ADAPTER_INIT_SCALE)
            _add_conv(params, rng, f"{u.name}.conv2.adapter", u.out_channels, u.out_channels, 1, dtype, ADAPTER_INIT_SCALE)
    for k, ch in enumerate(config.block_channels, start=1):
        topo = ExitTopology() if k == config.num_exits else topology
        _add_head(params, buffers, rng, f"exit{k}", ch, num_classes, topo, dtype)
    return DomainAdapterSet(domain, config, num_classes, topology, adapt, params, buffers)


def init_from_base(base: BaseNetwork, adapters: DomainAdapterSet) -> None:
    """Copy the base domain's batch norm (and, if shapes allow, classifier) into a domain."""
    K = base.config.num_exits
    mapping = {name: name for name, _ in _bn_names(base.config)}
    mapping["head.bn"] = f"exit{K}.bn"
    for src, dst in mapping.items():
        for suffix in ("gamma", "beta"):
            adapters.params[f"{dst}.{suffix}"].data[...] = base.params[f"{src}.{suffix}"].data
        for suffix in ("running_mean", "running_var"):
            adapters.buffers[f"{dst}.{suffix}"][...] = base.buffers[f"{src}.{suffix}"]
    if base.num_classes == adapters.num_classes:
        for suffix in ("weight", "bias"):
            adapters.params[f"exit{K}.fc.{suffix}"].data[...] = base.params[f"head.fc.{suffix}"].data


# ---------------------------------------------------------------------------
# forward


def _training(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def parallel_conv(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    alpha: Tensor | None = None,
    alpha_bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Frozen c x c convolution plus a parallel 1x1 adapter, before activation.

    Same-size padding is required so both branches share one output grid;
    the adapter is then folded into the centre tap of the kernel and both
    branches run as a single convolution.
    """
    if alpha is None:
        return conv2d(x, weight, bias, stride, pad)
    if alpha.shape[2:] != (1, 1) or alpha.shape[:2] != weight.shape[:2]:
        raise ValueError(f"adapter shape {alpha.shape} does not match convolution {weight.shape}")
    kh, kw = weight.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0 or pad != kh // 2 or kh != kw:
        raise ValueError("a parallel adapter needs an odd square kernel with same-size padding")
    return conv2d(x, weight, bias, stride, pad, center=alpha, center_bias=alpha_bias)


def adapted_conv(x, weight, bias, alpha=None, alpha_bias=None, stride=1, pad=None, activation=relu) -> Tensor:
    """``activation(W * x + alpha * x)``; ``pad`` defaults to same-size padding."""
    if pad is None:
        pad = (weight.shape[2] - 1) // 2
    return activation(parallel_conv(x, weight, bias, alpha, alpha_bias, stride, pad))


def _bn(owner, name: str, h: Tensor, training: bool) -> Tensor:
    return batchnorm(
        h,
        owner.params[f"{name}.gamma"],
        owner.params[f"{name}.beta"],
        owner.buffers[f"{name}.running_mean"],
        owner.buffers[f"{name}.running_var"],
        training,
        BN_MOMENTUM,
        BN_EPS,
    )


def _trunk(base: BaseNetwork, bn_owner, adapter_params: dict, x: Tensor, block_training: Sequence[bool], upto: int) -> list[Tensor]:
    cfg = base.config
    if x.data.ndim != 4 or x.shape[1:] != (cfg.input_shape[2], cfg.input_shape[0], cfg.input_shape[1]):
        raise ValueError(
            f"input shape {x.shape} does not match (N, {cfg.input_shape[2]}, {cfg.input_shape[0]}, {cfg.input_shape[1]})"
        )
    p = base.params
    pad = (cfg.kernel_size - 1) // 2

    def conv(name, h, stride, padding):
        return parallel_conv(
            h,
            p[f"{name}.weight"],
            p[f"{name}.bias"],
            adapter_params.get(f"{name}.adapter.weight"),
            adapter_params.get(f"{name}.adapter.bias"),
            stride,
            padding,
        )

    h = relu(_bn(bn_owner, "stem.bn", conv("stem.conv", x, 1, pad), block_training[0]))
    outs = []
    units = unit_specs(cfg)
    for k in range(1, upto + 1):
        tr = block_training[k - 1]
        for u in (u for u in units if u.block == k):
            z = relu(_bn(bn_owner, f"{u.name}.bn1", conv(f"{u.name}.conv1", h, u.stride, pad), tr))
            z = _bn(bn_owner, f"{u.name}.bn2", conv(f"{u.name}.conv2", z, 1, pad), tr)
            sc = conv2d(h, p[f"{u.name}.shortcut.weight"], p[f"{u.name}.shortcut.bias"], u.stride, 0) if u.projection else h
            h = relu(z + sc)
        outs.append(h)
    return outs


def _head(owner, prefix: str, topology: ExitTopology, h: Tensor, training: bool) -> Tensor:
    p = owner.params
    h = relu(_bn(owner, f"{prefix}.bn", h, training))
    if topology.kind == "conv1x1":
        h = relu(conv2d(h, p[f"{prefix}.conv.weight"], p[f"{prefix}.conv.bias"]))
    h = global_avg_pool(h)
    for j in range(len(topology.widths)):
        h = relu(linear(h, p[f"{prefix}.mlp{j}.weight"], p[f"{prefix}.mlp{j}.bias"]))
    return linear(h, p[f"{prefix}.fc.weight"], p[f"{prefix}.fc.bias"])


def forward_multi_exit(
    base: BaseNetwork,
    adapters: DomainAdapterSet,
    x: Tensor,
    mode: str = "train",
    exits: Sequence[int] | None = None,
    block_modes: Sequence[str] | None = None,
) -> list[Tensor]:
    """Logits at every exit (or only at ``exits``, 1-based), in exit order.

    ``block_modes`` overrides ``mode`` per block; the heads follow the mode
    of the block they read from.
    """
    K = base.config.num_exits
    if adapters.config != base.config:
        raise ValueError("adapter set was built for a different network config")
    training = _training(mode)
    modes = [training] * K if block_modes is None else [_training(m) for m in block_modes]
    wanted = list(range(1, K + 1)) if exits is None else list(exits)
    if not wanted or min(wanted) < 1 or max(wanted) > K:
        raise ValueError(f"exit indices must lie in 1..{K}")
    outs = _trunk(base, adapters, adapters.params, x, modes, max(wanted))
    return [_head(adapters, f"exit{k}", adapters.exit_topology(k), outs[k - 1], modes[k - 1]) for k in wanted]


# ---------------------------------------------------------------------------
# freezing


def base_checksum(base: BaseNetwork) -> str:
    h = hashlib.sha256()
    for name in sorted(base.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(base.params[name].data).tobytes())
    for name in sorted(base.buffers):
        h.update(name.encode())
        h.update(np.ascontiguousarray(base.buffers[name]).tobytes())
    return h.hexdigest()


def freeze_base(base: BaseNetwork) -> None:
    """Stop gradients into every base tensor and remember its checksum."""
    for p in base.params.values():
        p.requires_grad = False
        p.grad = None
    base.frozen = True
    base.checksum = base_checksum(base)


# ---------------------------------------------------------------------------
# parameter accounting


def _size(t: Tensor) -> int:
    return int(t.data.size)


@dataclass
class ParamLedger:
    """Parameter counts by scope, taken from live tensors.

    ``cumulative[k-1]`` is the number of shared backbone parameters plus
    domain parameters (adapters and batch norm) needed to run the network
    up to block ``k``; heads are listed separately in ``heads`` and
    ``classifiers``.
    """

    num_blocks: int
    base_total: int = 0
    base_shared: int = 0
    base_stem: int = 0
    base_blocks: list[int] = field(default_factory=list)
    base_units: dict[str, int] = field(default_factory=dict)
    base_private: int = 0
    adapter_total: int = 0
    adapter_stem: int = 0
    adapter_blocks: list[int] = field(default_factory=list)
    adapter_units: dict[str, int] = field(default_factory=dict)
    heads: list[int] = field(default_factory=list)
    classifiers: list[int] = field(default_factory=list)
    cumulative: list[int] = field(default_factory=list)

    @property
    def fractions(self) -> list[float]:
        return [c / self.cumulative[-1] for c in self.cumulative]

    @property
    def exit_params(self) -> list[int]:
        """Everything needed to answer from exit k: trunk up to k, head k, classifier k."""
        return [c + h + f for c, h, f in zip(self.cumulative, self.heads, self.classifiers)]

    @property
    def q(self) -> float:
        """Adapter-to-shared-backbone parameter ratio."""
        return self.adapter_total / self.base_shared if self.base_shared else 0.0

    def unit_ratio(self, unit: str) -> float:
        """Shared-to-adapter ratio for one residual unit."""
        return self.base_units[unit] / self.adapter_units[unit]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = self.fractions
        d["exit_params"] = self.exit_params
        d["q"] = self.q
        return d


def count_params(base: BaseNetwork, adapters: DomainAdapterSet | None = None) -> ParamLedger:
    """Count live parameters of the backbone and, optionally, one domain."""
    cfg = base.config
    K = cfg.num_blocks
    led = ParamLedger(num_blocks=K, base_blocks=[0] * K, adapter_blocks=[0] * K, heads=[0] * K, classifiers=[0] * K)
    shared = set(base.shared_names())
    for name, t in base.params.items():
        n = _size(t)
        led.base_total += n
        if name not in shared:
            led.base_private += n
            continue
        led.base_shared += n
        if name.startswith("stem."):
            led.base_stem += n
        else:
            kind, k = scope_of(name)
            led.base_blocks[k - 1] += n
            unit = name.rsplit(".", 2)[0]
            led.base_units[unit] = led.base_units.get(unit, 0) + n

    if adapters is not None:
        for name, t in adapters.params.items():
            n = _size(t)
            kind, k = scope_of(name)
            if kind == "exit":
                if ".fc." in name:
                    led.classifiers[k - 1] += n
                else:
                    led.heads[k - 1] += n
                continue
            led.adapter_total += n
            if name.startswith("stem."):
                led.adapter_stem += n
            else:
                led.adapter_blocks[k - 1] += n
                unit = name.split(".")[0] + "." + name.split(".")[1]
                led.adapter_units[unit] = led.adapter_units.get(unit, 0) + n

    run = led.base_stem + led.adapter_stem
    for k in range(K):
        run += led.base_blocks[k] + led.adapter_blocks[k]
        led.cumulative.append(run)
    return led


def iter_tensors(obj) -> Iterator[tuple[str, np.ndarray]]:
    """All named parameter and buffer arrays of a base network or adapter set, sorted by name."""
    table = {n: p.data for n, p in obj.params.items()}
    table.update(obj.buffers)
    for name in sorted(table):
        yield name, table[name]

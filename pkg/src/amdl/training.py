"""Multi-exit training of domain parameters on a frozen base.

Strategies:

* ``joint`` -- one optimizer over every domain parameter, loss is the sum
  of the per-exit cross entropies.
* ``blockwise`` -- stage ``s`` trains only block ``s`` (adapters and batch
  norm) and the exit-``s`` head on the exit-``s`` loss; earlier stages stay
  frozen and run in eval mode.
* ``exits_only`` -- no adapters; batch norm, heads and classifiers only.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import BatchStream, DomainData
from .errors import NumericError
from .model import BaseNetwork, DomainAdapterSet, base_checksum, forward_multi_exit
from .tensor import OptimState, Tensor, backward, no_grad, sgd_step, softmax_cross_entropy

log = logging.getLogger(__name__)

STRATEGIES = ("joint", "blockwise", "exits_only")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    milestones: tuple[int, ...] = (20, 26)
    lr: float = 0.1
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float | None = None  # None: pick from the train-set size
    strategy: str = "joint"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.milestones and (self.milestones[0] < 0 or self.milestones[-1] >= self.epochs):
            raise ValueError("milestones must lie in [0, epochs)")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        """120 epochs, lr 0.1 -> 0.01 at 80 -> 0.001 at 100, batch 128."""
        return cls(**{"epochs": 120, "milestones": (80, 100), "batch_size": 128, **kw})

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """The same schedule compressed to 30 epochs (milestones 20, 26), batch 32."""
        return cls(**{"epochs": 30, "milestones": (20, 26), "batch_size": 32, **kw})


def lr_at(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    drops = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * config.lr_decay**drops


def weight_decay_for(train_size: int) -> float:
    """Stronger L2 for smaller training sets."""
    if train_size <= 0:
        raise ValueError("train_size must be positive")
    if train_size < 5_000:
        return 5e-3
    if train_size < 50_000:
        return 5e-4
    return 1e-4


def multi_exit_loss(logits: list[Tensor], labels) -> Tensor:
    """Unweighted sum of the per-exit cross entropies.

    Block ``k`` only feeds exits ``k..K``, so its parameters receive exactly
    the gradient of the exit losses from ``k`` onwards.
    """
    if not logits:
        raise ValueError("need at least one exit")
    total = softmax_cross_entropy(logits[0], labels)
    for z in logits[1:]:
        total = total + softmax_cross_entropy(z, labels)
    return total


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: list[float]
    accs: list[float]


@dataclass
class TrainHistory:
    num_exits: int
    records: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0
    best_state: dict | None = field(default=None, repr=False, compare=False)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def header(self) -> list[str]:
        K = self.num_exits
        return ["epoch", "lr"] + [f"loss_e{k}" for k in range(1, K + 1)] + [f"acc_e{k}" for k in range(1, K + 1)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr)] + [repr(v) for v in r.losses] + [repr(v) for v in r.accs])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        K = (len(header) - 2) // 2
        if header[:2] != ["epoch", "lr"] or len(header) != 2 + 2 * K:
            raise ValueError("not a training history CSV")
        hist = cls(K)
        for row in body:
            vals = [float(v) for v in row[1:]]
            hist.records.append(EpochRecord(int(row[0]), vals[0], vals[1 : 1 + K], vals[1 + K :]))
        return hist

    @classmethod
    def load_csv(cls, path) -> "TrainHistory":
        with open(path) as fh:
            return cls.from_csv(fh.read())


# ---------------------------------------------------------------------------
# evaluation


def exit_accuracies(logits: list[np.ndarray], labels: np.ndarray) -> np.ndarray:
    """Top-1 accuracy per exit."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty split")
    return np.array([float((np.asarray(z).argmax(axis=1) == labels).mean()) for z in logits])


def _predict(fn, stream: BatchStream, batch_size: int) -> list[np.ndarray]:
    chunks = None
    with no_grad():
        for x, _ in stream.batches(batch_size):
            outs = [z.data for z in fn(x)]
            if chunks is None:
                chunks = [[] for _ in outs]
            for c, o in zip(chunks, outs):
                c.append(o)
    return [np.concatenate(c) for c in chunks]


def evaluate(base: BaseNetwork, adapters: DomainAdapterSet | None, data: DomainData, split: str = "val", batch_size: int = 256) -> np.ndarray:
    """Per-exit top-1 accuracy on a whole split, in eval mode.

    With ``adapters=None`` the base network's own classifier is scored.
    """
    stream = data.split(split)
    if len(stream) == 0:
        raise ValueError("cannot evaluate an empty split")
    if adapters is None:
        logits = _predict(lambda x: [base.forward(x, "eval")], stream, batch_size)
    else:
        logits = _predict(lambda x: forward_multi_exit(base, adapters, x, "eval"), stream, batch_size)
    return exit_accuracies(logits, stream.labels)


# ---------------------------------------------------------------------------
# training loops


def _cast(stream_x: np.ndarray, dtype) -> np.ndarray:
    return stream_x if stream_x.dtype == dtype else stream_x.astype(dtype)


def _run_epochs(
    config: TrainConfig,
    data: DomainData,
    params: list[Tensor],
    weight_decay: float,
    step_fn,
    eval_fn,
    history: TrainHistory,
    epoch_offset: int,
    best=None,
) -> None:
    state = OptimState(lr=config.lr, momentum=config.momentum, weight_decay=weight_decay)
    dtype = np.dtype(config.dtype)
    for epoch in range(config.epochs):
        state.lr = lr_at(epoch, config)
        sums = None
        seen = 0
        batch_seed = np.random.SeedSequence([config.seed, 1, epoch_offset + epoch]).generate_state(1)[0]
        for b, (x, y) in enumerate(data.train.batches(config.batch_size, seed=int(batch_seed))):
            x = Tensor(_cast(x.data, dtype))
            where = f"epoch {epoch_offset + epoch} batch {b}"
            try:
                losses = step_fn(x, y)
                loss = losses[0]
                for extra in losses[1:]:
                    loss = loss + extra
                if not np.isfinite(loss.data):
                    raise NumericError("non-finite loss")
                backward(loss)
                sgd_step(params, state)
            except NumericError as exc:
                raise NumericError(f"{exc} at {where}") from exc
            batch = np.array([float(v.data) for v in losses]) * len(y)
            sums = batch if sums is None else sums + batch
            seen += len(y)
        try:
            accs = eval_fn()
        except NumericError as exc:
            raise NumericError(f"{exc} at epoch {epoch_offset + epoch} evaluation") from exc
        loss_row = [float(v) for v in sums / seen]
        history.records.append(EpochRecord(epoch_offset + epoch, state.lr, loss_row, [float(a) for a in accs]))
        log.info("epoch %d lr %.4g loss %s acc %s", epoch_offset + epoch, state.lr, loss_row, accs)
        if best is not None:
            best(epoch_offset + epoch, accs)


def _require_finite_params(params):
    for p in params:
        if not np.isfinite(p.data).all():
            raise NumericError("non-finite parameter after training")


def train_base(base: BaseNetwork, data: DomainData, config: TrainConfig) -> TrainHistory:
    """Single-exit training of every base parameter. Freezing afterwards is up to the caller."""
    if base.frozen:
        raise ValueError("base network is frozen; refusing to train it")
    params = base.parameters()
    for p in params:
        p.requires_grad = True
    wd = config.weight_decay if config.weight_decay is not None else weight_decay_for(len(data.train))
    hist = TrainHistory(1)
    t0 = time.perf_counter()

    def step(x, y):
        return [softmax_cross_entropy(base.forward(x, "train"), y)]

    _run_epochs(config, data, params, wd, step, lambda: evaluate(base, None, data, "val"), hist, 0)
    _require_finite_params(params)
    hist.wall_time = time.perf_counter() - t0
    return hist


def trainable_params(adapters: DomainAdapterSet, strategy: str, stage: int | None = None) -> list[Tensor]:
    """Domain parameters an optimizer may touch under ``strategy`` (and blockwise ``stage``)."""
    if strategy == "blockwise":
        names = adapters.named_in_scope("block", stage) + adapters.named_in_scope("exit", stage)
    else:
        names = list(adapters.params)
    return [adapters.params[n] for n in names]


def train_domain(base: BaseNetwork, adapters: DomainAdapterSet, data: DomainData, config: TrainConfig) -> TrainHistory:
    """Train one domain's parameters against a frozen base.

    Returns per-epoch history; ``history.best_state`` holds the parameters
    from the epoch with the highest mean val accuracy over exits.
    For ``blockwise`` the schedule runs once per stage and the history has
    ``K * epochs`` rows; exits not trained in a stage report ``nan`` loss.
    """
    if not base.frozen or any(p.requires_grad for p in base.params.values()):
        raise ValueError("base network must be frozen before training a domain")
    if base.checksum is not None and base_checksum(base) != base.checksum:
        raise ValueError("base network changed since it was frozen")
    if config.strategy == "exits_only" and adapters.adapt:
        raise ValueError("exits_only training expects an adapter set built with adapt=False")
    if data.num_classes != adapters.num_classes:
        raise ValueError("dataset class count does not match the adapter set")

    K = base.config.num_exits
    dtype = np.dtype(config.dtype)
    wd = config.weight_decay if config.weight_decay is not None else weight_decay_for(len(data.train))
    hist = TrainHistory(K)
    t0 = time.perf_counter()
    best_score = [-1.0]

    def eval_fn():
        return evaluate(base, adapters, data, "val")

    def track_best(epoch, accs):
        score = float(np.mean(accs))
        if score > best_score[0]:
            best_score[0] = score
            hist.best_state = adapters.state()
            hist.best_epoch = epoch

    for p in adapters.parameters():
        p.requires_grad = True

    if config.strategy in ("joint", "exits_only"):
        params = trainable_params(adapters, config.strategy)

        def step(x, y):
            logits = forward_multi_exit(base, adapters, x, "train")
            return [softmax_cross_entropy(z, y) for z in logits]

        _run_epochs(config, data, params, wd, step, eval_fn, hist, 0, best=track_best)
    else:
        for stage in range(1, K + 1):
            params = trainable_params(adapters, "blockwise", stage)
            keep = {id(p) for p in params}
            for p in adapters.parameters():
                p.requires_grad = id(p) in keep
            modes = ["eval"] * (stage - 1) + ["train"] * (K - stage + 1)

            def step(x, y, stage=stage, modes=modes):
                (z,) = forward_multi_exit(base, adapters, x, "train", exits=[stage], block_modes=modes)
                return [softmax_cross_entropy(z, y)]

            stage_hist = TrainHistory(K)
            _run_epochs(config, data, params, wd, step, eval_fn, stage_hist, (stage - 1) * config.epochs, best=track_best)
            for rec in stage_hist.records:
                row = [float("nan")] * K
                row[stage - 1] = rec.losses[0]
                rec.losses = row
            hist.records.extend(stage_hist.records)
        for p in adapters.parameters():
            p.requires_grad = True

    _require_finite_params(adapters.parameters())
    hist.wall_time = time.perf_counter() - t0
    return hist


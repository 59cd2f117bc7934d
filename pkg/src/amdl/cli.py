"""Command line entry point: ``amdl <command> [flags]``.

Every command accepts ``--config FILE``, a line-oriented ``key = value``
file whose keys are the long flag names with dashes replaced by
underscores. Flags given on the command line win over the file.

Exit codes: 0 success, 2 bad arguments or configuration, 3 I/O or file
format failure, 4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, data, exit_policy, model, training
from .errors import FormatError, NumericError
from .tensor import thread_limit

log = logging.getLogger("amdl")

RESULT_COLUMNS = ("domain", "config", "exit", "accuracy", "params")


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


class IOFailure(Exception):
    """Missing input or unreadable file (exit code 3)."""


def derive_seed(seed: int, label: str) -> int:
    """Sub-seed for one component: ``SeedSequence([seed, crc32(label)])``, first 32-bit word."""
    return int(np.random.SeedSequence([seed, zlib.crc32(label.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _domain_map(text: str) -> dict[str, str]:
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, topo = item.partition(":")
        out[name.strip()] = topo.strip() or "basic"
    return out


# key -> (parser, default)
CONFIG_KEYS = {
    "preset": (str, "tiny"),
    "image_size": (int, None),
    "epochs": (int, 30),
    "milestones": (_int_list, None),
    "batch_size": (int, 32),
    "lr": (float, 0.1),
    "momentum": (float, 0.9),
    "weight_decay": (float, None),
    "strategy": (str, "joint"),
    "exit_topology": (str, None),
    "seed": (int, 0),
    "threshold": (float, 3.5),
    "domains": (_domain_map, {}),
    "domain": (str, None),
    "data": (str, None),
    "base": (str, None),
    "bundle": (str, None),
    "init_bundle": (str, None),
    "out": (str, None),
    "history": (str, None),
    "results": (str, None),
    "split": (str, "val"),
    "csv": (str, None),
    "json": (str, None),
    "fixture": (str, None),
    "kind": (str, None),
    "n": (str, None),
    "size": (int, 32),
}


@dataclass
class RunConfig:
    """Merged settings for one command: defaults < config file < flags."""

    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    @staticmethod
    def parse_file(path) -> dict:
        out = {}
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise IOFailure(f"cannot read config {path}: {exc}") from None
        for lineno, raw in enumerate(lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            if key not in CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = CONFIG_KEYS[key][0](value.strip())
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {value.strip()!r}") from None
        return out

    @classmethod
    def build(cls, args: argparse.Namespace) -> "RunConfig":
        values = {k: d for k, (_, d) in CONFIG_KEYS.items()}
        if getattr(args, "config", None):
            values.update(cls.parse_file(args.config))
        for key, val in vars(args).items():
            if key in CONFIG_KEYS and val is not None:
                values[key] = val
        cfg = cls(values)
        if not 0.0 <= cfg.threshold <= 100.0:
            raise UsageError("threshold T must lie in [0, 100]")
        return cfg

    def network_config(self) -> model.NetworkConfig:
        if self.preset == "tiny":
            return model.NetworkConfig.tiny(self.image_size or 32)
        if self.preset == "resnet26":
            net = model.NetworkConfig.resnet26()
            if self.image_size:
                net = model.NetworkConfig(**{**net.to_dict(), "input_shape": (self.image_size, self.image_size, 3)})
            return net
        raise UsageError(f"unknown preset {self.preset!r} (tiny, resnet26)")

    def train_config(self, strategy: str | None = None, seed_label: str = "train") -> training.TrainConfig:
        epochs = self.epochs
        milestones = self.milestones
        if milestones is None:
            # the 120/80/100 schedule scaled to the epoch budget; 30 epochs -> 20, 26
            milestones = tuple(sorted({m for m in (round(epochs * 2 / 3), round(epochs * 13 / 15)) if 0 < m < epochs}))
        try:
            return training.TrainConfig(
                epochs=epochs,
                batch_size=self.batch_size,
                milestones=milestones,
                lr=self.lr,
                momentum=self.momentum,
                weight_decay=self.weight_decay,
                strategy=strategy or self.strategy,
                seed=derive_seed(self.seed, seed_label),
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if self.values.get(k) in (None, "")]
        if missing:
            raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _require_files(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise IOFailure(f"input file not found: {p}")


def _require_dataset(prefix) -> dict[str, Path]:
    paths = data.split_paths(prefix)
    _require_files(*paths.values())
    return paths


def _load_domain(prefix, net: model.NetworkConfig) -> data.DomainData:
    splits = data.load_splits(prefix)
    return data.prepare_domain(splits, target=net.input_shape[:2])


def _ensure_parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _history_path(out) -> Path:
    """Default curve CSV next to a checkpoint: ``ck/base.amdl`` -> ``ck/base.history.csv``."""
    out = Path(out)
    return out.with_name(out.stem + ".history.csv")


def _write_history(hist: training.TrainHistory, path) -> None:
    _ensure_parent(path)
    hist.save_csv(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> int:
    cfg.require("kind", "n", "out")
    if cfg.kind not in data.KINDS:
        raise UsageError(f"--kind must be one of {', '.join(data.KINDS)}")
    try:
        sizes = _int_list(cfg.n)
    except ValueError:
        raise UsageError(f"bad --n {cfg.n!r}") from None
    if len(sizes) not in (1, 3):
        raise UsageError("--n takes one size or three comma-separated sizes")
    need = data.NUM_CLASSES[cfg.kind]
    if min(sizes) < need:
        raise UsageError(f"--n {cfg.n} is smaller than the {need} classes of kind {cfg.kind!r}")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(str(exc)) from None
    splits = data.generate_synthetic(cfg.kind, sizes[0] if len(sizes) == 1 else sizes, cfg.seed, cfg.size)
    paths = data.split_paths(out / cfg.kind)
    for c in splits:
        data.save_dataset(c, paths[c.split])
    print(f"kind={cfg.kind} classes={need} size={cfg.size}x{cfg.size}x3 seed={cfg.seed}")
    for c in splits:
        print(f"  {c.split}: {len(c)} images -> {paths[c.split]}")
    return 0


def cmd_train_base(cfg: RunConfig) -> int:
    cfg.require("data", "out")
    _require_dataset(cfg.data)
    net = cfg.network_config()
    dom = _load_domain(cfg.data, net)
    base = model.build_base(net, dom.num_classes, seed=derive_seed(cfg.seed, "base-init"))
    hist = training.train_base(base, dom, cfg.train_config(strategy="joint", seed_label="train-base"))
    model.freeze_base(base)
    _ensure_parent(cfg.out)
    checkpoint.save_checkpoint(cfg.out, base)
    _write_history(hist, cfg.history or _history_path(cfg.out))
    acc = hist.records[-1].accs[0]
    print(f"base trained: {len(hist)} epochs, val acc {acc:.4f}, checksum {base.checksum[:16]} -> {cfg.out}")
    return 0


def _check_pair(base: model.BaseNetwork, adapters: model.DomainAdapterSet) -> None:
    try:
        checkpoint.check_compatible(base, adapters)
    except FormatError as exc:
        raise UsageError(f"bundle does not match base: {exc}") from None


def _config_label(topology: str, strategy: str) -> str:
    if strategy == "exits_only":
        return "no-adp"
    return topology + ("-B" if strategy == "blockwise" else "")


def cmd_train_domain(cfg: RunConfig) -> int:
    cfg.require("base", "data", "out")
    _require_files(cfg.base)
    _require_dataset(cfg.data)
    if cfg.init_bundle:
        _require_files(cfg.init_bundle)
    base = checkpoint.load_checkpoint(cfg.base)
    if not isinstance(base, model.BaseNetwork):
        raise UsageError(f"{cfg.base} is not a base checkpoint")
    if not base.frozen:
        raise UsageError(f"{cfg.base} holds an unfrozen base network")
    domain = cfg.domain or Path(cfg.data).name
    topology = cfg.exit_topology or cfg.domains.get(domain, "basic")
    try:
        model.ExitTopology.parse(topology)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dom = _load_domain(cfg.data, base.config)
    strategy = cfg.strategy
    if cfg.init_bundle:
        adapters = checkpoint.load_checkpoint(cfg.init_bundle)
        if not isinstance(adapters, model.DomainAdapterSet):
            raise UsageError(f"{cfg.init_bundle} is not an adapter bundle")
        _check_pair(base, adapters)
    else:
        adapters = model.attach_domain(
            base,
            dom.num_classes,
            topology,
            adapt=strategy != "exits_only",
            seed=derive_seed(cfg.seed, f"domain-init:{domain}"),
            domain=domain,
        )
    before = base.checksum
    hist = training.train_domain(base, adapters, dom, cfg.train_config(seed_label=f"train-domain:{domain}"))
    if model.base_checksum(base) != before:
        raise RuntimeError("base network changed during domain training")
    _ensure_parent(cfg.out)
    checkpoint.save_checkpoint(cfg.out, adapters)
    _write_history(hist, cfg.history or _history_path(cfg.out))
    accs = " ".join(f"{a:.4f}" for a in hist.records[-1].accs)
    print(f"domain {domain} ({_config_label(adapters.topology.tag, strategy)}): val acc per exit {accs} -> {cfg.out}")
    return 0


def _read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(RESULT_COLUMNS):
        raise UsageError(f"{path} is not a results file")
    return rows


def _write_results(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    Path(path).write_text(buf.getvalue())


def cmd_evaluate(cfg: RunConfig) -> int:
    cfg.require("base", "bundle", "data")
    _require_files(cfg.base, cfg.bundle)
    _require_dataset(cfg.data)
    if cfg.split not in data.SPLITS:
        raise UsageError(f"--split must be one of {', '.join(data.SPLITS)}")
    base = checkpoint.load_checkpoint(cfg.base)
    adapters = checkpoint.load_checkpoint(cfg.bundle)
    if not isinstance(base, model.BaseNetwork) or not isinstance(adapters, model.DomainAdapterSet):
        raise UsageError("--base needs a base checkpoint and --bundle an adapter bundle")
    _check_pair(base, adapters)
    dom = _load_domain(cfg.data, base.config)
    accs = training.evaluate(base, adapters, dom, cfg.split)
    ledger = model.count_params(base, adapters)
    label = _config_label(adapters.topology.tag, "exits_only" if not adapters.adapt else cfg.strategy)
    rows = []
    for k, a in enumerate(accs, start=1):
        rows.append(
            {
                "domain": adapters.domain,
                "config": label,
                "exit": k,
                "accuracy": repr(float(a) * 100.0),
                "params": ledger.exit_params[k - 1],
            }
        )
        print(f"{adapters.domain} exit {k}: accuracy {a:.4f}  params {ledger.exit_params[k - 1]}")
    if cfg.results:
        existing = _read_results(cfg.results) if Path(cfg.results).is_file() else []
        # replace matching rows in place, append the rest
        fresh = {(r["domain"], r["config"], str(r["exit"])): r for r in rows}
        merged = [fresh.pop((r["domain"], r["config"], r["exit"]), r) for r in existing]
        _ensure_parent(cfg.results)
        _write_results(cfg.results, merged + list(fresh.values()))
    return 0


def _selections(cfg: RunConfig):
    if cfg.fixture:
        if cfg.fixture != "table2":
            raise UsageError("the only fixture is 'table2'")
        return exit_policy.best_row(T=cfg.threshold)
    cfg.require("results")
    _require_files(cfg.results)
    rows = _read_results(cfg.results)
    if not rows:
        raise UsageError(f"{cfg.results} holds no results")
    table = exit_policy.AccuracyTable.from_records(rows)
    try:
        return exit_policy.best_row(table, T=cfg.threshold, pinned={})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_select(cfg: RunConfig) -> int:
    results, mean = _selections(cfg)
    print(f"threshold T = {cfg.threshold}")
    for r in results:
        print(
            f"{r.domain:>8}  {r.config:<10} exit {r.exit}  acc {r.accuracy:.2f}  "
            f"baseline {r.baseline:.2f}  loss {r.loss:.2f}  {r.difficulty}"
        )
    print(f"mean {mean:.3f}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    results, _ = _selections(cfg)
    ledger = None
    if cfg.fixture:
        ledger = _resnet26_ledger()
    elif cfg.base:
        _require_files(cfg.base)
        ledger = model.count_params(checkpoint.load_checkpoint(cfg.base))
    rep = exit_policy.report(results, ledger, cfg.threshold)
    for path in (cfg.csv, cfg.json):
        if path:
            _ensure_parent(path)
    rep.write(cfg.csv, cfg.json)
    if not cfg.csv and not cfg.json:
        sys.stdout.write(rep.to_csv())
    else:
        print(f"report: {len(rep.rows)} domains, mean accuracy {rep.totals['mean_accuracy']:.3f}")
    return 0


def _resnet26_ledger() -> model.ParamLedger:
    # Ten-class MLP128 heads; only used to price fixture rows.
    base = model.build_base(model.NetworkConfig.resnet26(), 10, seed=0)
    model.freeze_base(base)
    return model.count_params(base, model.attach_domain(base, 10, "mlp128"))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "train-domain": cmd_train_domain,
    "evaluate": cmd_evaluate,
    "select": cmd_select,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="amdl", description="Adaptive multi-domain learning with early exits.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int, help="root seed (default 0)")
        return sp

    def training_flags(sp):
        sp.add_argument("--preset", choices=["tiny", "resnet26"], help="network preset (default tiny)")
        sp.add_argument("--image-size", type=int, help="input resolution (default 32 for tiny)")
        sp.add_argument("--epochs", type=int, help="epochs (default 30)")
        sp.add_argument("--milestones", type=_int_list, help="comma-separated lr drop epochs")
        sp.add_argument("--batch-size", type=int, help="mini-batch size (default 32)")
        sp.add_argument("--lr", type=float, help="initial learning rate (default 0.1)")
        sp.add_argument("--momentum", type=float, help="SGD momentum (default 0.9)")
        sp.add_argument("--weight-decay", type=float, help="L2 weight decay (default: by train-set size)")
        sp.add_argument("--history", help="per-epoch curve CSV (default: <out stem>.history.csv)")

    sp = command("gen-data", "Write train/val/test AMDS files of a synthetic domain.")
    sp.add_argument("--kind", choices=list(data.KINDS))
    sp.add_argument("--n", help="images per split: one number or train,val,test")
    sp.add_argument("--size", type=int, help="image side in pixels (default 32)")
    sp.add_argument("--out", help="output directory")

    sp = command("train-base", "Train the shared base network on one domain and freeze it.")
    sp.add_argument("--data", help="dataset prefix, e.g. data/hard")
    sp.add_argument("--out", help="base checkpoint path")
    training_flags(sp)

    sp = command("train-domain", "Train one domain's adapters and exit heads against a frozen base.")
    sp.add_argument("--base", help="base checkpoint")
    sp.add_argument("--data", help="dataset prefix")
    sp.add_argument("--domain", help="domain name (default: dataset prefix name)")
    sp.add_argument("--exit-topology", help="basic, conv1x1, mlp128, mlp128x128, ...")
    sp.add_argument("--strategy", choices=list(training.STRATEGIES))
    sp.add_argument("--init-bundle", help="continue from an existing adapter bundle")
    sp.add_argument("--out", help="adapter bundle path")
    training_flags(sp)

    sp = command("evaluate", "Per-exit accuracy of a trained domain.")
    sp.add_argument("--base", help="base checkpoint")
    sp.add_argument("--bundle", help="adapter bundle")
    sp.add_argument("--data", help="dataset prefix")
    sp.add_argument("--split", choices=list(data.SPLITS))
    sp.add_argument("--strategy", choices=list(training.STRATEGIES), help="label results as trained with this strategy")
    sp.add_argument("--results", help="results CSV to update")

    for name, text in (("select", "Pick the cheapest exit per domain within threshold T."), ("report", "Write the selection report as CSV and JSON.")):
        sp = command(name, text)
        sp.add_argument("--results", help="results CSV written by evaluate")
        sp.add_argument("--fixture", choices=["table2"], help="replay the bundled ten-domain accuracy table")
        sp.add_argument("--T", "--threshold", dest="threshold", type=float, help="accuracy drop threshold in points (default 3.5)")
        if name == "report":
            sp.add_argument("--base", help="base checkpoint used to price exits")
            sp.add_argument("--csv", help="report CSV path")
            sp.add_argument("--json", help="report JSON path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = RunConfig.build(args)
        try:
            limiter = thread_limit()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        with limiter:
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"amdl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (IOFailure, FormatError, OSError) as exc:
        print(f"amdl {args.command}: I/O error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"amdl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

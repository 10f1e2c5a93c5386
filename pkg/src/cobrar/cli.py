"""Command-line entry point: ``cobrar {prepare,train,evaluate,compare,boxplot-data}``."""
from __future__ import annotations

import argparse
import dataclasses
import functools
import json
import logging
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

import cobrar
from cobrar import checkpoint
from cobrar.config import ConfigError, ExperimentConfig, dataset_section, digest, load_config, serialize_config
from cobrar.dataset import (
    ParseError,
    SplitDataset,
    binarize_and_dedup,
    k_core_filter,
    make_block_dataset,
    parse_amazon,
    parse_movielens,
    read_cache,
    split_user_based,
    write_cache,
)
from cobrar.evaluation import EvalReport, evaluate, paired_t_test
from cobrar.models import param_count
from cobrar.training import TRAIN_FIELDS, TrainConfig, TrainingDiverged, expand_grid, fit, grid_search

log = logging.getLogger("cobrar")

AGGREGATE_HEADER = ("model", "ndcg", "arp", "poprsp", "coverage", "params_branch", "params_total")
BOXPLOT_HEADER = "architecture,model,user_index,ndcg_at_5"


class CliError(Exception):
    pass


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _version_tag() -> str:
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        git = rev.stdout.strip() if rev.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        git = "unknown"
    return f"cobrar {cobrar.__version__} ({cobrar.BACKEND} kernels, git {git})"


class Manifest:
    """Run record written when a command starts and rewritten when it ends."""

    def __init__(self, path: Path, cfg: ExperimentConfig, fingerprint: dict | None, **extra):
        self.path = path
        self.t0 = time.time()
        self.data = {
            "config": serialize_config(cfg),
            "fingerprint": fingerprint,
            "version": _version_tag(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "status": "running",
            "artifacts": {},
            **extra,
        }
        self._flush()

    def _flush(self):
        _write(self.path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str = "ok", **fields):
        self.data.update(fields)
        self.data["status"] = status
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["elapsed_seconds"] = round(time.time() - self.t0, 3)
        self._flush()


# -- prepare -------------------------------------------------------------------

def build_split(cfg: ExperimentConfig) -> SplitDataset:
    spec = cfg.dataset
    if spec.format == "synthetic":
        ds = make_block_dataset(spec.n_users, spec.n_items, spec.n_blocks, spec.p_in, spec.p_out,
                                spec.generator_seed)
    else:
        path = cfg.raw_path
        if not path.exists():
            raise CliError(f"raw dataset not found: {path}")
        raw = parse_movielens(path) if spec.format == "movielens" else parse_amazon(path)
        log.info("parsed %d raw interactions from %s", len(raw), path)
        ds = binarize_and_dedup(raw)
    log.info("before k-core: %d users, %d items, %d interactions", ds.n_users, ds.n_items, ds.n_interactions)
    ds = k_core_filter(ds, spec.k_core)
    return split_user_based(ds, spec.split_ratios, spec.seed)


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, seed=args.seed))
    out = cfg.cache_path
    manifest = Manifest(out / "manifest.json", cfg, None, command="prepare")
    split = build_split(cfg)
    write_cache(split, out)
    fp = split.fingerprint()
    stats = f"{fp['n_users']} {fp['n_items']} {fp['n_interactions']}"
    _write(out / "stats.tsv", f"n_users\tn_items\tn_interactions\n{stats.replace(' ', chr(9))}\n")
    manifest.finish(fingerprint=fp, artifacts={"cache": str(out)},
                    stats={"users": fp["n_users"], "items": fp["n_items"], "interactions": fp["n_interactions"]})
    print(stats)
    log.info("prepared dataset written to %s", out)
    return 0


def load_prepared(cfg: ExperimentConfig, config_path: str = "<config>") -> SplitDataset:
    path = cfg.cache_path
    if not (path / "interactions.txt").exists():
        raise CliError(f"no prepared dataset at {path}; run `cobrar prepare --config {config_path}` first")
    return read_cache(path)


# -- train ---------------------------------------------------------------------

def run_dir_for(cfg: ExperimentConfig, train_cfg: TrainConfig) -> Path:
    key = digest({"dataset": dataset_section(cfg.dataset), "kind": cfg.model_kind, "train": train_cfg.to_dict()})
    return cfg.output_root / "runs" / f"{cfg.model_kind}-{key}"


def train_one(cfg: ExperimentConfig, split: SplitDataset, train_cfg: TrainConfig) -> tuple[Path, object]:
    """Fit one configuration and write checkpoint, log and manifest into its run directory."""
    run_cfg = dataclasses.replace(cfg, train=train_cfg, grid=None)
    run_dir = run_dir_for(cfg, train_cfg)
    fp = split.fingerprint()
    manifest = Manifest(run_dir / "manifest.json", run_cfg, fp, command="train")
    log_path = run_dir / "trainlog.tsv"
    ckpt_path = run_dir / "checkpoint.npz"
    try:
        model, train_log = fit(cfg.model_kind, split, train_cfg)
    except TrainingDiverged as exc:
        if exc.train_log is not None:
            _write(log_path, exc.train_log.to_tsv())
        manifest.finish("diverged", error=str(exc), artifacts={"trainlog": str(log_path)})
        raise CliError(f"training diverged: {exc} (partial log: {log_path})") from exc
    _write(log_path, train_log.to_tsv())
    checkpoint.save(ckpt_path, model, fp, train_cfg.to_dict(),
                    extra={"best_epoch": train_log.best_epoch, "best_val_ndcg_at_5": train_log.best_val_ndcg})
    manifest.finish(artifacts={"checkpoint": str(ckpt_path), "trainlog": str(log_path)},
                    best_epoch=train_log.best_epoch, stopped_early=train_log.stopped_early)
    return run_dir, train_log


def _grid_runner(cfg: ExperimentConfig, kind: str, split: SplitDataset, train_cfg: TrainConfig):
    return train_one(cfg, split, train_cfg)[1]


def cmd_train(cfg: ExperimentConfig, args) -> int:
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    split = load_prepared(cfg, args.config)
    if cfg.train is not None:
        run_dir, train_log = train_one(cfg, split, cfg.train)
        print(f"{run_dir}\tbest_epoch={train_log.best_epoch}\tval_ndcg_at_5={train_log.best_val_ndcg!r}")
        return 0
    configs = expand_grid(cfg.grid)
    result = grid_search(split, cfg.model_kind, configs, jobs=args.jobs,
                         runner=functools.partial(_grid_runner, cfg))
    grid_dir = cfg.output_root / "runs" / f"grid-{cfg.model_kind}-{digest(serialize_config(cfg))}"
    header = ["index", "run", "best_val_ndcg_at_5", "best_epoch", "params_total", "selected", *TRAIN_FIELDS]
    lines = ["\t".join(header)]
    for idx, (tc, tl) in enumerate(zip(result.configs, result.logs)):
        total = param_count(tc.layer_sizes, cfg.model_kind, split.n_users, split.n_items).total
        row = [idx, run_dir_for(cfg, tc).name, repr(tl.best_val_ndcg), tl.best_epoch, total,
               int(idx == result.best_index), *(json.dumps(v) for v in tc.to_dict().values())]
        lines.append("\t".join(map(str, row)))
    _write(grid_dir / "grid.tsv", "\n".join(lines) + "\n")
    best_dir = run_dir_for(cfg, result.best)
    _write(grid_dir / "best.txt", f"{best_dir}\n")
    print(f"{best_dir}\tselected {result.best_index} of {len(configs)} configurations")
    return 0


# -- evaluate / compare / boxplot ----------------------------------------------

def _label(meta: dict) -> str:
    if meta["kind"] == "scores":
        return meta.get("label", "scores")
    return f"{meta['kind']}[{'-'.join(map(str, meta['layer_sizes']))}]"


def _params(meta: dict, split: SplitDataset):
    if meta["kind"] == "scores":
        return None
    return param_count(meta["layer_sizes"], meta["kind"], split.n_users, split.n_items)


def _load_checkpoint(path, split: SplitDataset):
    try:
        return checkpoint.load(path, split.fingerprint())
    except checkpoint.FingerprintMismatch as exc:
        raise CliError(f"{path}: dataset fingerprint mismatch\n  checkpoint: {exc.found}\n"
                       f"  prepared:   {exc.expected}") from exc


def _aggregate_row(label: str, report: EvalReport, pc) -> list[str]:
    return [label, repr(report.mean_ndcg), repr(report.mean_arp), repr(report.pop_rsp), repr(report.coverage),
            str(pc.branch_params) if pc else "NA", str(pc.total) if pc else "NA"]


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    split = load_prepared(cfg, args.config)
    k = args.k or cfg.eval_k
    model, meta = _load_checkpoint(args.checkpoint, split)
    report = evaluate(model, split, args.phase, k)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    table = "\t".join(AGGREGATE_HEADER) + "\n" + "\t".join(_aggregate_row(_label(meta), report, _params(meta, split))) + "\n"
    _write(out / f"report_{args.phase}_k{k}.tsv", table)
    _write(out / f"per_user_{args.phase}_k{k}.csv", report.per_user_csv())
    print(table, end="")
    return 0


def _unique_labels(labels):
    seen = {}
    out = []
    for lab in labels:
        seen[lab] = seen.get(lab, 0) + 1
        out.append(lab if seen[lab] == 1 else f"{lab}#{seen[lab]}")
    return out


def compare_table(labels, reports: list[EvalReport], params: list, alpha: float = 0.05) -> str:
    """Per-model metrics with best-vs-rest paired t-tests on the user-level metrics."""
    n = len(reports)
    cols = ["model"]
    per_metric = {}
    for metric, higher_better in (("ndcg", True), ("arp", False)):
        means = [getattr(r, f"mean_{metric}") for r in reports]
        best = int(np.argmax(means) if higher_better else np.argmin(means))
        values = [getattr(r, metric) for r in reports]
        tests = {j: paired_t_test(values[best], values[j], n - 1, alpha) for j in range(n) if j != best}
        per_metric[metric] = (means, best, tests)
        cols += [metric, f"{metric}_delta", f"{metric}_p", f"{metric}_sig"]
    cols += ["poprsp", "coverage", "params_branch", "params_total", "branch_ratio"]
    branch_counts = [p.branch_params for p in params if p is not None and p.branch_params > 0]
    base = min(branch_counts) if branch_counts else None
    lines = ["\t".join(cols)]
    for i, (label, rep, pc) in enumerate(zip(labels, reports, params)):
        row = [label]
        for metric in ("ndcg", "arp"):
            means, best, tests = per_metric[metric]
            if i == best:
                sig = "*" if tests and all(t.significant for t in tests.values()) else ""
                row += [repr(means[i]), repr(0.0), "", sig]
            else:
                t = tests[i]
                row += [repr(means[i]), repr(means[i] - means[best]), repr(t.p_value), "*" if t.significant else ""]
        ratio = str(Fraction(pc.branch_params, base)) if pc is not None and base else "NA"
        row += [repr(rep.pop_rsp), repr(rep.coverage),
                str(pc.branch_params) if pc else "NA", str(pc.total) if pc else "NA", ratio]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    if len(args.checkpoint) < 2:
        raise CliError("compare needs at least two --checkpoint arguments")
    split = load_prepared(cfg, args.config)
    k = args.k or cfg.eval_k
    labels, reports, params = [], [], []
    for path in args.checkpoint:
        model, meta = _load_checkpoint(path, split)
        labels.append(_label(meta))
        reports.append(evaluate(model, split, args.phase, k))
        params.append(_params(meta, split))
    table = compare_table(_unique_labels(labels), reports, params, args.alpha)
    out = Path(args.out) if args.out else cfg.output_root / "compare" / digest(
        [str(Path(p).resolve()) for p in args.checkpoint])
    _write(out / f"comparison_{args.phase}_k{k}.tsv", table)
    print(table, end="")
    return 0


def cmd_boxplot_data(cfg: ExperimentConfig, args) -> int:
    split = load_prepared(cfg, args.config)
    groups: dict[str, dict[str, str]] = {}
    for path in args.checkpoint:
        meta = checkpoint.read_meta(path)
        if meta["kind"] not in ("cobrar", "deepmf"):
            raise CliError(f"{path}: boxplot data needs cobrar/deepmf checkpoints, got {meta['kind']}")
        arch = "-".join(map(str, meta["layer_sizes"]))
        slot = groups.setdefault(arch, {})
        if meta["kind"] in slot:
            raise CliError(f"architecture {arch} has two {meta['kind']} checkpoints")
        slot[meta["kind"]] = path
    unpaired = [a for a, s in groups.items() if set(s) != {"cobrar", "deepmf"}]
    if unpaired:
        raise CliError(f"unpaired architecture(s): {', '.join(unpaired)}; each needs one deepmf and one cobrar checkpoint")
    lines = [BOXPLOT_HEADER]
    for arch, slot in groups.items():
        for kind in ("deepmf", "cobrar"):
            model, _ = _load_checkpoint(slot[kind], split)
            rep = evaluate(model, split, "test", 5)
            lines += [f"{arch},{kind},{u},{v!r}" for u, v in zip(rep.users.tolist(), rep.ndcg.tolist())]
    out = Path(args.out) if args.out else cfg.output_root / "boxplot_test_ndcg_at_5.csv"
    _write(out, "\n".join(lines) + "\n")
    print(out)
    return 0


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cobrar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config file")
        p.set_defaults(func=func)
        return p

    p = add("prepare", cmd_prepare, "parse, k-core filter and split a raw dataset")
    p.add_argument("--seed", type=int, help="override the split seed")
    p = add("train", cmd_train, "train one configuration or a grid")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel grid workers")
    p = add("evaluate", cmd_evaluate, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--phase", choices=("val", "test"), default="test")
    p.add_argument("--k", type=int)
    p.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    p = add("compare", cmd_compare, "compare checkpoints with paired t-tests")
    p.add_argument("--checkpoint", action="append", default=[], required=True)
    p.add_argument("--phase", choices=("val", "test"), default="test")
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", help="output directory")
    p = add("boxplot-data", cmd_boxplot_data, "per-user test NDCG@5 for paired architectures")
    p.add_argument("--checkpoint", action="append", default=[], required=True)
    p.add_argument("--out", help="output CSV path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except (CliError, ConfigError, ParseError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

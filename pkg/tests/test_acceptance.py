"""Acceptance criteria, one test each, every one printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``. The real-data
criteria read raw files from ``data/`` (see the README) or from the paths in
``COBRAR_ML1M_RATINGS`` / ``COBRAR_AMAZON_MUSIC_CSV``.
"""
import dataclasses
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cobrar.cli import main as cli
from cobrar.config import load_config
from cobrar.dataset import make_block_dataset, read_cache, split_user_based
from cobrar.evaluation import PopularityScorer, evaluate, paired_t_test
from cobrar.models import param_count
from cobrar.training import expand_grid, fit, default_grid
from oracles import brute_random_ndcg, t_two_sided_p
from test_evaluation import metric_oracle_instance
from test_training import TOY, grad_check_instance

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def verdict(request, number, title, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    terminal = request.config.pluginmanager.get_plugin("terminalreporter")
    if terminal is not None:
        terminal.write_line(line)
    else:
        print(line, file=sys.__stdout__)
    assert ok, line


def _raw_config(name, env_var, tmp_path):
    cfg = load_config(CONFIGS / name)
    override = os.environ.get(env_var)
    if override:
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, path=override))
    return cfg


def _write_config(cfg, path):
    from cobrar.config import serialize_config
    path.write_text(serialize_config(cfg))
    return path


def _prepare(cfg, tmp_path, capsys, tag):
    cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, path=str(cfg.raw_path)),
                              output_dir=str(tmp_path / tag), source=None)
    path = _write_config(cfg, tmp_path / f"{tag}.ini")
    capsys.readouterr()
    t0 = time.perf_counter()
    rc = cli(["prepare", "--config", str(path)])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out.strip()
    return rc, out, elapsed, path


def test_criterion_1_dataset_statistics(request, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("COBRAR_OUTPUT_ROOT", raising=False)
    ml = _raw_config("ml1m.ini", "COBRAR_ML1M_RATINGS", tmp_path)
    if not ml.raw_path.exists():
        verdict(request, 1, "ML-1M / Amazon Music counts after 5-core", False,
                f"raw ML-1M file not found at {ml.raw_path.resolve()}; set COBRAR_ML1M_RATINGS")
    rc, stats, elapsed, _ = _prepare(ml, tmp_path, capsys, "ml1m")
    ml_ok = rc == 0 and stats == "6040 3416 999611" and elapsed < 120
    detail = f"ML-1M stats '{stats}' in {elapsed:.1f}s (expected '6040 3416 999611', < 120s)"
    amazon = _raw_config("amazon_music.ini", "COBRAR_AMAZON_MUSIC_CSV", tmp_path)
    if amazon.raw_path.exists():
        rc_a, stats_a, el_a, _ = _prepare(amazon, tmp_path, capsys, "amazon")
        note = "" if stats_a == "5082 2338 30623" else " (differs; ML-1M is binding)"
        detail += f"; Amazon Music '{stats_a}' in {el_a:.1f}s{note}"
        ml_ok = ml_ok and rc_a == 0 and el_a < 120
    else:
        detail += f"; Amazon Music raw file not found at {amazon.raw_path.resolve()}"
    verdict(request, 1, "ML-1M / Amazon Music counts after 5-core", ml_ok, detail)


def test_criterion_2_parameter_halving(request):
    deep = [512, 512, 256, 256]
    c = param_count(deep, "cobrar", 6040, 3416).branch_params
    d = param_count(deep, "deepmf", 6040, 3416).branch_params
    ok = c == 458_752 and d == 917_504 and d == 2 * c
    lattice = expand_grid(default_grid("cobrar"))
    pairs = {tuple(cfg.layer_sizes) for cfg in lattice}
    for sizes in pairs:
        cb = param_count(sizes, "cobrar", 6040, 3416).branch_params
        dm = param_count(sizes, "deepmf", 6040, 3416).branch_params
        ok = ok and dm == 2 * cb
    verdict(request, 2, "branch parameters DeepMF = 2 x CoBraR", ok,
            f"deep {c} vs {d}; ratio exactly 2 for all {len(pairs)} distinct grid layer stacks")


def test_criterion_3_gradient_correctness(request):
    t0 = time.perf_counter()
    errs = [grad_check_instance(seed, kind) for seed in range(12) for kind in ("cobrar", "deepmf")]
    elapsed = time.perf_counter() - t0
    ok = len(errs) >= 20 and max(errs) < 1e-4 and elapsed < 60
    verdict(request, 3, "analytic vs finite-difference batch-loss gradients", ok,
            f"{len(errs)} instances, max relative error {max(errs):.2e} (< 1e-4) in {elapsed:.1f}s")


def test_criterion_4_metric_oracle(request):
    t0 = time.perf_counter()
    gaps = [metric_oracle_instance(seed) for seed in range(50)]
    elapsed = time.perf_counter() - t0
    ok = max(gaps) <= 1e-12 and elapsed < 60
    verdict(request, 4, "NDCG@5 / ARP / coverage / PopRSP vs brute force", ok,
            f"50 instances, max gap {max(gaps):.1e} (<= 1e-12) in {elapsed:.1f}s")


def test_criterion_5_learnability(request):
    t0 = time.perf_counter()
    split = split_user_based(make_block_dataset(200, 100, 4, 0.5, 0.02, seed=0), seed=0)
    model, _ = fit("cobrar", split, TOY)
    ndcg = evaluate(model, split, "test", 5).mean_ndcg
    pop = evaluate(PopularityScorer(split.train), split, "test", 5).mean_ndcg
    rand = brute_random_ndcg(list(zip(*split.train.pairs())), list(zip(*split.val.pairs())),
                             list(zip(*split.test.pairs())), split.n_users, split.n_items, k=5)
    elapsed = time.perf_counter() - t0
    ok = ndcg >= 3 * pop and ndcg >= 10 * rand and elapsed < 300
    verdict(request, 5, "CoBraR learns the block structure", ok,
            f"test NDCG@5 {ndcg:.4f}; popularity {pop:.4f} ({ndcg / pop:.2f}x, need 3x); "
            f"uniform random {rand:.4f} ({ndcg / rand:.2f}x, need 10x); {elapsed:.1f}s")


def test_criterion_6_amazon_trend(request, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("COBRAR_OUTPUT_ROOT", raising=False)
    base = _raw_config("amazon_music.ini", "COBRAR_AMAZON_MUSIC_CSV", tmp_path)
    if not base.raw_path.exists():
        verdict(request, 6, "Amazon Music coverage CoBraR > DeepMF", False,
                f"raw Amazon Music file not found at {base.raw_path.resolve()}; set COBRAR_AMAZON_MUSIC_CSV")
    t0 = time.perf_counter()
    rc, stats, _, path_c = _prepare(base, tmp_path, capsys, "amazon")
    cfg_c = load_config(path_c)
    cfg_d = dataclasses.replace(cfg_c, model_kind="deepmf",
                                train=dataclasses.replace(cfg_c.train, dropout_rate=0.0))
    path_d = _write_config(cfg_d, tmp_path / "amazon_deepmf.ini")
    ckpts = []
    for p in (path_c, path_d):
        capsys.readouterr()
        rc = rc or cli(["train", "--config", str(p)])
        out = capsys.readouterr().out.strip().splitlines()
        ckpts.append(str(Path(out[-1].split("\t")[0]) / "checkpoint.npz") if out else "")
    rc = rc or cli(["compare", "--config", str(path_c), "--checkpoint", ckpts[0], "--checkpoint", ckpts[1],
                    "--out", str(tmp_path / "cmp")])
    table = capsys.readouterr().out
    rows = [line.split("\t") for line in table.strip().splitlines()]
    header = rows[0] if rows else []
    cov = {r[0].split("[")[0]: float(r[header.index("coverage")]) for r in rows[1:]} if header else {}
    elapsed = time.perf_counter() - t0
    ok = rc == 0 and {"cobrar", "deepmf"} <= set(cov) and cov["cobrar"] > cov["deepmf"] and elapsed < 1800
    verdict(request, 6, "Amazon Music coverage CoBraR > DeepMF", ok,
            f"prepared '{stats}'; coverage {cov}; {elapsed:.0f}s; full table in {tmp_path / 'cmp'}")


def test_criterion_7_t_test_oracle(request):
    r = paired_t_test([1, 2, 3, 4], [0, 0, 0, 0], n_comparisons=4, alpha=0.05)
    p_ref = t_two_sided_p(r.t_statistic, 3)
    ok = (abs(r.t_statistic - 3.873) < 1e-3 and abs(r.p_value - p_ref) < 1e-3
          and abs(r.p_value - 0.0305) < 1e-3 and r.corrected_alpha == 0.0125 and not r.significant)
    verdict(request, 7, "paired t-test with Bonferroni", ok,
            f"t={r.t_statistic:.4f}, p={r.p_value:.5f} (oracle {p_ref:.5f}), "
            f"alpha/4={r.corrected_alpha}, significant={r.significant}")


def test_criterion_8_determinism(request, tmp_path, monkeypatch, capsys):
    outputs = []
    for run in ("a", "b"):
        monkeypatch.setenv("COBRAR_OUTPUT_ROOT", str(tmp_path / run))
        cfg = str(CONFIGS / "toy.ini")
        assert cli(["prepare", "--config", cfg]) == 0
        capsys.readouterr()
        assert cli(["train", "--config", cfg]) == 0
        run_dir = Path(capsys.readouterr().out.strip().split("\t")[0])
        assert cli(["evaluate", "--config", cfg, "--checkpoint", str(run_dir / "checkpoint.npz")]) == 0
        outputs.append([(run_dir / name).read_bytes() for name in
                        ("trainlog.tsv", "report_test_k5.tsv", "per_user_test_k5.csv", "checkpoint.npz")])
    same = [a == b for a, b in zip(*outputs)]
    verdict(request, 8, "identical train runs are bit-identical", all(same),
            f"trainlog/report/per-user/checkpoint identical: {same}")

import csv
import filecmp
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cobrar import checkpoint
from cobrar.cli import main
from cobrar.config import ConfigError, ExperimentConfig, load_config, parse_config, serialize_config
from cobrar.dataset import read_cache
from cobrar.evaluation import ScoreMatrix, evaluate
from cobrar.models import build_model

GOLDEN = Path(__file__).parent / "golden"
CONFIGS = Path(__file__).parent.parent / "configs"

TINY = """
[dataset]
format = "synthetic"
n_users = 40
n_items = 30
n_blocks = 2
p_in = 0.5
p_out = 0.05
k_core = 1

[model]
kind = "{kind}"

[train]
learning_rate = 0.01
l2_weight = 0.0
batch_size = 32
n_neg = 3
dropout_rate = {dropout}
max_epochs = 4
patience = 4
embedding_dim = 4
architecture = {arch}

[output]
dir = "out"
"""


def tiny_config(tmp_path, kind="cobrar", arch="[8]", dropout=0.1, name=None):
    path = tmp_path / (name or f"{kind}.ini")
    path.write_text(TINY.format(kind=kind, arch=arch, dropout=dropout))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def checkpoint_of(out, capsys):
    line = out.strip().splitlines()[-1]
    return Path(line.split("\t")[0]) / "checkpoint.npz"


@pytest.fixture
def prepared(tmp_path, monkeypatch):
    monkeypatch.delenv("COBRAR_OUTPUT_ROOT", raising=False)
    cfg = tiny_config(tmp_path)
    assert run("prepare", "--config", cfg) == 0
    return cfg


def train(cfg, capsys, *extra):
    capsys.readouterr()
    assert run("train", "--config", cfg, *extra) == 0
    return checkpoint_of(capsys.readouterr().out, capsys)


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("name", ["toy.ini", "toy_deepmf.ini", "ml1m.ini", "amazon_music.ini",
                                  "ml1m_grid_cobrar.ini", "ml1m_grid_deepmf.ini"])
def test_config_round_trip(name):
    cfg = load_config(CONFIGS / name)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


def test_grid_configs_have_default_lattice():
    from cobrar.training import expand_grid
    assert len(expand_grid(load_config(CONFIGS / "ml1m_grid_cobrar.ini").grid)) == 120
    assert len(expand_grid(load_config(CONFIGS / "ml1m_grid_deepmf.ini").grid)) == 40


@pytest.mark.parametrize("text,match", [
    ("[dataset]\nformat = \"synthetic\"\n", "exactly one"),
    ("[dataset]\nformat = \"synthetic\"\n[train]\n[grid]\nseed = [1]\n", "exactly one"),
    ("[dataset]\nformat = \"csv\"\n[train]\n", "format"),
    ("[dataset]\nformat = \"movielens\"\n[train]\n", "path"),
    ("[dataset]\nformat = \"synthetic\"\n[train]\nbogus = 1\n", "unknown"),
    ("[dataset]\nformat = \"synthetic\"\n[train]\nbatch_size = 0\n", "batch_size"),
    ("[dataset]\nformat = \"synthetic\"\n[train]\nlearning_rate = fast\n", "JSON"),
    ("[dataset]\nformat = \"synthetic\"\n[grid]\nseed = 3\n", "list"),
    ("[dataset]\nformat = \"synthetic\"\n[train]\n[extra]\n", "unknown sections"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_paths_relative_to_config(tmp_path, monkeypatch):
    monkeypatch.delenv("COBRAR_OUTPUT_ROOT", raising=False)
    cfg = load_config(tiny_config(tmp_path))
    assert cfg.output_root == tmp_path / "out"
    monkeypatch.setenv("COBRAR_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
    assert cfg.output_root == tmp_path / "elsewhere"
    assert cfg.cache_path.parent == tmp_path / "elsewhere" / "prepared"


# -- prepare -----------------------------------------------------------------

def test_prepare_writes_cache_and_stats(prepared, tmp_path, capsys):
    cfg = load_config(prepared)
    cache = cfg.cache_path
    for name in ("interactions.txt", "split.txt", "ids.tsv", "stats.tsv", "manifest.json"):
        assert (cache / name).exists()
    split = read_cache(cache)
    fp = split.fingerprint()
    assert (cache / "stats.tsv").read_text().splitlines()[1] == f"{fp['n_users']}\t{fp['n_items']}\t{fp['n_interactions']}"
    manifest = json.loads((cache / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["fingerprint"] == fp


def test_prepare_rerun_byte_identical(prepared, tmp_path):
    cache = load_config(prepared).cache_path
    snap = tmp_path / "snap"
    shutil.copytree(cache, snap)
    assert run("prepare", "--config", prepared) == 0
    for name in ("interactions.txt", "split.txt", "ids.tsv", "stats.tsv"):
        assert filecmp.cmp(cache / name, snap / name, shallow=False)


def test_prepare_seed_override(prepared, capsys):
    cfg = load_config(prepared)
    before = (cfg.cache_path / "split.txt").read_text()
    assert run("prepare", "--config", prepared, "--seed", 5) == 0
    # the cache is keyed by the dataset section, so the override gets its own directory
    import dataclasses
    other = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, seed=5)).cache_path
    after = (other / "split.txt").read_text()
    assert after.splitlines()[0] == "seed 5" and after != before
    assert (cfg.cache_path / "split.txt").read_text() == before


def test_prepare_missing_raw(tmp_path, capsys):
    p = tmp_path / "c.ini"
    p.write_text('[dataset]\nformat = "movielens"\npath = "nope.dat"\n[train]\n')
    assert run("prepare", "--config", p) == 1
    assert "raw dataset not found" in capsys.readouterr().err


def test_prepare_parse_error_surfaces_line(tmp_path, capsys):
    (tmp_path / "r.dat").write_text("1::2::3::4\n1::2\n")
    p = tmp_path / "c.ini"
    p.write_text('[dataset]\nformat = "movielens"\npath = "r.dat"\nk_core = 1\n[train]\n')
    assert run("prepare", "--config", p) == 1
    assert "r.dat:2:" in capsys.readouterr().err


def test_prepare_kcore_empty(tmp_path, capsys):
    (tmp_path / "r.dat").write_text("1::1::5::0\n1::2::5::0\n2::1::5::0\n")
    p = tmp_path / "c.ini"
    p.write_text('[dataset]\nformat = "movielens"\npath = "r.dat"\nk_core = 2\n[train]\n')
    assert run("prepare", "--config", p) == 1
    assert "k-core eliminated all data" in capsys.readouterr().err


# -- train -------------------------------------------------------------------

def test_train_missing_cache(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("COBRAR_OUTPUT_ROOT", raising=False)
    cfg = tiny_config(tmp_path)
    assert run("train", "--config", cfg) == 1
    err = capsys.readouterr().err
    assert "cobrar prepare --config" in err


def test_train_artifacts_and_determinism(prepared, capsys):
    ckpt = train(prepared, capsys)
    run_dir = ckpt.parent
    assert {p.name for p in run_dir.iterdir()} >= {"checkpoint.npz", "trainlog.tsv", "manifest.json"}
    log1 = (run_dir / "trainlog.tsv").read_text()
    bytes1 = ckpt.read_bytes()
    assert log1.splitlines()[0] == "epoch\ttrain_loss\tval_ndcg_at_5\tis_best"
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["status"] == "ok" and "cobrar" in manifest["version"]
    assert train(prepared, capsys) == ckpt
    assert (run_dir / "trainlog.tsv").read_text() == log1
    assert ckpt.read_bytes() == bytes1


def test_train_seed_override_new_run_dir(prepared, capsys):
    a = train(prepared, capsys)
    b = train(prepared, capsys, "--seed", 7)
    assert a.parent != b.parent
    assert checkpoint.read_meta(b)["train_config"]["seed"] == 7


def test_train_grid(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("COBRAR_OUTPUT_ROOT", raising=False)
    p = tmp_path / "grid.ini"
    p.write_text(TINY.format(kind="deepmf", arch="[8]", dropout=0.0).split("[train]")[0] + """
[grid]
learning_rate = [0.01, 0.001]
max_epochs = [2]
patience = [2]
embedding_dim = [4]
architecture = [[8], [6, 6]]
batch_size = [32]

[output]
dir = "out"
""")
    assert run("prepare", "--config", p) == 0
    capsys.readouterr()
    assert run("train", "--config", p, "--jobs", 2) == 0
    out = capsys.readouterr().out
    assert "selected" in out and "of 4 configurations" in out
    grid_dir = next((tmp_path / "out" / "runs").glob("grid-deepmf-*"))
    rows = list(csv.DictReader((grid_dir / "grid.tsv").open(), delimiter="\t"))
    assert len(rows) == 4 and sum(int(r["selected"]) for r in rows) == 1
    best = Path((grid_dir / "best.txt").read_text().strip())
    assert (best / "checkpoint.npz").exists()


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = build_model("deepmf", 4, 5, [3, 2], dropout_rate=0.5, rng=0)
    fp = {"n_users": 4, "n_items": 5, "n_interactions": 9, "split_seed": 0}
    checkpoint.save(tmp_path / "a.npz", m, fp, {"seed": 0})
    back, meta = checkpoint.load(tmp_path / "a.npz", fp)
    assert meta["kind"] == "deepmf" and back.dropout_rate == 0.5
    for k, v in m.parameters().items():
        assert np.array_equal(v, back.parameters()[k])
    # npz-compatible and deterministic
    with np.load(tmp_path / "a.npz") as z:
        assert {"f_u.weight", "g_v.0.bias"} <= set(z.files)
        assert np.array_equal(z["g_u.0.weight"], m.g_u.layers[0].weight)
    checkpoint.save(tmp_path / "b.npz", m, fp, {"seed": 0})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    with pytest.raises(checkpoint.FingerprintMismatch):
        checkpoint.load(tmp_path / "a.npz", {**fp, "split_seed": 1})


def test_checkpoint_rejects_foreign_zip(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises((ValueError, KeyError)):
        checkpoint.read_meta(tmp_path / "x.npz")


# -- evaluate ----------------------------------------------------------------

def test_evaluate_fingerprint_mismatch(prepared, tmp_path, capsys):
    ckpt = train(prepared, capsys)
    model, meta = checkpoint.load(ckpt)
    foreign = tmp_path / "foreign.npz"
    checkpoint.save(foreign, model, {**meta["fingerprint"], "split_seed": 3}, meta["train_config"])
    capsys.readouterr()
    assert run("evaluate", "--config", prepared, "--checkpoint", foreign) == 1
    err = capsys.readouterr().err
    assert "fingerprint mismatch" in err and "'split_seed': 0" in err and "'split_seed': 3" in err


def test_evaluate_oracle_checkpoint(prepared, tmp_path, capsys):
    split = read_cache(load_config(prepared).cache_path)
    path = tmp_path / "oracle.npz"
    checkpoint.save(path, ScoreMatrix(split.test.to_dense().astype(float)), split.fingerprint())
    capsys.readouterr()
    assert run("evaluate", "--config", prepared, "--checkpoint", path, "--out", tmp_path / "ev") == 0
    row = (tmp_path / "ev" / "report_test_k5.tsv").read_text().splitlines()[1].split("\t")
    assert float(row[1]) == 1.0


def test_evaluate_golden_bit_exact(tmp_path):
    work = tmp_path / "golden"
    shutil.copytree(GOLDEN, work)
    shutil.rmtree(work / "cache")
    assert run("prepare", "--config", work / "golden.ini") == 0
    for name in ("interactions.txt", "split.txt", "ids.tsv", "stats.tsv"):
        assert filecmp.cmp(work / "cache" / name, GOLDEN / "cache" / name, shallow=False), name
    assert run("evaluate", "--config", work / "golden.ini", "--checkpoint", work / "scores.npz",
               "--out", work / "ev") == 0
    assert (work / "ev" / "report_test_k5.tsv").read_bytes() == (GOLDEN / "expected_report_test_k5.tsv").read_bytes()
    assert (work / "ev" / "per_user_test_k5.csv").read_bytes() == \
        (GOLDEN / "expected_per_user_test_k5.csv").read_bytes()


def test_evaluate_val_phase_and_k(prepared, tmp_path, capsys):
    ckpt = train(prepared, capsys)
    assert run("evaluate", "--config", prepared, "--checkpoint", ckpt, "--phase", "val", "--k", 3) == 0
    assert (ckpt.parent / "report_val_k3.tsv").exists()
    lines = (ckpt.parent / "per_user_val_k3.csv").read_text().splitlines()
    assert lines[0] == "user_index,ndcg_at_k,arp"


# -- compare -----------------------------------------------------------------

def _compare_rows(path):
    return list(csv.DictReader(path.open(), delimiter="\t"))


def test_compare_identical(prepared, tmp_path, capsys):
    ckpt = train(prepared, capsys)
    assert run("compare", "--config", prepared, "--checkpoint", ckpt, "--checkpoint", ckpt,
               "--out", tmp_path / "cmp") == 0
    rows = _compare_rows(tmp_path / "cmp" / "comparison_test_k5.tsv")
    assert len(rows) == 2
    for r in rows:
        assert float(r["ndcg_delta"]) == 0.0 and float(r["arp_delta"]) == 0.0
        assert r["ndcg_sig"] == "" and r["arp_sig"] == ""
    assert rows[1]["model"].endswith("#2")


def test_compare_cobrar_deepmf_ratio(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("COBRAR_OUTPUT_ROOT", raising=False)
    a = tiny_config(tmp_path, "cobrar", arch="[8, 6]")
    b = tiny_config(tmp_path, "deepmf", arch="[8, 6]", dropout=0.0)
    assert run("prepare", "--config", a) == 0
    ca, cb = train(a, capsys), train(b, capsys)
    assert run("compare", "--config", a, "--checkpoint", ca, "--checkpoint", cb, "--out", tmp_path / "cmp") == 0
    rows = {r["model"].split("[")[0]: r for r in _compare_rows(tmp_path / "cmp" / "comparison_test_k5.tsv")}
    assert int(rows["deepmf"]["params_branch"]) == 2 * int(rows["cobrar"]["params_branch"])
    assert rows["cobrar"]["branch_ratio"] == "1" and rows["deepmf"]["branch_ratio"] == "2"
    assert int(rows["cobrar"]["params_branch"]) == 8 * 6 + 6 * 4


def test_compare_three_models_bonferroni(prepared, tmp_path, capsys):
    split = read_cache(load_config(prepared).cache_path)
    rng = np.random.default_rng(0)
    paths = []
    truth = split.test.to_dense().astype(float)
    for i, noise in enumerate([0.1, 3.0, 3.0]):
        p = tmp_path / f"s{i}.npz"
        checkpoint.save(p, ScoreMatrix(truth + noise * rng.normal(size=truth.shape)), split.fingerprint(),
                        extra={"label": f"m{i}"})
        paths += ["--checkpoint", p]
    assert run("compare", "--config", prepared, *paths, "--out", tmp_path / "cmp") == 0
    rows = _compare_rows(tmp_path / "cmp" / "comparison_test_k5.tsv")
    from cobrar.evaluation import paired_t_test
    reps = [evaluate(checkpoint.load(paths[2 * i + 1])[0], split, "test", 5) for i in range(3)]
    for i in (1, 2):
        t = paired_t_test(reps[0].ndcg, reps[i].ndcg, n_comparisons=2)
        assert float(rows[i]["ndcg_p"]) == t.p_value
        assert (rows[i]["ndcg_sig"] == "*") == (t.p_value < 0.025)


def test_compare_needs_two(prepared, capsys):
    ckpt = train(prepared, capsys)
    assert run("compare", "--config", prepared, "--checkpoint", ckpt) == 1


# -- boxplot -----------------------------------------------------------------

def test_boxplot_data(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("COBRAR_OUTPUT_ROOT", raising=False)
    archs = ["[8]", "[6, 6]"]
    ckpts = []
    for i, arch in enumerate(archs):
        for kind in ("cobrar", "deepmf"):
            cfg = tiny_config(tmp_path, kind, arch=arch, name=f"{kind}{i}.ini")
            if not ckpts:
                assert run("prepare", "--config", cfg) == 0
            ckpts.append(train(cfg, capsys))
    out = tmp_path / "box.csv"
    args = [a for c in ckpts for a in ("--checkpoint", c)]
    assert run("boxplot-data", "--config", tmp_path / "cobrar0.ini", *args, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "architecture,model,user_index,ndcg_at_5"
    split = read_cache(load_config(tmp_path / "cobrar0.ini").cache_path)
    n_users = int((split.test.user_degrees() > 0).sum())
    assert len(lines) - 1 == len(archs) * 2 * n_users
    # values match the per-user CSV of evaluate
    ckpt = ckpts[0]
    assert run("evaluate", "--config", tmp_path / "cobrar0.ini", "--checkpoint", ckpt) == 0
    per_user = {r["user_index"]: r["ndcg_at_k"] for r in csv.DictReader((ckpt.parent / "per_user_test_k5.csv").open())}
    box = {r["user_index"]: r["ndcg_at_5"] for r in csv.DictReader(out.open())
           if r["architecture"] == "8-4" and r["model"] == "cobrar"}
    assert box == per_user
    # unpaired architecture
    capsys.readouterr()
    assert run("boxplot-data", "--config", tmp_path / "cobrar0.ini", *args[:6], "--out", out) == 1
    assert "unpaired" in capsys.readouterr().err


# -- process level -----------------------------------------------------------

def test_exit_codes_via_subprocess(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "cobrar.cli", "prepare", "--config", str(tiny_config(tmp_path))],
                        capture_output=True, text=True, env={"COBRAR_OUTPUT_ROOT": str(tmp_path / "o"),
                                                             "PATH": "/usr/bin:/bin"})
    assert ok.returncode == 0 and ok.stderr == ""
    bad = subprocess.run([sys.executable, "-m", "cobrar.cli", "prepare", "--config", str(tmp_path / "none.ini")],
                         capture_output=True, text=True)
    assert bad.returncode == 1 and bad.stderr.startswith("error:")
    usage = subprocess.run([sys.executable, "-m", "cobrar.cli"], capture_output=True, text=True)
    assert usage.returncode != 0


def test_console_script_installed():
    exe = shutil.which("cobrar")
    if exe is None:
        pytest.skip("package not installed with console scripts")
    r = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "boxplot-data" in r.stdout

import csv
import json

import numpy as np
import pytest

from rflab.cli import EXIT_CONFIG, EXIT_DIVERGED, main
from rflab.config import ConfigError, dump_config, load_config
from rflab.datasets import Dataset, DatasetKind, ring_centers, sample_dataset
from rflab.metrics import energy_distance, energy_permutation_test, mmd_rbf, mode_distances
from rflab.records import RunRecord


# -- datasets ------------------------------------------------------------
def test_single_gaussian_mean():
    n = 100_000
    x, labels = sample_dataset(Dataset(DatasetKind.GAUSSIAN), n)
    assert labels is None
    assert np.all(np.abs(x.mean(axis=0)) < 3 / np.sqrt(n))


def test_ring_samples_near_centers():
    x, labels = sample_dataset(Dataset(DatasetKind.RING8, seed=3), 2000)
    _, nearest = mode_distances(x, ring_centers())
    assert np.all(np.abs(x - ring_centers()[labels]) < 4 * 0.2)
    assert np.array_equal(nearest, labels)
    np.testing.assert_allclose(np.linalg.norm(ring_centers(), axis=1), 4.0)


@pytest.mark.parametrize("kind", list(DatasetKind))
def test_datasets_are_reproducible(kind):
    from rflab.oracle import GaussianMixture

    mix = GaussianMixture.isotropic([[1.0, 0.0], [0.0, 1.0]], 0.1) if kind is DatasetKind.MIXTURE else None
    ds = Dataset(kind, seed=5, mixture=mix)
    a, la = sample_dataset(ds, 300)
    b, lb = sample_dataset(ds, 300)
    assert np.array_equal(a, b) and a.shape == (300, ds.dim)
    if ds.n_labels:
        assert np.array_equal(la, lb) and set(np.unique(la)) <= set(range(ds.n_labels))
    assert not np.array_equal(a, sample_dataset(ds, 300, stream=1)[0])


def test_checkerboard_occupies_even_cells():
    x, _ = sample_dataset(Dataset(DatasetKind.CHECKERBOARD), 5000)
    cells = np.floor((x + 4.0) / 2.0).astype(int)
    assert np.all((cells.sum(axis=1) % 2) == 0) and np.all(np.abs(x) <= 4.0)


def test_dataset_errors():
    with pytest.raises(ValueError):
        sample_dataset(Dataset(), 0)
    with pytest.raises(ValueError):
        Dataset(DatasetKind.MOONS).as_mixture()


# -- metrics -------------------------------------------------------------
def test_energy_distance_degenerate_and_point_masses(rng):
    a = rng.normal(size=(200, 2))
    assert energy_distance(a, a) <= 0 and abs(energy_distance(a, a)) < 0.05
    p, q = np.zeros((50, 2)), np.tile([3.0, 4.0], (50, 1))
    assert energy_distance(p, q) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        energy_distance(np.zeros((0, 2)), p)


def test_same_distribution_passes_permutation_test():
    r = np.random.default_rng(0)
    res = energy_permutation_test(r.normal(size=(10_000, 2)), r.normal(size=(10_000, 2)), n_perm=20)
    assert res.passed


def test_shifted_distribution_fails_permutation_test(rng):
    res = energy_permutation_test(rng.normal(size=(500, 2)), rng.normal(size=(500, 2)) + 0.5)
    assert not res.passed and res.p_value < 0.01


def test_permutation_statistic_matches_direct(rng):
    a, b = rng.normal(size=(40, 2)), rng.normal(size=(60, 2))
    assert energy_permutation_test(a, b, n_perm=5).statistic == pytest.approx(energy_distance(a, b), rel=1e-12)


def test_mmd(rng):
    a = rng.normal(size=(300, 2))
    assert abs(mmd_rbf(a, rng.normal(size=(300, 2)))) < 0.02
    assert mmd_rbf(a, rng.normal(size=(300, 2)) + 2.0) > 0.2


# -- config --------------------------------------------------------------
def test_config_defaults_and_overrides():
    cfg = load_config(text="[run]\nexperiment = rfds\n[distill]\ncfg_scale = 7\n", overrides=["distill.lr=0.01"])
    assert cfg["distill"]["cfg_scale"] == 7.0 and cfg["distill"]["lr"] == 0.01
    assert cfg["train"]["steps"] == 20000 and cfg["net"]["hidden"] == (128, 128, 128)


def test_config_errors_list_every_problem():
    with pytest.raises(ConfigError) as err:
        load_config(text="[run]\nexperiment = fly\n[nope]\na = 1\n[train]\nstep = 3\nlr = abc\n")
    text = str(err.value)
    for needle in ("[nope]", "train.step", "train.lr", "run.experiment"):
        assert needle in text
    assert len(err.value.problems) == 4


def test_config_echo_round_trips():
    cfg = load_config(text="[run]\nexperiment = train\nname = x\n[net]\nhidden = (32, 16)\n")
    assert load_config(text=dump_config(cfg)) == cfg
    assert dump_config(load_config(text=dump_config(cfg))) == dump_config(cfg)


# -- records -------------------------------------------------------------
def test_run_record_rows_and_csv(tmp_path):
    rec = RunRecord("r")
    rec.add(iter=0, loss=1.0)
    rec.add(iter=1, loss=0.5, extra=2)
    with pytest.raises(ValueError):
        rec.add(iter=1, loss=0.1)
    rec.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv", encoding="utf-8")))
    assert rows[0] == ["iter", "loss", "extra"] and rows[1] == ["0", "1.0", ""]
    rec.summary["a"] = np.float64(1.5)
    rec.write_summary(tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text())["summary"]["a"] == 1.5


# -- CLI -----------------------------------------------------------------
@pytest.fixture
def run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("RFLAB_RUN_ROOT", str(tmp_path))
    return tmp_path


def run_cli(*args):
    return main(list(args))


def test_cli_bridge_check(run_root, capsys):
    assert run_cli("bridge-check", "--set", "run.name=b") == 0
    out = capsys.readouterr().out
    assert "max bridge error" in out
    summary = json.loads((run_root / "b" / "summary.json").read_text())["summary"]
    assert summary["max_bridge_error"] <= 1e-8


def test_cli_bench_cost(run_root):
    assert run_cli("bench-cost", "--set", "run.name=c") == 0
    cost = json.loads((run_root / "c" / "cost.json").read_text())
    assert {k: (v["forward"], v["backward"]) for k, v in cost.items()} == {
        "rfds": (2, 0), "irfds": (1, 0), "rfds_rev": (3, 0), "sds": (2, 0)}


def test_cli_config_error_exit_code(run_root, capsys):
    assert run_cli("rfds", "--set", "distill.bogus=1", "--set", "nosuch.key=2") == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "distill.bogus" in err and "[nosuch]" in err
    assert run_cli("sample") == EXIT_CONFIG  # no checkpoint given


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_divergence_exit_code(run_root):
    code = run_cli("rfds", "--set", "model.field=oracle", "--set", "distill.lr=1e300", "--set", "distill.max_iters=50",
                   "--set", "distill.cfg_scale=50")
    assert code == EXIT_DIVERGED


def test_cli_rfds_oracle_writes_artifacts(run_root):
    assert run_cli("rfds-rev", "--set", "model.field=oracle", "--set", "distill.max_iters=20",
                   "--set", "distill.n_runs=5", "--set", "run.name=r", "--set", "data.n_holdout=100") == 0
    d = run_root / "r"
    for name in ("config.ini", "summary.json", "rfds_rev_run.csv", "rfds_rev_trace.csv", "rfds_rev_trace.svg"):
        assert (d / name).is_file()
    header = (d / "rfds_rev_trace.csv").read_text().splitlines()[0]
    assert header == "iter,run,theta0,theta1"


TINY = ["--set", "train.steps=60", "--set", "train.batch=64", "--set", "net.hidden=(16, 16)",
        "--set", "sampler.n_samples=100", "--set", "data.n_holdout=100", "--set", "sampler.steps=8"]


def test_cli_train_is_bit_identical_and_echo_reproduces(run_root):
    assert run_cli("train", *TINY, "--set", "run.name=a") == 0
    assert run_cli("train", *TINY, "--set", "run.name=b") == 0
    a, b = run_root / "a", run_root / "b"
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    for name in ("samples.csv", "loss.csv", "samples.svg", "trajectories.svg", "loss.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # re-running from the echo reproduces the run byte for byte
    echo = (a / "config.ini").read_text().replace("name = a", "name = c")
    (run_root / "echo.ini").write_text(echo)
    assert run_cli("train", "-c", str(run_root / "echo.ini")) == 0
    assert (run_root / "c" / "model.ckpt").read_bytes() == (a / "model.ckpt").read_bytes()


def test_cli_net_experiments_end_to_end(run_root):
    assert run_cli("train", *TINY, "--set", "run.name=base") == 0
    ckpt = str(run_root / "base" / "model.ckpt")
    common = ["--set", f"model.checkpoint={ckpt}", "--set", "distill.max_iters=10", "--set", "distill.n_runs=4",
              "--set", "data.n_holdout=100"]
    assert run_cli("sample", *common, *TINY[-6:], "--set", "run.name=s") == 0
    assert run_cli("reflow", *common, "--set", "reflow.n_pairs=100", "--set", "reflow.steps=10",
                   "--set", "reflow.sample_steps=4", "--set", "sampler.steps=4", "--set", "run.name=rf") == 0
    assert run_cli("invert", *common, "--set", "sampler.steps=4", "--set", "run.name=inv") == 0
    assert run_cli("irfds-edit", *common, "--set", "run.name=ed") == 0
    assert run_cli("rfds", *common, "--set", "distill.jacobian=both", "--set", "run.name=jac") == 0
    expected = {
        "s": ["samples.csv", "samples.svg", "trajectories.csv", "trajectories.svg"],
        "rf": ["reflow.ckpt", "trajectories_before.svg", "trajectories_after.svg"],
        "inv": ["recovered_noise.csv", "run.csv", "inversion.svg"],
        "ed": ["source.csv", "edited.csv", "edit.svg"],
        "jac": ["rfds_run.csv", "rfds_full_run.csv", "jacobian_ablation.svg", "rfds_trace.svg"],
    }
    for run, files in expected.items():
        for f in files:
            assert (run_root / run / f).is_file(), (run, f)
    summary = json.loads((run_root / "jac" / "summary.json").read_text())["summary"]
    assert "rfds_energy_distance" in summary and "rfds_full_energy_distance" in summary
    assert summary["rfds_full_backwards_per_iter"] == 2.0 and summary["rfds_backwards_per_iter"] == 0.0


def test_full_jacobian_on_oracle_is_config_error(run_root):
    assert run_cli("rfds", "--set", "model.field=oracle", "--set", "distill.jacobian=full") == EXIT_CONFIG

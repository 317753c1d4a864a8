import numpy as np
import pytest

from pcflow.cli import load_trajectory, main

CONFIG = """
[dataset]
shapes = ["sphere", "two-gaussians-3d"]
n_points = 24
superset_m = 96
seed = 42

[precompute]
method = "exact_hungarian"

[train]
coupling = "superset"
beta = 0.2
steps = 60
batch_size = 2
n_points = 24
width = 16
depth = 2
time_embed_dim = 8
seed = 7
log_every = 20

[sample]
count = 3
steps = 5
trajectories = true
n_points = 24

[eval]
gen_count = 6
ref_count = 6
steps_list = [1, 2, 5]
n_points = 24

[diag]
trajectories = 3
steps = 10
jacobian_probes = 4
n_points = 24

[bench]
batch_sizes = [1, 2]
trials = 1
n_points = 24
superset_m = 96
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.toml"
    cfg.write_text(CONFIG)
    return root


def run(workdir, *argv):
    return main([a.replace("{W}", str(workdir)) for a in argv])


def test_gen_data(workdir, capsys):
    assert run(workdir, "gen-data", "--config", f"{workdir}/config.toml", "--out", f"{workdir}/data") == 0
    assert (workdir / "data" / "sphere.xyz").exists()
    assert "wrote" in capsys.readouterr().out


def test_precompute_and_idempotence(workdir, capsys):
    out = f"{workdir}/couplings"
    assert run(workdir, "precompute", "--config", f"{workdir}/config.toml", "--out", out) == 0
    first = capsys.readouterr().out
    assert first.count("wrote") == 2
    assert run(workdir, "precompute", "--config", f"{workdir}/config.toml", "--out", out) == 0
    second = capsys.readouterr().out
    assert second.count("skipped") == 2


def test_precompute_recovers_corrupted_cache(workdir, capsys):
    out = workdir / "couplings"
    victim = out / "sphere.cpl"
    victim.write_bytes(b"JUNKJUNKJUNK")
    assert run(workdir, "precompute", "--config", f"{workdir}/config.toml", "--out", str(out)) == 0
    text = capsys.readouterr().out
    assert "warning" in text and "sphere.cpl" in text
    from pcflow.coupling import load_coupling

    assert load_coupling(victim).shape_id == "sphere"


def test_train_writes_artifacts(workdir):
    args = ["train", "--config", f"{workdir}/config.toml", "--out", f"{workdir}/couplings"]
    assert run(workdir, *args) == 0
    assert (workdir / "couplings" / "model.ckpt").exists()
    log = (workdir / "couplings" / "model_train_log.csv").read_text()
    assert log.startswith("# config_digest=")
    assert "step,loss,lr,grad_norm" in log


def test_train_rerun_byte_identical(workdir):
    log_path = workdir / "couplings" / "model_train_log.csv"
    before = log_path.read_bytes()
    assert run(workdir, "train", "--config", f"{workdir}/config.toml", "--out", f"{workdir}/couplings") == 0
    assert log_path.read_bytes() == before


def test_sample_writes_xyz_and_trajectories(workdir):
    args = ["sample", "--config", f"{workdir}/config.toml", "--out", f"{workdir}/samples",
            "--checkpoint", f"{workdir}/couplings/model.ckpt"]
    assert run(workdir, *args) == 0
    for k in range(3):
        assert (workdir / "samples" / f"sample_{k:03d}.xyz").exists()
    traj = load_trajectory(workdir / "samples" / "sample_000.traj")
    assert traj.vs.shape == (5, 24, 3)


def test_eval_rows_match_steps_list(workdir):
    args = ["eval", "--config", f"{workdir}/config.toml", "--out", f"{workdir}/eval",
            "--checkpoint", f"{workdir}/couplings/model.ckpt"]
    assert run(workdir, *args) == 0
    lines = [l for l in (workdir / "eval" / "eval.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "checkpoint,T,seed,onenna_cd,onenna_emd,cov_cd,cov_emd,gen,ref"
    assert len(lines) == 1 + 3  # one row per T in steps_list


def test_eval_rerun_byte_identical(workdir):
    path = workdir / "eval" / "eval.csv"
    before = path.read_bytes()
    assert run(workdir, "eval", "--config", f"{workdir}/config.toml", "--out", f"{workdir}/eval",
               "--checkpoint", f"{workdir}/couplings/model.ckpt") == 0
    assert path.read_bytes() == before


def test_diag_outputs(workdir):
    args = ["diag", "--config", f"{workdir}/config.toml", "--out", f"{workdir}/diag",
            "--checkpoint", f"{workdir}/couplings/model.ckpt"]
    assert run(workdir, *args) == 0
    curv = [l for l in (workdir / "diag" / "curvature.csv").read_text().splitlines() if not l.startswith("#")]
    assert curv[0] == "t,curvature"
    assert len(curv) == 1 + 9  # T-1 rows for a 10-step trajectory
    jac = (workdir / "diag" / "jacobian.csv").read_text()
    assert "t,jacobian_fro" in jac


def test_bench_coupling_csv(workdir):
    args = ["bench-coupling", "--config", f"{workdir}/config.toml", "--out", f"{workdir}/bench"]
    assert run(workdir, *args) == 0
    text = (workdir / "bench" / "bench_coupling.csv").read_text()
    assert "method,B,N,mean_cost,reduction_pct,seconds,note" in text
    assert "independent" in text and "superset" in text


def test_missing_checkpoint_is_config_error(workdir):
    code = run(workdir, "eval", "--config", f"{workdir}/config.toml", "--out", f"{workdir}/x",
               "--checkpoint", f"{workdir}/nope.ckpt")
    assert code == 2


def test_missing_config_is_config_error(workdir):
    assert run(workdir, "train", "--config", f"{workdir}/absent.toml") == 2


def test_exact_threshold_fails_fast(workdir, tmp_path):
    cfg = tmp_path / "big.toml"
    cfg.write_text(
        """
[dataset]
shapes = ["sphere"]
n_points = 8
superset_m = 10001
seed = 1

[precompute]
method = "exact_hungarian"
"""
    )
    assert main(["precompute", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 2


def test_resume_continues_training(workdir, tmp_path):
    base = CONFIG.replace("steps = 60", "steps = 30")
    cfg_short = tmp_path / "short.toml"
    cfg_short.write_text(base)
    out = tmp_path / "run"
    # couplings live next to the model; reuse precompute
    assert main(["precompute", "--config", str(cfg_short), "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg_short), "--out", str(out)]) == 0

    cfg_full = tmp_path / "full.toml"
    cfg_full.write_text(base.replace("steps = 30", "steps = 60").replace("[sample]", "resume = true\n[sample]"))
    assert main(["train", "--config", str(cfg_full), "--out", str(out)]) == 0
    resumed = [l for l in (out / "model_train_log.csv").read_text().splitlines() if not l.startswith("#")][1:]

    # uninterrupted 60-step reference
    ref_out = tmp_path / "ref"
    cfg_ref = tmp_path / "ref.toml"
    cfg_ref.write_text(base.replace("steps = 30", "steps = 60"))
    assert main(["precompute", "--config", str(cfg_ref), "--out", str(ref_out)]) == 0
    assert main(["train", "--config", str(cfg_ref), "--out", str(ref_out)]) == 0
    full = [l for l in (ref_out / "model_train_log.csv").read_text().splitlines() if not l.startswith("#")][1:]

    # the resumed segment reproduces the tail of the uninterrupted run bitwise
    tail = [l for l in full if int(l.split(",")[0]) >= 30]
    assert resumed == tail

"""Command-line entry point and experiment orchestration.

Subcommands: gen-data, precompute, train, sample, eval, diag,
bench-coupling.  Each reads a TOML config, resolves it with explicit
seeds, and writes CSV/XYZ/binary artifacts whose headers embed the config
digest and seed, so re-running a command with an identical config
reproduces byte-identical file bodies.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O or data-format failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import struct
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .coupling import (
    bench_couplings,
    coupling_digest,
    load_coupling,
    precompute_superset_coupling,
    save_coupling,
)
from .errors import ConfigError, DataFormatError, NumericError
from .geometry import (
    NormalizationStats,
    Superset,
    compute_normalization,
    generate_superset,
    normalize,
    write_xyz,
)
from .metrics import evaluate_sets, jacobian_frobenius, one_nna, trajectory_curvature
from .network import NetConfig, field_fn, load_checkpoint, save_checkpoint
from .rng import RngState
from .sampling import euler_sample, generate_set
from .training import TrainConfig, fit, load_resume, save_resume

_TRAJ_MAGIC = b"PCTJ"


def _load_config(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _fmt(value):
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_csv(path, comments, columns, rows):
    """CSV with '#' provenance lines; deterministic byte-for-byte."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in comments.items():
            fh.write(f"# {key}={value}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def _dataset_cfg(cfg):
    d = cfg.get("dataset")
    if not d:
        raise ConfigError("config is missing the [dataset] section")
    for key in ("shapes", "seed"):
        if key not in d:
            raise ConfigError(f"[dataset] requires {key!r}")
    d.setdefault("n_points", 512)
    d.setdefault("superset_m", 2048)
    return d


def _net_cfg(tr):
    return NetConfig(
        hidden_width=int(tr.get("width", 64)),
        depth=int(tr.get("depth", 3)),
        time_embed_dim=int(tr.get("time_embed_dim", 32)),
        cond_dim=int(tr.get("cond_dim", 0)),
        activation=tr.get("activation", "silu"),
    )


def _train_cfg(cfg, dataset, seed_override=None):
    tr = cfg.get("train", {})
    seed = seed_override if seed_override is not None else tr.get("seed", dataset["seed"])
    return TrainConfig(
        lr=float(tr.get("lr", 2e-4)),
        lr_decay=float(tr.get("lr_decay", 0.998)),
        lr_decay_every=int(tr.get("lr_decay_every", 1000)),
        ema_decay=float(tr.get("ema_decay", 0.9999)),
        batch_size=int(tr.get("batch_size", 8)),
        total_steps=int(tr.get("steps", 2000)),
        beta=float(tr.get("beta", 0.2)),
        coupling_mode=tr.get("coupling", "superset"),
        n_points=int(tr.get("n_points", dataset["n_points"])),
        seed=int(seed),
        ot_group_size=int(tr.get("ot_group_size", 0)),
        log_every=int(tr.get("log_every", 100)),
    )


def _shape_rng(dataset, kind, index):
    return RngState(dataset["seed"]).fork(index)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, out, seed_override, threads):
    dataset = _dataset_cfg(cfg)
    if seed_override is not None:
        dataset["seed"] = seed_override
    out.mkdir(parents=True, exist_ok=True)
    digest = _digest(dataset)
    for i, kind in enumerate(dataset["shapes"]):
        sup = generate_superset(kind, dataset["superset_m"], _shape_rng(dataset, kind, i))
        write_xyz(
            out / f"{kind}.xyz", sup,
            comment=f"kind={kind} m={dataset['superset_m']} seed={dataset['seed']} config_digest={digest}",
        )
        print(f"wrote {kind}.xyz ({sup.m} points)")
    return 0


def _coupling_paths(dataset, method, out):
    for i, kind in enumerate(dataset["shapes"]):
        digest = coupling_digest(kind, dataset["superset_m"], method, RngState(dataset["seed"]).fork(i).seed,
                                 extra={"shape_index": i, "dataset_seed": dataset["seed"]})
        yield i, kind, out / f"{kind}.cpl", digest


def cmd_precompute(cfg, out, seed_override, threads):
    dataset = _dataset_cfg(cfg)
    if seed_override is not None:
        dataset["seed"] = seed_override
    pc = cfg.get("precompute", {})
    method = pc.get("method", "exact_hungarian")
    out.mkdir(parents=True, exist_ok=True)

    # shared normalization across the dataset, computed from the raw supersets
    sups = {}
    for i, kind in enumerate(dataset["shapes"]):
        sups[kind] = generate_superset(kind, dataset["superset_m"], _shape_rng(dataset, kind, i))
    stats = compute_normalization([s for s in sups.values()])
    (out / "normalization.json").write_text(
        json.dumps({"global_mean": stats.global_mean.tolist(), "global_scale": stats.global_scale},
                   sort_keys=True)
    )

    jobs = []
    for i, kind, path, digest in _coupling_paths(dataset, method, out):
        if path.exists():
            try:
                existing = load_coupling(path)
                if existing.meta == digest:
                    print(f"skipped {path.name} (cache digest matches)")
                    continue
                print(f"recomputing {path.name} (stale digest)")
            except DataFormatError as exc:
                print(f"warning: recomputing {path.name} ({exc})")
        jobs.append((i, kind, path, digest))

    def build(job):
        i, kind, path, digest = job
        data = Superset(normalize(sups[kind], stats).points, kind="data")
        coupling = precompute_superset_coupling(
            data, RngState(dataset["seed"]).fork(i), method=method, shape_id=kind,
        )
        coupling.meta = digest
        save_coupling(path, coupling)
        return path.name

    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            for name in pool.map(_build_job, [(job, dataset, method, sups) for job in jobs]):
                print(f"wrote {name}")
    else:
        for job in jobs:
            print(f"wrote {build(job)}")
    return 0


def _build_job(packed):
    (i, kind, path, digest), dataset, method, sups = packed
    stats = compute_normalization([s for s in sups.values()])
    data = Superset(normalize(sups[kind], stats).points, kind="data")
    coupling = precompute_superset_coupling(
        data, RngState(dataset["seed"]).fork(i), method=method, shape_id=kind,
    )
    coupling.meta = digest
    save_coupling(path, coupling)
    return path.name


def _load_sources(cfg, dataset, mode, couplings_dir):
    if mode == "superset":
        sources = []
        for i, kind in enumerate(dataset["shapes"]):
            path = couplings_dir / f"{kind}.cpl"
            if not path.exists():
                raise ConfigError(f"missing coupling cache {path}; run precompute first")
            sources.append(load_coupling(path))
        return sources
    stats = _load_stats(couplings_dir)
    sources = []
    for i, kind in enumerate(dataset["shapes"]):
        sup = generate_superset(kind, dataset["superset_m"], _shape_rng(dataset, kind, i))
        sources.append(Superset(normalize(sup, stats).points, kind="data"))
    return sources


def _load_stats(couplings_dir):
    path = couplings_dir / "normalization.json"
    if not path.exists():
        return NormalizationStats()
    d = json.loads(path.read_text())
    return NormalizationStats(d["global_mean"], d["global_scale"])


def cmd_train(cfg, out, seed_override, threads):
    dataset = _dataset_cfg(cfg)
    tr = cfg.get("train", {})
    out.mkdir(parents=True, exist_ok=True)
    couplings_dir = Path(tr.get("couplings", out))
    betas = tr.get("betas", [tr.get("beta", 0.2)])
    net_cfg = _net_cfg(tr)
    stats = _load_stats(couplings_dir)

    for beta in betas:
        cfg_t = _train_cfg(cfg, dataset, seed_override)
        cfg_t.beta = float(beta)
        tag = f"beta{beta:g}" if len(betas) > 1 else "model"
        digest = _digest({"dataset": dataset, "train": tr, "beta": beta, "seed": cfg_t.seed})
        sources = _load_sources(cfg, dataset, cfg_t.coupling_mode, couplings_dir)
        resume_path = out / f"{tag}.resume.npz"

        state = None
        if tr.get("resume", False) and resume_path.exists():
            state = load_resume(resume_path)
            print(f"resuming {tag} from step {state.params.step_count}")
        state, log = fit(net_cfg, cfg_t, sources, state=state)

        save_checkpoint(
            out / f"{tag}.ckpt", state.params, seed=cfg_t.seed,
            normalization={"global_mean": stats.global_mean.tolist(), "global_scale": stats.global_scale},
        )
        save_resume(resume_path, state)
        write_csv(
            out / f"{tag}_train_log.csv",
            {"config_digest": digest, "seed": cfg_t.seed, "beta": _fmt(float(beta)),
             "coupling": cfg_t.coupling_mode},
            ["step", "loss", "lr", "grad_norm"],
            log,
        )
        print(f"trained {tag}: final loss {log[-1]['loss']:.6g}")
    return 0


def save_trajectory(path, traj):
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        t, n = traj.vs.shape[0], traj.vs.shape[1]
        fh.write(struct.pack("<III", 1, t, n))
        fh.write(traj.ts.astype("<f4").tobytes())
        fh.write(traj.xs.astype("<f4").tobytes())
        fh.write(traj.vs.astype("<f4").tobytes())


def load_trajectory(path):
    blob = Path(path).read_bytes()
    if blob[:4] != _TRAJ_MAGIC:
        raise DataFormatError(f"bad trajectory magic in {path}")
    _, t, n = struct.unpack_from("<III", blob, 4)
    off = 16
    ts = np.frombuffer(blob, "<f4", t, off).astype(np.float64)
    off += 4 * t
    xs = np.frombuffer(blob, "<f4", t * n * 3, off).astype(np.float64).reshape(t, n, 3)
    off += 4 * t * n * 3
    vs = np.frombuffer(blob, "<f4", t * n * 3, off).astype(np.float64).reshape(t, n, 3)
    from .sampling import Trajectory

    return Trajectory(ts, xs, vs, xs[-1] + (1.0 / t) * vs[-1])


def _checkpoint_stats(header):
    norm = header.get("normalization") or {}
    if not norm:
        return None
    return NormalizationStats(norm["global_mean"], norm["global_scale"])


def cmd_sample(cfg, out, seed_override, threads, checkpoint=None):
    sm = cfg.get("sample", {})
    dataset = _dataset_cfg(cfg)
    ckpt = Path(checkpoint or sm.get("checkpoint", ""))
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params, header, _ = load_checkpoint(ckpt)
    out.mkdir(parents=True, exist_ok=True)
    seed = seed_override if seed_override is not None else int(sm.get("seed", dataset["seed"]))
    count = int(sm.get("count", 4))
    steps = int(sm.get("steps", 50))
    n = int(sm.get("n_points", dataset["n_points"]))
    stats = _checkpoint_stats(header)
    digest = _digest({"sample": sm, "seed": seed, "checkpoint": header["step_count"]})

    rng = RngState(seed)
    clouds = generate_set(params, count, n, steps, rng, stats=stats)
    dump_traj = bool(sm.get("trajectories", False))
    for k, cloud in enumerate(clouds):
        write_xyz(out / f"sample_{k:03d}.xyz", cloud,
                  comment=f"sample={k} steps={steps} seed={seed} config_digest={digest}")
    if dump_traj:
        traj_rng = RngState(seed).fork(10_000)
        for k in range(count):
            x0 = traj_rng.normal((n, 3))
            _, traj = euler_sample(params, x0, steps)
            save_trajectory(out / f"sample_{k:03d}.traj", traj)
    print(f"wrote {count} samples at T={steps}")
    return 0


def _reference_set(dataset, count, n, seed):
    rng = RngState(seed)
    kinds = dataset["shapes"]
    return [
        generate_superset(kinds[i % len(kinds)], n, rng.fork(i))
        for i in range(count)
    ]


def cmd_eval(cfg, out, seed_override, threads, checkpoint=None):
    ev = cfg.get("eval", {})
    dataset = _dataset_cfg(cfg)
    ckpt = Path(checkpoint or ev.get("checkpoint", ""))
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params, header, _ = load_checkpoint(ckpt)
    out.mkdir(parents=True, exist_ok=True)
    seed = seed_override if seed_override is not None else int(ev.get("seed", dataset["seed"]))
    gen_count = int(ev.get("gen_count", 32))
    ref_count = int(ev.get("ref_count", gen_count))
    steps_list = [int(t) for t in ev.get("steps_list", [1, 2, 5, 10, 20, 50, 100])]
    n = int(ev.get("n_points", dataset["n_points"]))
    with_emd = bool(ev.get("emd", False))
    stats = _checkpoint_stats(header)
    digest = _digest({"eval": ev, "seed": seed, "dataset": dataset})

    ref = [c.points for c in _reference_set(dataset, ref_count, n, seed + 1_000_003)]
    rows = []
    for steps in steps_list:
        gen = generate_set(params, gen_count, n, steps, RngState(seed).fork(steps), stats=stats)
        gen_pts = [g.points for g in gen]
        if with_emd:
            rep = evaluate_sets(gen_pts, ref, steps)
            rows.append({"checkpoint": ckpt.name, "T": steps, "seed": seed,
                         "onenna_cd": rep.onenna_cd, "onenna_emd": rep.onenna_emd,
                         "cov_cd": rep.cov_cd, "cov_emd": rep.cov_emd,
                         "gen": gen_count, "ref": ref_count})
        else:
            from .metrics import coverage

            rows.append({"checkpoint": ckpt.name, "T": steps, "seed": seed,
                         "onenna_cd": one_nna(gen_pts, ref, "CD"), "onenna_emd": float("nan"),
                         "cov_cd": coverage(gen_pts, ref, "CD"), "cov_emd": float("nan"),
                         "gen": gen_count, "ref": ref_count})
        print(f"T={steps}: 1-NNA-CD={rows[-1]['onenna_cd']:.4f}")
    write_csv(out / "eval.csv", {"config_digest": digest, "seed": seed},
              ["checkpoint", "T", "seed", "onenna_cd", "onenna_emd", "cov_cd", "cov_emd", "gen", "ref"],
              rows)
    return 0


def cmd_diag(cfg, out, seed_override, threads, checkpoint=None):
    dg = cfg.get("diag", {})
    dataset = _dataset_cfg(cfg)
    ckpt = Path(checkpoint or dg.get("checkpoint", ""))
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params, header, _ = load_checkpoint(ckpt)
    out.mkdir(parents=True, exist_ok=True)
    seed = seed_override if seed_override is not None else int(dg.get("seed", dataset["seed"]))
    count = int(dg.get("trajectories", 8))
    steps = int(dg.get("steps", 50))
    probes = int(dg.get("jacobian_probes", 8))
    n = int(dg.get("n_points", dataset["n_points"]))
    digest = _digest({"diag": dg, "seed": seed})

    rng = RngState(seed)
    trajs = []
    for k in range(count):
        x0 = rng.normal((n, 3))
        _, traj = euler_sample(params, x0, steps)
        trajs.append(traj)

    curv = np.mean([trajectory_curvature(t).per_step for t in trajs], axis=0)
    rows = [{"t": trajs[0].ts[i + 1], "curvature": curv[i]} for i in range(len(curv))]
    write_csv(out / "curvature.csv", {"config_digest": digest, "seed": seed}, ["t", "curvature"], rows)

    fn = field_fn(params)
    times = dg.get("jacobian_times", [0.05, 0.25, 0.5, 0.75, 0.95])
    jrows = []
    probe_rng = RngState(seed).fork(777)
    for tval in times:
        vals = []
        for traj in trajs[: min(4, count)]:
            idx = min(int(float(tval) * steps), steps - 1)
            vals.append(jacobian_frobenius(fn, traj.xs[idx], traj.ts[idx], probes=probes, rng=probe_rng))
        jrows.append({"t": float(tval), "jacobian_fro": float(np.mean(vals))})
    write_csv(out / "jacobian.csv", {"config_digest": digest, "seed": seed}, ["t", "jacobian_fro"], jrows)
    print(f"wrote curvature.csv ({len(rows)} rows) and jacobian.csv ({len(jrows)} rows)")
    return 0


def cmd_bench_coupling(cfg, out, seed_override, threads):
    bc = cfg.get("bench", {})
    dataset = _dataset_cfg(cfg)
    seed = seed_override if seed_override is not None else int(bc.get("seed", dataset["seed"]))
    out.mkdir(parents=True, exist_ok=True)
    rows = bench_couplings(
        [int(b) for b in bc.get("batch_sizes", [1, 4, 16])],
        n=int(bc.get("n_points", dataset["n_points"])),
        trials=int(bc.get("trials", 4)),
        rng=RngState(seed),
        shape_kinds=tuple(dataset["shapes"]),
        superset_m=int(bc.get("superset_m", dataset["superset_m"])),
    )
    digest = _digest({"bench": bc, "dataset": dataset, "seed": seed})
    write_csv(out / "bench_coupling.csv", {"config_digest": digest, "seed": seed},
              ["method", "B", "N", "mean_cost", "reduction_pct", "seconds", "note"], rows)
    print(f"wrote bench_coupling.csv ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(prog="pcflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": cmd_gen_data,
        "precompute": cmd_precompute,
        "train": cmd_train,
        "sample": cmd_sample,
        "eval": cmd_eval,
        "diag": cmd_diag,
        "bench-coupling": cmd_bench_coupling,
    }
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".")
        p.add_argument("--threads", type=int, default=1)
        if name in ("sample", "eval", "diag"):
            p.add_argument("--checkpoint", default=None)

    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        kwargs = {}
        if hasattr(args, "checkpoint"):
            kwargs["checkpoint"] = args.checkpoint
        return commands[args.command](cfg, Path(args.out), args.seed, args.threads, **kwargs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

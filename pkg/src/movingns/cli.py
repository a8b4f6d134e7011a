"""Command-line orchestration: run, audit, resume, validate.

Configuration is one declarative INI-style file (key = value sections); a
run produces per-member trajectory CSVs, optional binary snapshots and
checkpoints, audit reports, and a manifest listing every output with its
content hash.  Re-running with the same (config, seed) reproduces every
byte.  Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import scipy

from . import __version__, diagnostics, fields, geometry, rereference, sde
from .fields import Grid, SolverError, save_snapshot, load_snapshot
from .geometry import MotionError, make_motion
from .oracle import oracle_trajectory
from .sde import NumericalError, SimConfig, StepperOptions, Trajectory

__all__ = ["ConfigError", "RunConfig", "load_config", "run", "audit",
           "resume", "validate", "main"]


class ConfigError(ValueError):
    """Configuration file problem, annotated with section.key."""


def _get(cp, section, key, conv, default=None, required=False):
    try:
        raw = cp.get(section, key, fallback=None)
    except configparser.Error as e:
        raise ConfigError(f"[{section}] {key}: {e}") from e
    if raw is None or raw.strip() == "":
        if required:
            raise ConfigError(f"[{section}] {key}: required key missing")
        return default
    try:
        return conv(raw.strip())
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from e


def _to_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _to_float(s: str) -> float:
    if s.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    return float(s)


def _to_floats(s: str) -> tuple:
    return tuple(float(p) for p in s.split(",") if p.strip())


@dataclass
class RunConfig:
    """Validated run description: simulation config plus orchestration keys."""

    sim: SimConfig
    seed: int
    ensemble: int
    workers: int
    checkpoint_every: int
    reference_auto: bool
    c0_source: str
    moment_sweep: tuple
    moment_members: int
    text: str
    motion_kind: str = ""
    extras: dict = field(default_factory=dict)


def load_config(path_or_text, seed_override=None) -> RunConfig:
    """Parse and validate a config file (path or raw text)."""
    if isinstance(path_or_text, str) and "\n" in path_or_text:
        text = path_or_text
    else:
        text = Path(path_or_text).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e

    t_final = _get(cp, "run", "T", _to_float, required=True)
    dt = _get(cp, "run", "dt", _to_float, required=True)
    if not dt > 0:
        raise ConfigError("[run] dt: must be positive")
    if not t_final > 0:
        raise ConfigError("[run] T: must be positive")
    seed = _get(cp, "run", "seed", int, default=0)
    if seed_override is not None:
        seed = int(seed_override)
    ensemble = _get(cp, "run", "ensemble", int, default=1)
    if ensemble < 1:
        raise ConfigError("[run] ensemble: must be >= 1")
    workers = _get(cp, "run", "workers", int, default=1)

    n = _get(cp, "grid", "n", int, required=True)
    if n < 8:
        raise ConfigError("[grid] n: must be >= 8")
    grid = Grid(n)

    kind = _get(cp, "motion", "kind", str, default="identity")
    t_max = _get(cp, "motion", "t_max", _to_float, default=t_final)
    if t_max < t_final:
        raise ConfigError("[motion] t_max: must cover the run horizon T")
    params = {}
    for key in ("amplitude", "omega"):
        val = _get(cp, "motion", key, _to_float)
        if val is not None:
            params[key] = val
    wav = _get(cp, "motion", "wavenumber", int)
    if wav is not None:
        params["wavenumber"] = wav
    try:
        motion = make_motion(kind, t_max=t_max, **params)
    except (MotionError, KeyError) as e:
        raise ConfigError(f"[motion] {e}") from e

    coupling = _get(cp, "noise", "coupling", str, default="none")
    noise = None
    if coupling != "none":
        noise = sde.make_noise_model(
            grid,
            K=_get(cp, "noise", "K", int, default=8),
            coupling=coupling,
            amplitude=_get(cp, "noise", "amplitude", _to_float, default=0.1),
            decay=_get(cp, "noise", "decay", _to_float, default=0.8),
        )

    init_kind = _get(cp, "initial", "kind", str, default="taylor_green")
    init_amp = _get(cp, "initial", "amplitude", _to_float, default=1.0)
    if init_kind == "snapshot":
        prefix = _get(cp, "initial", "path", str, required=True)
        v0, _ = load_snapshot(prefix)
        if v0.grid != grid:
            raise ConfigError("[initial] path: snapshot grid does not match")
    elif init_kind in fields.INITIAL_FIELDS:
        v0 = fields.INITIAL_FIELDS[init_kind](grid, amplitude=init_amp)
    else:
        raise ConfigError(f"[initial] kind = {init_kind!r}: unknown field")

    n0 = _get(cp, "cutoff", "N0", _to_float, default=math.inf)
    ceiling = _get(cp, "cutoff", "ceiling", _to_float, default=math.inf)
    escalate = _get(cp, "cutoff", "escalate", _to_bool, default=True)
    if not n0 > 0:
        raise ConfigError("[cutoff] N0: must be positive")

    auto_ref = _get(cp, "reference", "auto", _to_bool, default=False)
    c0_source = _get(cp, "reference", "c0", str, default="auto")
    safety = _get(cp, "reference", "safety", _to_float, default=0.5)
    max_interval = _get(cp, "reference", "max_interval", _to_float,
                        default=math.inf)
    check_every = _get(cp, "reference", "check_every", int, default=1)
    drift_threshold = _get(cp, "reference", "drift_threshold", _to_float)
    forced = _get(cp, "reference", "forced_times", _to_floats, default=())
    policy = None
    if auto_ref:
        c0 = 1.0 if c0_source == "auto" else float(c0_source)
        try:
            policy = rereference.ReferencePolicy(
                c0=c0, safety=safety, max_interval=max_interval,
                drift_threshold=drift_threshold, check_every=check_every)
        except ValueError as e:
            raise ConfigError(f"[reference] {e}") from e

    opts = StepperOptions(
        step_tol=_get(cp, "solver", "step_tol", _to_float, default=1e-12),
        p0h_tol=_get(cp, "solver", "p0h_tol", _to_float, default=1e-8),
        poisson_method=_get(cp, "solver", "poisson", str, default="direct"),
        poisson_tol=_get(cp, "solver", "poisson_tol", _to_float, default=1e-10),
    )
    if opts.poisson_method not in ("direct", "cg"):
        raise ConfigError("[solver] poisson: must be 'direct' or 'cg'")

    sim = SimConfig(
        grid=grid, motion=motion, t_final=t_final, dt=dt, v0=v0, noise=noise,
        n0=n0, ceiling=ceiling, escalate=escalate, policy=policy,
        forced_rereference=forced,
        sample_every=_get(cp, "output", "sample_every", int, default=1),
        snapshot_every=_get(cp, "output", "snapshot_every", int, default=0),
        opts=opts,
    )
    try:
        sim.n_steps()
    except ValueError as e:
        raise ConfigError(f"[run] T/dt: {e}") from e

    return RunConfig(
        sim=sim, seed=seed, ensemble=ensemble, workers=workers,
        checkpoint_every=_get(cp, "output", "checkpoint_every", int, default=0),
        reference_auto=auto_ref, c0_source=c0_source,
        moment_sweep=_get(cp, "audit", "moment_sweep", _to_floats,
                          default=(1.0, 2.0, 4.0, 8.0)),
        moment_members=_get(cp, "audit", "moment_members", int, default=32),
        text=text, motion_kind=kind,
    )


def _resolve_policy(rc: RunConfig) -> None:
    """Fill in the measured norm constant when c0 = auto was requested."""
    if rc.sim.policy is not None and rc.c0_source == "auto":
        c0 = diagnostics.estimate_c0(rc.sim.grid, n_samples=20,
                                     seed=rc.seed + 991)
        rc.sim.policy = rereference.ReferencePolicy(
            c0=c0, safety=rc.sim.policy.safety,
            max_interval=rc.sim.policy.max_interval,
            drift_threshold=rc.sim.policy.drift_threshold,
            check_every=rc.sim.policy.check_every)


# --------------------------------------------------------------------------
# run / resume
# --------------------------------------------------------------------------

def _member_hook(rc: RunConfig, outdir: Path, member: int):
    if rc.checkpoint_every <= 0:
        return None
    path = outdir / f"member{member:03d}.ckpt"

    def hook(state, traj):
        if state.step_index % rc.checkpoint_every == 0:
            sde.save_checkpoint(path, state, rc.text, traj.csv_rows())

    return hook


def _run_member(args):
    rc, outdir, member = args
    traj = sde.simulate(rc.sim, rc.seed, member=member,
                        hook=_member_hook(rc, Path(outdir), member))
    return member, traj


def _write_member_outputs(outdir: Path, member: int, rows: list[str],
                          traj: Trajectory | None):
    csv_path = outdir / f"member{member:03d}.csv"
    csv_path.write_text("\n".join(rows) + "\n")
    if traj is not None:
        for idx, (t, v) in enumerate(traj.snapshots):
            save_snapshot(v, t, str(outdir / f"member{member:03d}_snap{idx:06d}"),
                          extra={"member": member})


def _manifest(outdir: Path, rc_text: str, seed: int, command: str):
    files = {}
    for p in sorted(outdir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(outdir))] = hashlib.sha256(
                p.read_bytes()).hexdigest()
    doc = {
        "command": command,
        "config_sha256": hashlib.sha256(rc_text.encode()).hexdigest(),
        "seed": seed,
        "files": files,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "movingns": __version__,
        },
    }
    (outdir / "manifest.json").write_text(json.dumps(doc, sort_keys=True,
                                                     indent=2) + "\n")


def run(rc: RunConfig, outdir) -> Path:
    """Execute a single run or an ensemble; write all artifacts."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    _resolve_policy(rc)
    jobs = [(rc, str(outdir), m) for m in range(rc.ensemble)]
    if rc.workers > 1 and rc.ensemble > 1:
        with get_context("fork").Pool(min(rc.workers, rc.ensemble)) as pool:
            results = pool.map(_run_member, jobs)
    else:
        results = [_run_member(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    any_flagged = False
    for member, traj in results:
        _write_member_outputs(outdir, member, traj.csv_rows(), traj)
        any_flagged = any_flagged or traj.non_terminated
    summary = {
        "members": rc.ensemble,
        "non_terminated": any_flagged,
        "steps": rc.sim.n_steps(),
    }
    (outdir / "run_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _manifest(outdir, rc.text, rc.seed, "run")
    return outdir


def resume(checkpoint_path, outdir) -> Path:
    """Continue a checkpointed member and emit the same artifacts as an
    uninterrupted run of that member."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    state, config_text, rows = sde.load_checkpoint(checkpoint_path)
    rc = load_config(config_text)
    _resolve_policy(rc)
    member = state.rng.member
    traj = sde.simulate(rc.sim, rc.seed, member=member, start_state=state,
                        hook=_member_hook(rc, outdir, member))
    all_rows = rows + traj.csv_rows()[1:]
    _write_member_outputs(outdir, member, all_rows, None)
    _manifest(outdir, rc.text, rc.seed, "resume")
    return outdir


# --------------------------------------------------------------------------
# audits
# --------------------------------------------------------------------------

def audit(rc: RunConfig, which: str, outdir) -> Path:
    """Dispatch one of the audit commands; same determinism contract."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = rc.sim.grid
    if which == "norms":
        rep = diagnostics.norm_equivalence_audit(grid, n_samples=50,
                                                 seed=rc.seed)
        rep.save(outdir / "norms.txt")
    elif which == "iota":
        rng = np.random.default_rng(rc.seed)
        probes = [fields.random_solenoidal(grid, rng)
                  for _ in range(4)]
        lines = []
        for t in (0.0, rc.sim.t_final / 2, rc.sim.t_final):
            rep = diagnostics.iota_audit(rc.sim.motion, t, grid, probes)
            lines.extend(rep.lines() + [""])
        (outdir / "iota.txt").write_text("\n".join(lines))
    elif which == "delta":
        _resolve_policy(rc)
        policy = rc.sim.policy
        if policy is None:
            raise ConfigError("[reference] auto: delta audit needs a policy")
        t_max = rc.sim.motion.t_max
        scan = np.linspace(0.0, t_max / 2, 20)
        res = rereference.estimate_delta(policy, rc.sim.motion, grid, scan)
        rep = diagnostics.AuditReport(
            "delta",
            values={"delta": res["delta"], "resolution": res["resolution"]},
            counts={"t0_points": len(scan)},
            meta={"motion": rc.motion_kind, "n": grid.n},
        )
        rep.save(outdir / "delta.txt")
    elif which == "moment":
        ensembles = {}
        base_cfg = rc.sim
        for lvl in rc.moment_sweep:
            cfg = SimConfig(
                grid=base_cfg.grid, motion=base_cfg.motion,
                t_final=base_cfg.t_final, dt=base_cfg.dt, v0=base_cfg.v0,
                noise=base_cfg.noise, n0=lvl, ceiling=lvl, escalate=False,
                sample_every=base_cfg.sample_every, opts=base_cfg.opts,
            )
            jobs = [(RunConfig(sim=cfg, seed=rc.seed, ensemble=1, workers=1,
                               checkpoint_every=0, reference_auto=False,
                               c0_source="auto", moment_sweep=(),
                               moment_members=0, text=rc.text),
                     str(outdir), m) for m in range(rc.moment_members)]
            if rc.workers > 1:
                with get_context("fork").Pool(rc.workers) as pool:
                    results = pool.map(_run_member, jobs)
            else:
                results = [_run_member(j) for j in jobs]
            ensembles[lvl] = [t for _, t in sorted(results, key=lambda r: r[0])]
        v0 = fields.leray_project(rc.sim.v0)
        rep = diagnostics.moment_audit(ensembles, fields.norm_H1(v0),
                                       fields.norm_L2(v0))
        rep.save(outdir / "moment.txt")
    else:
        raise ConfigError(f"unknown audit '{which}' "
                          "(expected norms | iota | delta | moment)")
    _manifest(outdir, rc.text, rc.seed, f"audit:{which}")
    return outdir


def validate(rc: RunConfig) -> str:
    """Human-readable summary of a validated configuration."""
    sim = rc.sim
    lines = [
        f"grid: n = {sim.grid.n}",
        f"motion: {rc.motion_kind} (t_max = {sim.motion.t_max:g})",
        f"time: T = {sim.t_final:g}, dt = {sim.dt:g}, "
        f"steps = {sim.n_steps()}",
        f"noise: {sim.noise.coupling if sim.noise else 'none'}"
        + (f", K = {sim.noise.K}" if sim.noise else ""),
        f"cutoff: N0 = {sim.n0:g}, ceiling = {sim.ceiling:g}, "
        f"escalate = {sim.escalate}",
        f"reference: auto = {rc.reference_auto}, "
        f"forced = {list(sim.forced_rereference)}",
        f"ensemble: {rc.ensemble} member(s), seed = {rc.seed}, "
        f"workers = {rc.workers}",
    ]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _build_parser():
    p = argparse.ArgumentParser(prog="movingns",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run a single simulation or ensemble")
    pr.add_argument("config", help="path to the config file")
    pr.add_argument("--out", required=True, help="output directory")
    pr.add_argument("--seed", type=int, default=None, help="override seed")
    pr.add_argument("--workers", type=int, default=None)

    pa = sub.add_parser("audit", help="run a diagnostics audit")
    pa.add_argument("config")
    pa.add_argument("--which", required=True,
                    choices=["norms", "iota", "delta", "moment"])
    pa.add_argument("--out", required=True)
    pa.add_argument("--seed", type=int, default=None)
    pa.add_argument("--workers", type=int, default=None)

    ps = sub.add_parser("resume", help="continue from a checkpoint")
    ps.add_argument("checkpoint")
    ps.add_argument("--out", required=True)

    pv = sub.add_parser("validate", help="validate a config file")
    pv.add_argument("config")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            rc = load_config(args.config, seed_override=args.seed)
            if args.workers is not None:
                rc.workers = args.workers
            run(rc, args.out)
        elif args.command == "audit":
            rc = load_config(args.config, seed_override=args.seed)
            if args.workers is not None:
                rc.workers = args.workers
            audit(rc, args.which, args.out)
        elif args.command == "resume":
            resume(args.checkpoint, args.out)
        elif args.command == "validate":
            rc = load_config(args.config)
            print(validate(rc))
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, SolverError, MotionError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

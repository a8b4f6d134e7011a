import json
import math
from pathlib import Path

import numpy as np
import pytest

from movingns.cli import ConfigError, audit, load_config, main, resume, run, validate
from movingns.fields import load_snapshot

BASE_CONFIG = """
[run]
T = 0.01
dt = 1e-3
seed = 42
ensemble = 1
workers = 1

[grid]
n = 16

[motion]
kind = shear
amplitude = 0.2
omega = 3.14159
t_max = 1.0

[noise]
coupling = additive
K = 4
amplitude = 0.2

[initial]
kind = taylor_green
amplitude = 1.0

[output]
sample_every = 1
snapshot_every = 5
checkpoint_every = 4
"""


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_config_roundtrip(tmp_path):
    rc = load_config(_write(tmp_path, BASE_CONFIG))
    assert rc.sim.grid.n == 16
    assert rc.sim.noise.K == 4
    assert rc.seed == 42
    assert rc.sim.n_steps() == 10
    summary = validate(rc)
    assert "n = 16" in summary and "shear" in summary


def test_config_error_names_field(tmp_path):
    bad = BASE_CONFIG.replace("dt = 1e-3", "dt = 0")
    with pytest.raises(ConfigError, match=r"\[run\] dt"):
        load_config(_write(tmp_path, bad))
    bad2 = BASE_CONFIG.replace("n = 16", "n = 4")
    with pytest.raises(ConfigError, match=r"\[grid\] n"):
        load_config(_write(tmp_path, bad2))
    bad3 = BASE_CONFIG.replace("kind = shear", "kind = warp")
    with pytest.raises(ConfigError, match=r"\[motion\]"):
        load_config(_write(tmp_path, bad3))


def test_main_exit_codes(tmp_path, capsys):
    cfg = _write(tmp_path, BASE_CONFIG)
    assert main(["validate", str(cfg)]) == 0
    bad = _write(tmp_path, BASE_CONFIG.replace("dt = 1e-3", "dt = -1"), "bad.cfg")
    assert main(["validate", str(bad)]) == 2
    out = tmp_path / "out"
    assert main(["audit", str(cfg), "--which", "nonsense", "--out",
                 str(out)]) == 2


def test_run_produces_artifacts_and_manifest(tmp_path):
    cfg = _write(tmp_path, BASE_CONFIG)
    rc = load_config(cfg)
    out = run(rc, tmp_path / "out")
    csv = (out / "member000.csv").read_text().splitlines()
    assert csv[0].startswith("step,t,t0,N")
    assert len(csv) == 12  # header + 11 samples
    manifest = json.loads((out / "manifest.json").read_text())
    assert "member000.csv" in manifest["files"]
    assert manifest["seed"] == 42
    # snapshots present and loadable
    snaps = sorted(out.glob("member000_snap*_u1.fld"))
    assert snaps
    v, t = load_snapshot(str(snaps[0]).replace("_u1.fld", ""))
    assert v.grid.n == 16
    # every listed hash matches the file content
    import hashlib

    for rel, digest in manifest["files"].items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest


def test_run_byte_identical_reruns(tmp_path):
    cfg = _write(tmp_path, BASE_CONFIG)
    out1 = run(load_config(cfg), tmp_path / "a")
    out2 = run(load_config(cfg), tmp_path / "b")
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["files"] == m2["files"]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = _write(tmp_path, BASE_CONFIG)
    full = run(load_config(cfg), tmp_path / "full")
    ckpt = tmp_path / "full" / "member000.ckpt"
    assert ckpt.exists()
    resumed = resume(ckpt, tmp_path / "resumed")
    a = (tmp_path / "full" / "member000.csv").read_bytes()
    b = (resumed / "member000.csv").read_bytes()
    assert a == b


def test_ensemble_run_with_workers(tmp_path):
    text = BASE_CONFIG.replace("ensemble = 1", "ensemble = 3").replace(
        "workers = 1", "workers = 2").replace("checkpoint_every = 4",
                                              "checkpoint_every = 0")
    out = run(load_config(_write(tmp_path, text)), tmp_path / "ens")
    members = sorted(out.glob("member*.csv"))
    assert len(members) == 3
    # distinct members see distinct noise
    assert members[0].read_bytes() != members[1].read_bytes()
    # serial execution produces the same bytes as the pooled one
    text_serial = text.replace("workers = 2", "workers = 1")
    out2 = run(load_config(_write(tmp_path, text_serial, "s.cfg")),
               tmp_path / "ens_serial")
    for m in ("member000.csv", "member001.csv", "member002.csv"):
        assert (out / m).read_bytes() == (out2 / m).read_bytes()


def test_audit_commands(tmp_path):
    text = BASE_CONFIG + "\n[reference]\nauto = true\nc0 = auto\n" \
        "safety = 0.5\nmax_interval = 0.25\n\n[audit]\n" \
        "moment_sweep = 1,2\nmoment_members = 2\n"
    cfg = _write(tmp_path, text)
    rc = load_config(cfg)
    out = audit(rc, "norms", tmp_path / "an")
    assert (out / "norms.txt").read_text().startswith("audit = norms")
    out = audit(load_config(cfg), "delta", tmp_path / "ad")
    body = (out / "delta.txt").read_text()
    assert "delta = " in body
    out = audit(load_config(cfg), "iota", tmp_path / "ai")
    assert "c2" in (out / "iota.txt").read_text()
    out = audit(load_config(cfg), "moment", tmp_path / "am")
    assert "fitted_C" in (out / "moment.txt").read_text()


def test_audit_determinism(tmp_path):
    cfg = _write(tmp_path, BASE_CONFIG)
    a = audit(load_config(cfg), "norms", tmp_path / "n1")
    b = audit(load_config(cfg), "norms", tmp_path / "n2")
    assert (a / "norms.txt").read_bytes() == (b / "norms.txt").read_bytes()


def test_snapshot_initial_condition(tmp_path):
    cfg = _write(tmp_path, BASE_CONFIG)
    out = run(load_config(cfg), tmp_path / "first")
    snap = sorted(out.glob("member000_snap*_u1.fld"))[-1]
    prefix = str(snap).replace("_u1.fld", "")
    text = BASE_CONFIG.replace("kind = taylor_green",
                               "kind = snapshot\npath = " + prefix)
    rc = load_config(_write(tmp_path, text, "snap.cfg"))
    out2 = run(rc, tmp_path / "second")
    assert (out2 / "member000.csv").exists()

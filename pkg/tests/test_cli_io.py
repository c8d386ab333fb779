import json
from pathlib import Path

import numpy as np
import pytest

from mfgpd import cli
from mfgpd.config import load_config, parse_config
from mfgpd.io import (
    HEADER,
    MAGIC,
    SnapshotError,
    format_seconds,
    read_field_snapshot,
    snapshot_steps,
    write_field_snapshot,
)
from mfgpd.primal_dual import ConfigError

SMALL = """
[grid]
N_h = 8
N_T = 4
nu = 0.3

[coupling]
kind = sincos

[solver]
gamma = 3.0
tau = 0.3
tol_cp = 1e-5

[output]
directory = {out}
formats = csv, raw
stride = 3
"""


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_raw_round_trip_is_bitwise(tmp_path, rng):
    field = rng.standard_normal((3, 5, 5))
    field[0, 0, 0] = np.nextafter(1.0, 2.0)
    p = write_field_snapshot(field, tmp_path / "f.raw", "raw")
    data = p.read_bytes()
    magic, K, n1, n2 = HEADER.unpack_from(data)
    assert (magic, K, n1, n2) == (MAGIC, 3, 5, 5)
    assert len(data) == 32 + 8 * 75
    back = read_field_snapshot(p)
    assert back.tobytes() == field.tobytes()


def test_csv_round_trip_and_zero_field(tmp_path, rng):
    field = rng.standard_normal((2, 4, 4))
    assert np.array_equal(read_field_snapshot(write_field_snapshot(field, tmp_path / "a.csv", "csv")), field)
    zeros = np.zeros((4, 4))
    p = write_field_snapshot(zeros, tmp_path / "z.csv", "csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "k,i,j,value" and len(lines) == 17
    assert all(line.endswith(",0") for line in lines[1:])
    assert read_field_snapshot(p).shape == (1, 4, 4)


def test_sidecar_records_checksum(tmp_path):
    import hashlib

    p = write_field_snapshot(np.ones((2, 2)), tmp_path / "o.raw")
    meta = json.loads((tmp_path / "o.raw.json").read_text())
    assert meta["format"] == "raw" and meta["shape"] == [1, 2, 2]
    assert meta["sha256"] == hashlib.sha256(p.read_bytes()).hexdigest()


def test_tampered_snapshot_is_detected(tmp_path):
    p = write_field_snapshot(np.ones((3, 3)), tmp_path / "t.raw")
    data = bytearray(p.read_bytes())
    data[-1] ^= 0x01
    p.write_bytes(bytes(data))
    with pytest.raises(SnapshotError, match="checksum"):
        read_field_snapshot(p)
    assert read_field_snapshot(p, verify=False).shape == (1, 3, 3)


def test_bad_snapshot_inputs(tmp_path):
    with pytest.raises(ValueError):
        write_field_snapshot(np.ones(4), tmp_path / "x.raw")
    with pytest.raises(ValueError):
        write_field_snapshot(np.ones((2, 2)), tmp_path / "x.bin", "npy")
    with pytest.raises(SnapshotError):
        read_field_snapshot(tmp_path / "missing.raw")


@pytest.mark.parametrize("N_T,stride,expected", [(8, 3, [0, 3, 6, 8]), (4, 10, [0, 4]), (4, 1, [0, 1, 2, 3, 4])])
def test_snapshot_steps(N_T, stride, expected):
    assert snapshot_steps(N_T, stride) == expected


def test_format_seconds():
    assert format_seconds(1.23456) == "1.23"
    assert format_seconds(0.000123456) == "0.000123"


def test_step_size_config_error_names_both_fields(tmp_path, capsys):
    text = SMALL.format(out=tmp_path / "o").replace("tau = 0.3", "tau = 0.5")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert "gamma" in str(exc.value) and "tau" in str(exc.value)
    code = cli.main(["solve", str(_write(tmp_path, text))])
    assert code == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "gamma" in err and "tau" in err


@pytest.mark.parametrize(
    "old,new,key",
    [
        ("nu = 0.3", "nu = 0.3\ncolour = red", "colour"),
        ("[coupling]", "[extra]\na = 1\n[coupling]", "extra"),
        ("N_h = 8", "N_h = 12", "N_h"),
        ("formats = csv, raw", "formats = hdf5", "formats"),
    ],
)
def test_config_errors_name_the_field(tmp_path, old, new, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(SMALL.format(out=tmp_path).replace(old, new))
    assert key.lower() in str(exc.value).lower()


def test_empty_sweep_is_rejected(tmp_path):
    text = SMALL.format(out=tmp_path / "o") + "\n[sweep]\nnu =\nsolvers = bicgstab:multigrid\n"
    cfg = parse_config(text)
    with pytest.raises(ConfigError):
        cli.run_bench_linsolve(cfg)


def test_missing_config_is_io_error(tmp_path):
    assert cli.main(["solve", str(tmp_path / "nope.ini")]) == cli.EXIT_IO


def test_presets_load():
    for name in ("sincos", "turnpike", "evolution", "bench_linsolve", "cond_estimate"):
        cfg = load_config(f"preset:{name}")
        assert cfg.cp.gamma * cfg.cp.tau < 1


def test_end_to_end_solve(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["solve", str(_write(tmp_path, SMALL.format(out=out)))])
    assert code == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["converged"]
    assert manifest["residuals"]["mass_deviation_max"] <= 1e-10
    for k in (0, 3, 4):
        for fmt in ("csv", "raw"):
            assert (out / f"m_k{k:04d}.{fmt}").exists()
            assert (out / f"m_k{k:04d}.{fmt}.json").exists()
    assert not (out / "m_k0001.csv").exists()
    u = read_field_snapshot(out / "u.raw")
    assert u.shape == (5, 8, 8)
    np.testing.assert_array_equal(u, read_field_snapshot(out / "u.csv"))
    m0 = read_field_snapshot(out / "m_k0000.raw")
    np.testing.assert_allclose(m0, 1.0, atol=1e-12)
    turn = (out / "turnpike.csv").read_text().splitlines()
    assert turn[0].startswith("# mfgpd ")
    rows = [line for line in turn if not line.startswith("#")]
    assert rows[0] == "k,t,distance" and len(rows) == 6
    diag = [line for line in (out / "diagnostics.csv").read_text().splitlines() if not line.startswith("#")]
    assert len(diag) == manifest["iterations"] + 1


def test_output_dir_environment_override(tmp_path, monkeypatch):
    env_out = tmp_path / "env"
    monkeypatch.setenv("MFG_OUTPUT_DIR", str(env_out))
    assert cli.main(["solve", str(_write(tmp_path, SMALL.format(out=tmp_path / "ignored")))]) == 0
    assert (env_out / "manifest.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_manifest_replay_reproduces_run(tmp_path):
    out = tmp_path / "first"
    assert cli.main(["solve", str(_write(tmp_path, SMALL.format(out=out)))]) == 0
    first = read_field_snapshot(out / "u.raw")
    cfg = load_config(out / "manifest.json")
    assert Path(cfg.output_dir) == out.resolve()
    replay_out = tmp_path / "replay"
    import os

    os.environ["MFG_OUTPUT_DIR"] = str(replay_out)
    try:
        assert cli.main(["solve", str(out / "manifest.json")]) == 0
    finally:
        del os.environ["MFG_OUTPUT_DIR"]
    np.testing.assert_array_equal(read_field_snapshot(replay_out / "u.raw"), first)


def test_unconverged_exit_code(tmp_path):
    text = SMALL.format(out=tmp_path / "o").replace("tol_cp = 1e-5", "tol_cp = 1e-5\nmax_iters = 2")
    assert cli.main(["solve", str(_write(tmp_path, text))]) == cli.EXIT_UNCONVERGED


def test_info_command(tmp_path, capsys):
    p = write_field_snapshot(np.full((2, 4, 4), 2.0), tmp_path / "i.raw")
    assert cli.main(["info", str(p)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["shape"] == [2, 4, 4] and info["max"] == 2.0
    assert info["mass_per_slice"] == [2.0, 2.0]


def test_bench_and_cond_small(tmp_path):
    text = SMALL.format(out=tmp_path / "b") + (
        "\n[sweep]\nnu = 0.1, 0.5\nsizes = 8x4\nsolvers = bicgstab:multigrid, cg:jacobi\nfactors = 1e-3, 1e-8\n"
    )
    cfg = parse_config(text)
    code, results = cli.run_bench_linsolve(cfg)
    assert code == 0 and len(results) == 4
    table = [l for l in (tmp_path / "b" / "bench_linsolve_table.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(table) == 3
    assert table[0].split(",")[1] == "bicgstab+multigrid@8x4:0.001"
    code, conds = cli.run_cond_estimate(cfg)
    assert code == 0 and conds[0]["kappa"] < conds[1]["kappa"]

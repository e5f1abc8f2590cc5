"""Binary matrix format, versioned CSV, config text, and seed substreams."""

import numpy as np
import pytest

from pvga.errors import ConfigError, InvalidData
from pvga.formats import (
    dump_config_text,
    load_config,
    parse_config_text,
    read_csv,
    read_vgam,
    substream,
    substream_seed,
    write_csv,
    write_vgam,
)


# -- binary matrices ---------------------------------------------------------


def test_vgam_round_trip(tmp_path, rng):
    M = rng.standard_normal((7, 3))
    p = tmp_path / "m.vgam"
    write_vgam(p, M)
    np.testing.assert_array_equal(read_vgam(p), M)  # bit-exact


def test_vgam_vector_becomes_column(tmp_path, rng):
    v = rng.standard_normal(5)
    p = tmp_path / "v.vgam"
    write_vgam(p, v)
    out = read_vgam(p)
    assert out.shape == (5, 1)
    np.testing.assert_array_equal(out[:, 0], v)


def test_vgam_header_layout(tmp_path):
    p = tmp_path / "h.vgam"
    write_vgam(p, np.zeros((2, 3)))
    blob = p.read_bytes()
    assert blob[:4] == b"VGAM"
    assert blob[4] == 1
    assert np.frombuffer(blob[5:21], dtype="<u8").tolist() == [2, 3]
    assert len(blob) == 21 + 6 * 8


def test_vgam_rejects_corruption(tmp_path):
    p = tmp_path / "bad.vgam"
    write_vgam(p, np.ones((2, 2)))
    blob = bytearray(p.read_bytes())

    wrong_magic = tmp_path / "magic.vgam"
    wrong_magic.write_bytes(b"XGAM" + bytes(blob[4:]))
    with pytest.raises(InvalidData):
        read_vgam(wrong_magic)

    wrong_version = tmp_path / "vers.vgam"
    wrong_version.write_bytes(bytes(blob[:4]) + bytes([9]) + bytes(blob[5:]))
    with pytest.raises(InvalidData):
        read_vgam(wrong_version)

    truncated = tmp_path / "trunc.vgam"
    truncated.write_bytes(bytes(blob[:-8]))
    with pytest.raises(InvalidData):
        read_vgam(truncated)

    with pytest.raises(InvalidData):
        write_vgam(tmp_path / "t.vgam", np.zeros((2, 2, 2)))


# -- CSV ----------------------------------------------------------------------


def test_csv_round_trip_full_precision(tmp_path, rng):
    x = rng.standard_normal(9)
    k = np.arange(9)
    p = tmp_path / "t.csv"
    write_csv(p, ["k", "x"], [k, x])
    back = read_csv(p)
    np.testing.assert_array_equal(back["x"], x)  # %.17g survives float64 exactly
    np.testing.assert_array_equal(back["k"], k.astype(float))


def test_csv_schema_line(tmp_path):
    p = tmp_path / "s.csv"
    write_csv(p, ["a", "b"], [np.zeros(2), np.ones(2)])
    first = p.read_text().splitlines()[0]
    assert first.startswith("# pvga-csv v")
    assert first.endswith("a,b")


def test_csv_guards(tmp_path):
    with pytest.raises(InvalidData):
        write_csv(tmp_path / "g.csv", ["a"], [np.zeros(2), np.zeros(2)])
    with pytest.raises(InvalidData):
        write_csv(tmp_path / "g.csv", ["a", "b"], [np.zeros(2), np.zeros(3)])
    bare = tmp_path / "bare.csv"
    bare.write_text("1,2\n3,4\n")
    with pytest.raises(InvalidData):
        read_csv(bare)


# -- config text ---------------------------------------------------------------


def test_config_round_trip_identity():
    cfg = {
        "problem": {"name": "phillips", "size": 100, "seed": 0, "rate_scale": None},
        "prior": {"kind": "L2", "alpha": 0.1},
        "solver": {"mode": "dense", "max_outer": 50, "outer_tol_elbo": 1e-10},
        "emit": {"csv": True, "binary": False},
    }
    assert parse_config_text(dump_config_text(cfg)) == cfg


def test_config_parses_sections_and_comments():
    text = """
    # experiment
    problem.name = "gravity"
    problem.size = 60
    solver.pcg_tol = 1e-06
    emit.csv = true
    """
    cfg = parse_config_text(text)
    assert cfg["problem"] == {"name": "gravity", "size": 60}
    assert cfg["solver"]["pcg_tol"] == 1e-6
    assert cfg["emit"]["csv"] is True


def test_config_accepts_json():
    cfg = parse_config_text('{"problem": {"name": "heat", "size": 40}}')
    assert cfg["problem"]["size"] == 40


def test_config_diagnostics():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("problem.name phillips")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("a.b = 1\na..c = 2")
    with pytest.raises(ConfigError):
        parse_config_text('{"unterminated": ')
    with pytest.raises(ConfigError):
        parse_config_text("a = 1\na.b = 2")  # scalar reused as a section


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.cfg")


# -- substreams ----------------------------------------------------------------


def test_substreams_are_deterministic_and_distinct():
    assert substream_seed(7, "data") == substream_seed(7, "data")
    assert substream_seed(7, "data") != substream_seed(7, "mcmc")
    assert substream_seed(7, "data") != substream_seed(8, "data")

    a = substream(7, "data").standard_normal(5)
    b = substream(7, "data").standard_normal(5)
    c = substream(7, "rsvd").standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)

import json

from pipl.cli import EXIT_CHECK, EXIT_OK, EXIT_PARSE, emit_plotdata, main, run


def write_config(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


FORWARD_CFG = """
[grid]
dim = 1
lower = 0
upper = 1
nx = 33
nt = 32
T = 0.1

[model]
gamma = "1"
nonlinearity = "0"
class = linear-potential

[experiment]
kind = forward
scheme = cn
seed = 7

[forward]
initial = "sin(pi*x)"
oracle = "exp(-pi^2*t)*sin(pi*x)"
convergence = 17 33 65
"""


def test_forward_experiment_runs(tmp_path):
    cfg = write_config(tmp_path, "fwd.ini", FORWARD_CFG)
    out = tmp_path / "out"
    code = run("forward", cfg, out, check=True)
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["kind"] == "forward" and manifest["seed"] == 7
    report = json.loads((out / "report.json").read_text())
    assert report["metrics"]["observed_order"] >= 1.8
    assert (out / "solution.csv").exists()
    assert (out / "convergence.csv").exists()


def test_malformed_expression_exits_2(tmp_path):
    bad = FORWARD_CFG.replace('"sin(pi*x)"', '"sin("')
    cfg = write_config(tmp_path, "bad.ini", bad)
    out = tmp_path / "out"
    code = run("forward", cfg, out, check=False)
    assert code == EXIT_PARSE
    err = json.loads((out / "error.json").read_text())
    assert "byte_offset" in err


def test_kind_mismatch_exits_2(tmp_path):
    cfg = write_config(tmp_path, "fwd.ini", FORWARD_CFG)
    assert run("maxprin", cfg, tmp_path / "o") == EXIT_PARSE


def test_cgo_check_failure_exit_4(tmp_path):
    # coarse time grid + huge rho: unresolved boundary layer, remainders
    # need not decay -> check mode must gate it
    cfg = write_config(
        tmp_path,
        "cgo.ini",
        """
[grid]
nx = 17
nt = 8
T = 1.0

[experiment]
kind = cgo-verify

[cgo]
rhos = 64 128 256 512
""",
    )
    code = run("cgo-verify", cfg, tmp_path / "out", check=True)
    assert code == EXIT_CHECK
    assert (tmp_path / "out" / "check_failures.json").exists()


def test_cgo_check_passes_when_resolved(tmp_path):
    cfg = write_config(
        tmp_path,
        "cgo.ini",
        """
[grid]
nx = 129
nt = 256
T = 1.0

[experiment]
kind = cgo-verify

[cgo]
rhos = 8 16 32 64
""",
    )
    out = tmp_path / "out"
    assert run("cgo-verify", cfg, out, check=True) == EXIT_OK
    rows = (out / "remainder_decay.csv").read_text().splitlines()
    assert rows[0] == "rho,remainder_norm,residual"
    assert len(rows) == 5


def test_maxprin_and_nonunique(tmp_path):
    cfg = write_config(
        tmp_path,
        "mp.ini",
        """
[grid]
nx = 33
nt = 16
T = 0.5
""",
    )
    assert run("maxprin", cfg, tmp_path / "mp") == EXIT_OK
    cfg2 = write_config(
        tmp_path,
        "nu.ini",
        """
[grid]
nx = 129
nt = 8
T = 0.5
""",
    )
    assert run("nonunique-demo", cfg2, tmp_path / "nu", check=True) == EXIT_OK


def test_manifest_reproducibility(tmp_path):
    cfg = write_config(tmp_path, "fwd.ini", FORWARD_CFG)
    run("forward", cfg, tmp_path / "a")
    run("forward", cfg, tmp_path / "b")
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    ma.pop("wall_time_s")
    mb.pop("wall_time_s")
    assert json.dumps(ma, sort_keys=True) == json.dumps(mb, sort_keys=True)


def test_env_seed_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, "fwd.ini", FORWARD_CFG)
    monkeypatch.setenv("PIPL_SEED", "123")
    run("forward", cfg, tmp_path / "o")
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["seed"] == 123


def test_emit_plotdata_empty_report(tmp_path):
    files = emit_plotdata({}, "stability", tmp_path)
    text = (tmp_path / "stability_curve.csv").read_text().splitlines()
    assert text == ["delta,trial,error,dn_diff_norm"]


def test_main_entrypoint(tmp_path):
    cfg = write_config(tmp_path, "fwd.ini", FORWARD_CFG)
    code = main(["forward", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == EXIT_OK


def test_unreadable_config(tmp_path):
    assert run("forward", tmp_path / "missing.ini", tmp_path / "o") == EXIT_PARSE

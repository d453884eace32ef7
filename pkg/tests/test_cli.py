import csv
import json

import pytest

from ddro import cli
from ddro.bundle import ResultBundle, improvement, report
from ddro.config import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config, parse_document

TINY = """
seed = 3
methods = ["ml", "dml", "ddro"]
output = "tiny"

[diffusion]
T = 10
tuned_steps = 4
train_steps = 30
hidden = 8
emb_dim = 4

[inner]
K = 2            # two inner rounds per outer iteration
n_eval = 16
batch_size = 16
dsm_repeats = 1

[outer]
iterations = 2
epochs = 1
batch_size = 32

[predictor]
L_in = 6
hidden = [8]
pretrain_epochs = 2

[data]
length = 80
test_length = 40

[noise]
gaussian_levels = [0.0, 0.2]
"""


def write(tmp_path, text, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_document_literals_and_lines():
    doc, lines = parse_document("a = 1\n# c\n[s]\nb = [1, 2]  # trailing\nc = hello\nd = 'x#y'\n")
    assert doc[""] == {"a": 1} and doc["s"] == {"b": [1, 2], "c": "hello", "d": "x#y"}
    assert lines == {"a": 1, "s.b": 4, "s.c": 5, "s.d": 6}


@pytest.mark.parametrize(
    "text,line,fragment",
    [
        ("[inner]\nkappa = 1.5\n", 2, "kappa"),
        ("[inner]\nK = 'ten'\n", 2, "integer"),
        ("seed = 1\n[bogus]\nx = 1\n", 3, "unknown section"),
        ("[outer]\nwat = 1\n", 2, "unknown key"),
        ("[outer\n", 1, "malformed"),
        ("x\n", 1, "key = value"),
        ("[inner]\nK = 1\nK = 2\n", 3, "duplicate"),
        ("methods = ['ml', 'gan']\n", 1, "unknown method"),
        ("[data]\nsource = 'csv'\ntrain_csv = '/nonexistent.csv'\ntest_csv = '/nonexistent.csv'\n", 3, "does not exist"),
    ],
)
def test_config_errors_carry_line(tmp_path, text, line, fragment):
    with pytest.raises(ConfigError, match=fragment) as info:
        load_config(write(tmp_path, text))
    assert info.value.line == line
    assert f"c.cfg:{line}:" in str(info.value)


def test_config_roundtrip_and_hash(tmp_path):
    cfg = load_config(write(tmp_path, TINY))
    assert cfg.inner.K == 2 and cfg.predictor.hidden == (8,) and cfg.noise.gaussian_levels == (0.0, 0.2)
    again = load_config(write(tmp_path, dump_config(cfg), "d.cfg"))
    assert again.hash() == cfg.hash()
    assert cfg.with_seed(4).hash() != cfg.hash()
    assert ExperimentConfig().hash() == config_from_dict({}).hash()


def test_output_root_env(monkeypatch, tmp_path):
    cfg = config_from_dict({"": {"output": "x/y"}})
    monkeypatch.setenv("DDRO_OUTPUT_ROOT", str(tmp_path))
    assert cfg.output_dir() == tmp_path / "x" / "y"
    monkeypatch.delenv("DDRO_OUTPUT_ROOT")
    assert str(cfg.output_dir()) == "x/y"


def test_cli_rejects_bad_kappa(tmp_path, capsys):
    p = write(tmp_path, "[inner]\nkappa = 1.5\n")
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "c.cfg:2:" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_improvement_arithmetic():
    assert improvement(2.0, 1.0) == 50.0


def _bundle(method, mse, seed=0):
    b = ResultBundle("h", "bench", seed)
    b.add("metrics", method, "mean", mse)
    return b


def test_report_single_and_pair(tmp_path):
    rows = report([_bundle("ddro", 1.0)], tmp_path / "a")["table"]
    assert rows == [("ddro", "mean", 1.0, "")]
    rows = report([_bundle("ml", 2.0), _bundle("ddro", 1.0)], tmp_path / "b")["table"]
    assert rows == [("ml", "mean", 2.0, ""), ("ddro", "mean", 1.0, 50.0)]
    with open(tmp_path / "b" / "table.csv") as fh:
        assert list(csv.reader(fh))[2] == ["ddro", "mean", "1.0", "50.0"]
    other = ResultBundle("h", "other", 0)
    with pytest.raises(ValueError, match="different benchmarks"):
        report([_bundle("ml", 2.0), other], tmp_path / "c")


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    a, b = root / "a", root / "b"
    assert cli.main(["run", str(cfg), "--out", str(a)]) == 0
    assert cli.main(["run", str(cfg), "--out", str(b)]) == 0
    return root, cfg, a, b


def test_run_is_byte_identical(tiny_runs):
    _, _, a, b = tiny_runs
    for name in ("metrics.csv", "curves.csv", "traces.csv", "inner.csv", "models.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    meta = json.loads((a / "meta.json").read_text())
    assert meta["status"] == "ok" and meta["seed"] == 3 and "started" in meta
    rows = list(csv.DictReader(open(a / "metrics.csv")))
    assert {r["method"] for r in rows} == {"ml", "dml", "ddro"}
    assert {r["dataset"] for r in rows} == {"clean", "gaussian", "perlin", "cutout", "mean"}
    curves = list(csv.DictReader(open(a / "curves.csv")))
    assert len(curves) == 3 * 2


def test_train_then_eval_matches_run(tiny_runs, tmp_path):
    root, cfg, a, _ = tiny_runs
    out = tmp_path / "split"
    assert cli.main(["train", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["eval", str(cfg), "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_bytes() == (a / "metrics.csv").read_bytes()
    assert cli.main(["eval", str(cfg), "--out", str(out), "--seed", "9"]) == 2


def test_report_over_run(tiny_runs, tmp_path, capsys):
    _, _, a, b = tiny_runs
    assert cli.main(["report", str(a), str(b), "--out", str(tmp_path / "rep")]) == 0
    assert "ddro" in capsys.readouterr().out
    rows = list(csv.DictReader(open(tmp_path / "rep" / "table.csv")))
    assert rows[0]["method"] == "ml" and rows[0]["improvement_pct"] == ""
    assert (tmp_path / "rep" / "curves_gaussian.csv").exists()


def test_synth_and_perturb(tiny_runs, tmp_path):
    _, cfg, _, _ = tiny_runs
    assert cli.main(["synth", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "train.csv").read_text().startswith("timestamp,value\n")
    assert cli.main(["perturb", str(cfg), "--out", str(tmp_path / "p")]) == 0
    names = sorted(p.name for p in (tmp_path / "p").iterdir())
    assert "test_cutout.csv" in names and "test_gaussian_0.2.csv" in names


def test_preset_prints_loadable_config(tmp_path, capsys):
    assert cli.main(["preset", "paper"]) == 0
    cfg = load_config(write(tmp_path, capsys.readouterr().out))
    assert cfg.diffusion.T == 500 and cfg.inner.eps == 0.015 and cfg.inner.eta == 0.01
    assert cfg.baselines.wdro_budget == 0.3 and cfg.baselines.kl_eps == 4.0

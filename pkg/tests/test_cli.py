import json
import re

import numpy as np
import pytest

from wotlab import cost as cost_mod
from wotlab.cli import main
from wotlab.experiments import (ConfigError, ExperimentConfig, ExperimentReport, config_from_dict, load_config,
                                read_metrics_csv, run_experiment)
from wotlab.svg import HEIGHT, MARGIN, WIDTH, Group, Series, write_svg_lines, write_svg_scatter

GAUSS_1D = """
[source]
type = "Gaussian"
mean = [0.0]
cov_diag = [0.25]

[target]
type = "Gaussian"
mean = [0.0]
cov_diag = [1.0]
"""


def _write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# -- svg ---------------------------------------------------------------------

def test_svg_empty_groups(tmp_path):
    write_svg_scatter([], tmp_path / "e.svg")
    text = (tmp_path / "e.svg").read_text()
    assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
    assert "<circle" not in text and text.count("<rect") == 2  # background and axes frame


def test_svg_origin_marker_at_pixel_centre(tmp_path):
    write_svg_scatter([Group(np.zeros((1, 2)), "#000", "o")], tmp_path / "o.svg", bounds=(-1, 1, -1, 1))
    circles = re.findall(r'<circle cx="([\d.]+)" cy="([\d.]+)"', (tmp_path / "o.svg").read_text())
    # the legend swatch is drawn as a rect, so the only circle is the data point
    assert len(circles) == 1
    cx, cy = map(float, circles[0])
    assert cx == pytest.approx(MARGIN + (WIDTH - 2 * MARGIN) / 2)
    assert cy == pytest.approx(HEIGHT - MARGIN - (HEIGHT - 2 * MARGIN) / 2)


def test_svg_byte_identical(tmp_path):
    pts = np.random.default_rng(0).normal(size=(50, 2))
    for name in ("a.svg", "b.svg"):
        write_svg_scatter([Group(pts, "#336", "pts")], tmp_path / name, title="t")
        write_svg_lines([Series(np.arange(5), pts[:5, 0], "#900", "s")], tmp_path / ("l" + name))
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert (tmp_path / "la.svg").read_bytes() == (tmp_path / "lb.svg").read_bytes()


def test_svg_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        write_svg_scatter([Group(np.array([[np.nan, 0.0]]), "#000", "x")], tmp_path / "n.svg")


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("text", [
    'experiment = "toy1d"\n[source]\ntype = "Gaussian"\n',          # missing fields
    'experiment = "nope"\n',
    'experiment = "dwot_solve"\n' + GAUSS_1D,                        # no [cost]
    'experiment = "checks"\ncolour = 1\n',
    'experiment = "checks"\n[solver]\nmax_iters = 0\n',
    'experiment = "checks"\n[trainer]\nwidth = 3\n',
    'this is not toml',
])
def test_bad_config_exit_2(tmp_path, text):
    path = _write(tmp_path, text)
    assert main(["checks", "--config", path]) == 2


def test_config_experiment_must_match_subcommand(tmp_path):
    path = _write(tmp_path, 'experiment = "checks"\n')
    assert main(["toy2d", "--config", path]) == 2
    assert main(["toy2d"]) == 2


def test_unknown_only_is_config_error(tmp_path):
    assert main(["checks", "--only", "nothing", "--out", str(tmp_path)]) == 2


def test_dry_run_echoes_config(tmp_path, capsys):
    path = _write(tmp_path, 'experiment = "dwot_solve"\n[cost]\ngamma = 0.5\n' + GAUSS_1D)
    out = tmp_path / "out"
    assert main(["dwot_solve", "--config", path, "--dry-run", "--seed", "9", "--out", str(out)]) == 0
    echo = json.loads(capsys.readouterr().out)
    assert echo["seed"] == 9 and echo["cost"]["gamma"] == 0.5 and echo["out_dir"] == str(out)
    assert not out.exists()


def test_config_round_trip():
    cfg = config_from_dict({"experiment": "dwot_solve", "cost": {"gamma": 0.5, "kernel": {"type": "Bilinear"}},
                            "source": {"type": "Gaussian", "mean": [0.0], "cov_diag": [1.0]},
                            "target": {"type": "Gaussian", "mean": [0.0], "cov_diag": [2.0]},
                            "solver": {"max_iters": 7}})
    back = config_from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError):
        ExperimentConfig("toy2d")


def test_shipped_configs_parse():
    from pathlib import Path

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))
    assert paths
    for path in paths:
        load_config(path)


# -- reports and exit codes -----------------------------------------------------

def test_report_status_precedence():
    r = ExperimentReport("x", {})
    assert r.exit_code == 0
    r.fail("diverged", "a")
    r.fail("check_failed", "b")
    assert r.status == "diverged" and r.exit_code == 3
    assert r.details["failures"] == ["a", "b"]


def test_dwot_solve_end_to_end(tmp_path):
    text = ('experiment = "dwot_solve"\nn_samples = 12\n[cost]\ngamma = 0.5\n'
            '[solver]\nmax_iters = 500\ngap_tol = 1e-6\n' + GAUSS_1D)
    path = _write(tmp_path, text)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["dwot_solve", "--config", path, "--out", str(out)]) == 0
    report = json.loads((outs[0] / "report.json").read_text())
    for name in report["artifacts"]:
        assert (outs[0] / name).exists()
    assert read_metrics_csv(outs[0] / "metrics.csv") == report["metrics"]
    for name in ("metrics.csv", "plan.csv", "trace.csv", "objective.svg"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_gamma_sweep_single_point(tmp_path):
    text = ('experiment = "gamma_sweep"\nn_samples = 6\n[cost]\ngamma = 1.0\n'
            '[solver]\ngap_tol = 1e-4\n[options]\ngammas = [0.5]\n' + GAUSS_1D)
    path = _write(tmp_path, text)
    assert main(["gamma_sweep", "--config", path, "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "sweep.csv").read_text().splitlines()
    assert len(rows) == 2
    assert read_metrics_csv(tmp_path / "o" / "metrics.csv")["value_nonincreasing"] == 1.0


# -- checks ------------------------------------------------------------------

def test_checks_only_gradients(tmp_path):
    assert main(["checks", "--only", "gradients", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "checks.csv").read_text().splitlines()
    assert {ln.split(",")[0] for ln in lines[1:]} == {"gradients"}


def _wrong_divisor(spec, x, outputs):
    """Estimator with the pair term divided by n^2 instead of n(n-1)."""
    Y = np.asarray(outputs, dtype=float)
    n = len(Y)
    good = cost_mod.weak_cost_estimator(spec, x, Y)
    K = cost_mod.gram(spec.kernel, Y, Y)
    pair = (K.sum() - np.trace(K))
    return good - 0.5 * spec.gamma * pair / (n * (n - 1)) + 0.5 * spec.gamma * pair / (n * n)


def test_checks_catch_wrong_divisor(tmp_path):
    cfg = ExperimentConfig("checks", out_dir=str(tmp_path))
    report = run_experiment(cfg, only="unbiased_random", estimator=_wrong_divisor)
    assert report.exit_code == 1
    assert report.metrics["unbiasedness.unbiased_random"] == 0.0
    ok = run_experiment(ExperimentConfig("checks", out_dir=str(tmp_path / "ok")), only="unbiased_random")
    assert ok.exit_code == 0

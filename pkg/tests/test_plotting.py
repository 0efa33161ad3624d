import numpy as np
import pytest

from ood_stats import LikelihoodSamples, density_export
from plotting import dataset_color, plot_density_panels


@pytest.fixture
def curves():
    rng = np.random.default_rng(6)
    return density_export([
        LikelihoodSamples("train", rng.normal(size=300), "flow-snf"),
        LikelihoodSamples("test", rng.normal(size=300), "flow-snf"),
        LikelihoodSamples("hard_p=0.5", rng.normal(-3.0, 1.0, size=300), "flow-snf"),
    ], bins=30)


def test_svg_is_byte_identical_across_renders(curves, tmp_path):
    plot_density_panels(curves, tmp_path / "a.svg", estimator="flow-snf")
    plot_density_panels(curves, tmp_path / "b.svg", estimator="flow-snf")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_writes_svg(curves, tmp_path):
    plot_density_panels(curves, tmp_path / "d.svg", columns=2)
    text = (tmp_path / "d.svg").read_text(encoding="utf-8")
    assert text.startswith("<?xml")


def test_colors():
    assert dataset_color("train") == "grey"
    assert dataset_color("test") == "tab:blue"
    assert dataset_color("shift_rho=0.4") == "tab:green"


def test_nothing_to_plot(tmp_path):
    with pytest.raises(ValueError):
        plot_density_panels([], tmp_path / "x.svg")

import pytest

from davieslab.config import ExperimentConfig
from davieslab.errors import ConfigurationError


def test_defaults_valid():
    cfg = ExperimentConfig()
    assert cfg.builder == "sierpinski" and cfg.c1_grid[3] == 1.0


def test_parse_flat_text():
    cfg = ExperimentConfig.from_text("""
        # comment line
        builder = lattice   # trailing comment
        dim = 1
        side = 8
        lambda_grid = 1, 2.5
        centers = 3, 4
        df = auto
    """)
    assert (cfg.builder, cfg.dim, cfg.side) == ("lattice", 1, 8)
    assert cfg.lambda_grid == (1.0, 2.5) and cfg.centers == (3, 4)
    assert cfg.df is None


def test_round_trip():
    cfg = ExperimentConfig(builder="vicsek", level=2, c1_grid=(0.5, 1.0), df=1.2)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_overrides_win():
    cfg = ExperimentConfig.from_text("level = 3", level="5", seed=None)
    assert cfg.level == 5 and cfg.seed == 0


@pytest.mark.parametrize("text,field", [
    ("builder = torus", "builder"),
    ("measure = uniform", "measure"),
    ("lambda_grid = 0.5", "lambda_grid"),
    ("c1_grid = ", "c1_grid"),
    ("K = 13", "K"),
    ("level = two", "level"),
    ("colour = red", "colour"),
    ("iterate_lambda = 0.5", "iterate_lambda"),
])
def test_errors_name_the_field(text, field):
    with pytest.raises(ConfigurationError, match=field):
        ExperimentConfig.from_text(text)


def test_missing_equals():
    with pytest.raises(ConfigurationError, match="line 1"):
        ExperimentConfig.from_text("builder lattice")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(tmp_path / "nope.cfg")


def test_dimensions():
    assert ExperimentConfig(builder="lattice", dim=3).dimensions() == (3.0, 2.0)
    df, dw = ExperimentConfig().dimensions()
    assert df == pytest.approx(1.58496, abs=1e-5) and dw == pytest.approx(2.32193, abs=1e-5)
    assert ExperimentConfig(df=1.0, dw=3.0).dimensions() == (1.0, 3.0)

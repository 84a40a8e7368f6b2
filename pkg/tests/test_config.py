import pytest

from lle_fmri.config import ConfigError, RunConfig, load_config, parse_config


def test_defaults_validate():
    config = RunConfig().validate()
    assert config.method == "lle" and config.alpha == 0.05 and config.seed == 0


def test_parse_and_roundtrip(tmp_path):
    config = parse_config("# comment\nmethod = pca\nd_grid=1,2,5\nwelch=true\nalpha=0.01\n")
    assert config.method == "pca" and config.d_grid == (1, 2, 5)
    assert config.welch is True and config.alpha == 0.01
    path = tmp_path / "c.txt"
    path.write_text(config.to_text())
    assert load_config(path) == config


def test_overrides_skip_none():
    config = RunConfig().with_overrides(seed=7, method=None)
    assert config.seed == 7 and config.method == "lle"


@pytest.mark.parametrize("text, fragment", [
    ("colour=blue", "unknown key"),
    ("seed", "key=value"),
    ("seed=abc", "cannot read"),
    ("welch=maybe", "cannot read"),
    ("method=ica", "method"),
    ("alpha=0", "alpha"),
    ("alpha_rule=cubed", "alpha_rule"),
    ("seed=-1", "seed"),
    ("threads=0", "threads"),
])
def test_errors(text, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert fragment in str(info.value)


def test_lle_options():
    opts = parse_config("xi=0.1\nmaxiter=50\nseed=3").lle_options()
    assert opts.xi == 0.1 and opts.maxiter == 50 and opts.seed == 3
    assert RunConfig().lle_options().maxiter is None

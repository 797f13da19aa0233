import pytest

from cmaflab.config import CHECKS, ConfigError, load_config, parse_config

from conftest import CONFIGS

MINIMAL = "[geometry]\npreset = G1\nN = 16\n"


def test_minimal_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.geometry["n"] == 1 and cfg.geometry["N"] == 16
    assert cfg.checks["enabled"][:2] == ("uniform_bound", "barrier")
    assert cfg.seed == 0 and len(cfg.digest) == 64


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert set(cfg.checks["enabled"]) <= set(CHECKS)


def test_all_expands_by_applicability():
    cfg = parse_config("[geometry]\npreset = klt-pole-0.5\nN = 16\n[checks]\nenabled = all\n")
    assert set(cfg.checks["enabled"]) == set(CHECKS)
    cfg = parse_config(MINIMAL + "[checks]\nenabled = all\n")
    assert "tmax" not in cfg.checks["enabled"] and "weighted_laplacian" not in cfg.checks["enabled"]


def test_inline_comments_and_case():
    cfg = parse_config("[geometry]\npreset = G2   ; degenerate\nN = 32 # fine\nkappa = 0.05\n")
    assert cfg.geometry["preset"] == "G2" and cfg.geometry["N"] == 32


@pytest.mark.parametrize("text,section,key", [
    ("[density]\npreset = constant\n", "geometry", None),
    ("[geometry]\nN = 16\n", "geometry", "preset"),
    (MINIMAL + "bogus = 1\n", "geometry", "bogus"),
    (MINIMAL + "[extras]\na = 1\n", "extras", None),
    (MINIMAL.replace("16", "15"), "geometry", "N"),
    (MINIMAL.replace("16", "sixteen"), "geometry", "N"),
    (MINIMAL + "[checks]\nenabled = barrier, nope\n", "checks", "enabled"),
    (MINIMAL + "[checks]\nenabled = barrier, barrier\n", "checks", "enabled"),
    (MINIMAL + "[checks]\nenabled = tmax\n", "checks", "enabled"),
    (MINIMAL + "[checks]\neps = 2\n", "checks", "eps"),
    (MINIMAL + "[checks]\nalpha = 1.5\n", "checks", "alpha"),
    (MINIMAL + "[checks]\nrescale = 1.5\n", "checks", "rescale"),
    (MINIMAL + "[forcing]\npreset = linear\n[checks]\nenabled = subsolution\n", "checks", "enabled"),
    ("[geometry]\npreset = flat-anchor\nN = 16\n[forcing]\npreset = linear\n", "forcing", "preset"),
    ("[geometry]\npreset = flat-anchor\nN = 16\n[density]\npreset = smooth\n", "density", None),
    (MINIMAL + "[density]\npreset = model\nexponents = -1.5\n", "density", "exponents"),
    (MINIMAL + "[schedule]\nsteps = 2\n", "schedule", "steps"),
])
def test_errors_name_the_field(text, section, key):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.section == section
    assert err.value.key == key
    assert f"[{section}]" in str(err.value)


def test_line_numbers():
    with pytest.raises(ConfigError) as err:
        parse_config("[geometry]\npreset = G1\n\nN = 9\n")
    assert err.value.line == 4 and str(err.value).startswith("line 4")


def test_duplicate_key():
    with pytest.raises(ConfigError) as err:
        parse_config(MINIMAL + "N = 32\n")
    assert "duplicate" in str(err.value)


def test_text_before_section():
    with pytest.raises(ConfigError):
        parse_config("preset = G1\n" + MINIMAL)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.ini")

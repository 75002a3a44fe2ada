import pytest

from geomnet.config import PRESETS, RunConfig, build_config, format_config, load_config, parse_config
from geomnet.topology import ConfigError


def test_defaults_are_the_desk_preset():
    cfg = build_config()
    assert (cfg.d, cfg.n_clusters, cfg.k, cfg.k_prime, cfg.n_classes) == (6, 8, 2, 1, 2)
    assert cfg.seed == 7 and cfg.epochs == 200


def test_sbu_preset():
    cfg = build_config({"preset": "sbu", "data_path": "/data/sbu"})
    net = cfg.geomnet_config()
    assert (net.d, net.n_clusters, net.k, net.k_prime, net.n_classes) == (9, 180, 2, 3, 8)
    assert cfg.batch_size == 30 and cfg.alpha == 1e-2


def test_precedence_preset_file_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nepochs = 5\nseed = 3\nno_pt = true\n")
    cfg = load_config(path, {"seed": 9, "k": None})
    assert (cfg.epochs, cfg.seed, cfg.no_pt, cfg.k) == (5, 9, True, 2)
    assert not cfg.geomnet_config().use_pt


def test_format_parse_round_trip():
    cfg = build_config({"epochs": 3, "metric": "trace", "beta_denominator": 40.0, "no_ltml": True})
    assert build_config(parse_config(format_config(cfg))) == cfg


@pytest.mark.parametrize("text, message", [
    ("colour = red\n", "unknown key"),
    ("epochs = many\n", "epochs"),
    ("no_pt = maybe\n", "boolean"),
    ("epochs 3\n", "key = value"),
])
def test_parse_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text)


@pytest.mark.parametrize("values", [
    {"preset": "huge"},
    {"dataset": "ntu"},
    {"preset": "ntu"},
    {"dataset": "sbu"},
    {"fold": "6"},
    {"epochs": -1},
    {"batch_size": 0},
    {"n_clusters": 1},
    {"metric": "bures"},
    {"metric": "trace", "beta_denominator": 3},
    {"alpha": 0.0},
    {"lr_scale": 0.0},
    {"frechet_method": "gauss"},
])
def test_invalid_configs(values):
    with pytest.raises(ConfigError):
        build_config(values)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.cfg")


def test_derived_configs():
    cfg = RunConfig(metric="trace", beta_denominator=20, alpha=0.1, k=1, k_prime=2)
    net = cfg.geomnet_config()
    assert net.metric.use_trace_term and net.metric.beta_denominator == 20
    assert net.kmeans_seed == cfg.seed
    assert cfg.adam_config().alpha == 0.1
    assert set(PRESETS) == {"desk", "sbu", "ntu"}

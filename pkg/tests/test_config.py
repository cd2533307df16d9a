import pytest

from vistafuse.config import (
    ConfigError,
    RunConfig,
    bundled_configs,
    dump_config,
    load_config,
    parse_config,
    shape_summary,
)


def test_bundled_files():
    assert {"desk.cfg", "nuscenes.cfg", "waymo.cfg"} <= set(bundled_configs())


def test_nuscenes_shapes():
    s = shape_summary(load_config("nuscenes.cfg"))
    assert s["grid"] == (1024, 1024, 80)
    assert s["bev"] == (16 * 80, 1024, 1024)
    assert s["bev_pooled"] == (256, 256)
    assert s["rv_pooled"] == (256, 80)
    assert s["attention"] == (65536, 20480)


def test_waymo_shapes():
    s = shape_summary(load_config("waymo.cfg"))
    assert s["grid"] == (1504, 1504, 60)
    assert s["bev_pooled"] == (376, 376)


def test_desk_file_matches_defaults():
    assert load_config("desk.cfg") == RunConfig()


@pytest.mark.parametrize("name", ["desk.cfg", "nuscenes.cfg", "waymo.cfg"])
def test_dump_round_trip(name):
    cfg = load_config(name)
    assert parse_config(dump_config(cfg)) == cfg


def test_partial_override():
    cfg = parse_config("[model]\nmode = gap\ndecouple = false\n[loss]\nlambda_var = 0\n")
    assert cfg.model.mode == "gap" and cfg.model.decouple is False
    assert cfg.train.lambda_var == 0.0
    assert cfg.voxel == RunConfig().voxel


@pytest.mark.parametrize("text, key", [
    ("[model]\nkernel = 3\n", "kernel"),
    ("[extras]\nx = 1\n", "extras"),
    ("[model]\nd_q = four\n", "d_q"),
    ("[voxel]\nresolution = 0.1, 0.1\n", "resolution"),
    ("[model]\nmode = sparse\n", "mode"),
    ("[loss]\nvar_target = all\n", "var_target"),
    ("[train]\nsteps = 0\n", "steps"),
])
def test_rejects_with_offending_key(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(text)


def test_malformed_and_missing(tmp_path):
    with pytest.raises(ConfigError):
        parse_config("no section header\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")

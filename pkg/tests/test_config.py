import json

import pytest

from utils.config import PipelineConfig, load_config, settings
from utils.errors import ConfigError
from utils.parallel import parallel_map


def _write(tmp_path, data):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


def test_defaults():
    cfg = load_config()
    assert cfg.n == 64 and cfg.md == 4 and cfg.alpha == 0.1
    assert cfg.segmentation_alpha == pytest.approx(0.05)
    assert cfg.counting_alpha == pytest.approx(0.05)
    assert cfg.output_dir == settings.OUTPUT_DIR


def test_file_and_overrides(tmp_path):
    path = _write(tmp_path, {"n": 32, "alpha": 0.2, "alpha_seg": 0.05, "scan": {"n_sim": 50}})
    cfg = load_config(path, seed=9, out=tmp_path / "run")
    assert cfg.n == 32 and cfg.seed == 9 and cfg.scan.n_sim == 50
    assert cfg.output_dir == tmp_path / "run"
    assert cfg.counting_alpha == pytest.approx(0.15)


@pytest.mark.parametrize("bad", [
    {"md": 9},
    {"md": 1},
    {"alpha": 1.0},
    {"alpha": 0.1, "alpha_seg": 0.1},
    {"t_confocal": 0},
    {"background_rate": 0.6},
    {"psf": {"confocal_fwhm": 1.0, "sted_fwhm": 2.0}},
    {"scan": {"n_sim": 0}},
    {"counting": {"background_quantile": 1.5}},
    {"phantom": "stars"},
])
def test_out_of_range_values_raise_config_error(tmp_path, bad):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, bad))


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(broken)


def test_config_hash_ignores_output_dir(tmp_path):
    a = PipelineConfig(output_dir=tmp_path / "a")
    b = PipelineConfig(output_dir=tmp_path / "b")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != PipelineConfig(seed=1).config_hash()
    assert len(a.config_hash()) == 16


def test_scan_background_falls_back_to_simulation_rate():
    assert PipelineConfig(background_rate=0.01).scan_background == 0.01
    assert PipelineConfig(background_rate=0.01, scan={"background": 0.02}).scan_background == 0.02


def test_parallel_map_keeps_order():
    assert parallel_map(abs, [-3, 1, -2]) == [3, 1, 2]
    assert parallel_map(abs, []) == []

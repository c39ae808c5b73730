import pytest

from blackmamba.config import ConfigError, parse_config, parse_config_text


def test_minimal_config_fills_defaults():
    run = parse_config_text("model:\n  preset: tiny-mamba\n  variant: mamba\n")
    assert run.model.variant == "mamba" and run.model.d_model == 64
    assert run.train is None and run.bench.repeats == 5 and run.seed == 0


def test_unknown_key_is_named_with_line_and_suggestion():
    with pytest.raises(ConfigError, match=r"x.yaml:3: unknown key model.experts_count \(did you mean 'n_experts'\?\)"):
        parse_config_text("model:\n  variant: mamba-moe\n  experts_count: 4\n", "x.yaml")


def test_min_lr_above_peak_shows_both_values():
    with pytest.raises(ConfigError, match=r"x.yaml:4: .*min_lr \(0.01\) exceeds peak_lr \(0.001\)"):
        parse_config_text("train:\n  task: copy\n  peak_lr: 1e-3\n  min_lr: 0.01\n", "x.yaml")


@pytest.mark.parametrize("text,fragment", [
    ("model:\n  d_model: abc\n", "model.d_model expects int"),
    ("model:\n  n_layers: 3\n", "n_layers must be even"),
    ("modle: {}\n", "did you mean 'model'"),
    ("model:\n  preset: tiny-mamba-mo\n", "unknown preset"),
    ("model: 3\n", "must be a mapping"),
    ("seed: [1]\n", "seed must be a scalar"),
    ("bench:\n  repeats: 2\n", "repeats must be >= 5"),
    ("train:\n  steps: 1\n  steps: 2\n", "duplicate key"),
    ("model: [\n", "not valid YAML"),
])
def test_invalid_configs_are_rejected(text, fragment):
    with pytest.raises(ConfigError, match=fragment.replace("(", r"\(").replace(")", r"\)")):
        parse_config_text(text)


def test_top_level_seed_reaches_train(tmp_path, monkeypatch):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 7\ntrain:\n  steps: 5\n  peak_lr: 1\npaths:\n  metrics_dir: m\n")
    monkeypatch.setenv("BLACKMAMBA_CHECKPOINT_DIR", "elsewhere")
    run = parse_config(path)
    assert run.train.seed == 7 and run.train.peak_lr == 1.0
    assert run.paths.metrics_dir == "m" and run.paths.checkpoint_dir == "elsewhere"


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        parse_config("/nonexistent/run.yaml")

import pytest

from semface.config import ConfigError, RunConfig, load_config, parse_config
from semface.experiment import layer_lines
from semface.layers import OutputBlockSoftmax, OutputLinear, OutputSoftmax
from semface.network import build_network, default_specs


def test_defaults_build_the_reference_network():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.specs() == default_specs()
    net = build_network(cfg.specs(), (1, 48, 48), seed=0)
    lines = layer_lines(net)
    assert lines[0] == "input (1, 48, 48)"
    for size in (44, 22, 18, 15):
        assert any(f", {size}, {size})" in line for line in lines)


def test_parse_values_and_comments():
    text = """
    # a comment
    task = joint   # trailing comment
    joint_labels = gender, glasses
    width = 0.5
    patience = none
    target_criterion = 0.25
    lcn_placement = 010
    sweep_input_size = 24,36
    """
    cfg = parse_config(text)
    assert cfg.task == "joint" and cfg.joint_labels == ("gender", "glasses")
    assert cfg.width == 0.5 and cfg.patience is None and cfg.target_criterion == 0.25
    assert cfg.lcn_placement == "010" and cfg.sweep_input_size == (24, 36)
    assert cfg.head_spec() == OutputBlockSoftmax((2, 2))


def test_round_trip_through_lines(tmp_path):
    cfg = parse_config("task = age\nseed = 9\nsweep_width = 0.25,0.5\npatience = none")
    again = parse_config("\n".join(cfg.to_lines()))
    assert again == cfg
    p = tmp_path / "run.cfg"
    p.write_text("\n".join(cfg.to_lines()) + "\n")
    assert load_config(p, seed=1) == cfg.with_overrides(seed=1)


@pytest.mark.parametrize(
    "text,match",
    [
        ("colour = 3", "unknown key"),
        ("seed = 1\nseed = 2", "duplicate"),
        ("depth 3", "key = value"),
        ("epochs = many", "bad value"),
        ("task = hair", "task"),
        ("input_size = 4", "input_size"),
        ("dropout_fc = 1.0", "dropout_fc"),
        ("joint_labels = gender,hair", "joint_labels"),
        ("lr_start = 0.001\nlr_end = 0.01", "lr_start >= lr_end"),
        ("lcn_placement = 1011", "lcn_placement"),
        ("seed = -1", "seed"),
    ],
)
def test_rejects(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text, "x.cfg")


def test_error_names_line():
    with pytest.raises(ConfigError, match=r"x.cfg:3"):
        parse_config("seed = 1\n\nbogus = 2", "x.cfg")


def test_heads_per_task():
    assert parse_config("task = gender").head_spec() == OutputSoftmax(2)
    assert parse_config("task = age").head_spec() == OutputSoftmax(17)
    assert parse_config("task = aam").head_spec(12) == OutputLinear(12)
    with pytest.raises(ConfigError):
        parse_config("task = aam").head_spec()

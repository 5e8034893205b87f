import pytest

from padistill.config import ConfigError, ExperimentConfig, preset_names, validate_config


def errors(diags):
    return [d for d in diags if d.severity == "error"]


@pytest.mark.parametrize("name", ["blobs-ipc1", "blobs-ipc10", "blobs-ipc50"])
def test_presets_validate(name):
    assert name in preset_names()
    assert errors(validate_config(name)) == []


def test_aee_beyond_epochs_names_both_values():
    (d,) = errors(validate_config("blobs-ipc10", ["scheduler.addition_end_epoch=50"]))
    assert "50" in d.message and "40" in d.message and d.section == "scheduler"


def test_mask_ratio_out_of_range_cites_mask():
    (d,) = errors(validate_config("blobs-ipc10", ["matcher.mask_ratio=1.5"]))
    assert d.key == "mask_ratio" and "mask" in d.message


def test_match_range_must_fit_buffer():
    (d,) = errors(validate_config("blobs-ipc10", ["matcher.max_start_epoch=39"]))
    assert "exceeds buffer epochs 40" in d.message


def test_unknown_keys_and_bad_values_carry_lines(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[matcher]\nipc = ten\nfoo = 1\n[nope]\nx = 1\n")
    diags = errors(validate_config(str(p)))
    got = {(d.section, d.key, d.line) for d in diags}
    assert ("matcher", "ipc", 2) in got and ("matcher", "foo", 3) in got
    assert ("nope", "", 4) in got


def test_parse_errors_have_line_numbers(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[matcher]\nipc = 1\nipc = 2\n")
    (d,) = validate_config(str(p))
    assert d.line == 3 and "parse error" in d.message


def test_override_forms():
    cfg = ExperimentConfig.load("blobs-ipc10", ["matcher.ipc=3", "eval.seeds=4,5"])
    assert cfg["matcher"]["ipc"] == 3 and cfg["eval"]["seeds"] == (4, 5)
    with pytest.raises(ConfigError, match="section.key=value"):
        ExperimentConfig.load("blobs-ipc10", ["ipc=3"])
    with pytest.raises(FileNotFoundError):
        ExperimentConfig.load("no-such-preset")


def test_resolved_text_round_trips(tmp_path):
    cfg = ExperimentConfig.load("blobs-ipc50", ["scheduler.removal_epoch=25"])
    p = tmp_path / "resolved.ini"
    p.write_text(cfg.to_text())
    again = ExperimentConfig.load(str(p))
    assert again.values == cfg.values
    assert again.scheduler_config().effective_removal_epoch == 25
    assert again.tm_config().match.max_start == 30

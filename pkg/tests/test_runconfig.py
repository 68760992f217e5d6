"""Run-configuration parsing and stage digests."""

import pytest

from radioselect.errors import ConfigurationError
from radioselect.runconfig import RunConfig, config_hash, load_config, parse_config


def test_defaults_are_desk_scale():
    cfg = RunConfig()
    assert (cfg.phantom_train, cfg.phantom_val, cfg.phantom_test) == (120, 40, 40)
    assert cfg.extents == (32, 128, 128)
    assert cfg.internal_extents == (16, 32, 32)
    assert cfg.diffusion_t == 200
    assert cfg.t_sel == 0.4
    assert cfg.persona and cfg.selection and not cfg.registration
    assert cfg.seeds == (0, 1, 2)


def test_parse_full_config():
    cfg = parse_config("""
    # comment line
    phantom_train = 10
    extents = 16x32x32          # trailing comment
    grid = 1x2x2
    views = sagittal,coronal
    persona = off
    t_sel = 0.5
    seeds = 3,4
    tasks = acl
    out = runs/example
    """)
    assert cfg.phantom_train == 10
    assert cfg.extents == (16, 32, 32)
    assert cfg.grid == (1, 2, 2)
    assert cfg.views == ("sagittal", "coronal")
    assert cfg.persona is False
    assert cfg.t_sel == 0.5
    assert cfg.seeds == (3, 4)
    assert cfg.tasks == ("acl",)
    assert cfg.out == "runs/example"


def test_parse_ablate_section():
    cfg = parse_config("""
    [ablate]
    persona = on; off
    t_sel = 0.0; 0.4; 0.5
    grid = 1x1x1; 2x2x2
    """)
    assert cfg.ablate["persona"] == (True, False)
    assert cfg.ablate["t_sel"] == (0.0, 0.4, 0.5)
    assert cfg.ablate["grid"] == ((1, 1, 1), (2, 2, 2))


def test_bool_spellings():
    for text, expected in (("on", True), ("true", True), ("1", True), ("yes", True),
                           ("off", False), ("false", False), ("0", False), ("no", False)):
        assert parse_config(f"persona = {text}").persona is expected


def test_views_all_keyword():
    assert parse_config("views = all").views == ("axial", "coronal", "sagittal")


@pytest.mark.parametrize("line, match", [
    ("bogus = 1", "unknown key"),
    ("epochs = banana", "invalid literal"),
    ("extents = 4x4", "DxHxW"),
    ("views = dorsal", "unknown views"),
    ("tasks = tumor", "unknown tasks"),
    ("persona = maybe", "on/off"),
    ("epochs 4", "key = value"),
    ("[weird]", "unknown section"),
    ("t_sel = 1.5", r"\[0, 1\]"),
    ("diffusion_t = 1", ">= 2"),
    ("learning_rate = 0", "positive"),
    ("seeds = ", "invalid literal"),
])
def test_rejects_malformed(line, match):
    with pytest.raises(ConfigurationError, match=match):
        parse_config(line)


def test_duplicate_key_rejected():
    with pytest.raises(ConfigurationError, match="duplicate"):
        parse_config("epochs = 1\nepochs = 2")


def test_ablate_key_must_be_axis():
    with pytest.raises(ConfigurationError, match="not an ablation axis"):
        parse_config("[ablate]\nepochs = 1; 2")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 7\nout = here\n")
    cfg = load_config(path)
    assert cfg.epochs == 7 and cfg.out == "here"


def test_replace_does_not_mutate():
    cfg = RunConfig()
    other = cfg.replace(epochs=9)
    assert cfg.epochs != 9 and other.epochs == 9
    assert other.ablate is not cfg.ablate


def test_hash_stable_and_key_scoped():
    a, b = RunConfig(), RunConfig()
    assert config_hash(a) == config_hash(b)
    c = RunConfig(epochs=999)
    assert config_hash(a) != config_hash(c)
    # restricting to keys that did not change keeps the digest
    assert config_hash(a, keys=("seed", "extents")) == config_hash(c, keys=("seed", "extents"))


def test_hash_ignores_out_and_ablate():
    a = RunConfig(out="x", ablate={"persona": (True, False)})
    b = RunConfig(out="y")
    assert config_hash(a) == config_hash(b)

import pytest

from cscon.config import ConfigError, RunConfig, load, parse_text, resolve
from cscon.model import DESK, PAPER
from cscon.training import DESK_TRAIN, PAPER_TRAIN

TEXT = """
# comment line
[run]
profile = desk
[model]
mask_ratio = 0.3   # trailing comment
tau = 0.5
[train]
epochs = 4
symmetric = true
[data]
classes = sphere, cube
n_points = 128
"""


def test_parse_sections():
    raw = parse_text(TEXT)
    assert raw["model"] == {"mask_ratio": "0.3", "tau": "0.5"}
    assert raw["data"]["classes"] == "sphere, cube"


def test_resolve_types_and_profile_defaults():
    run = resolve(parse_text(TEXT))
    assert run.model.mask_ratio == 0.3 and run.model.dim == DESK.dim
    assert run.train.epochs == 4 and run.train.symmetric is True
    assert run.train.batch_size == DESK_TRAIN.batch_size
    assert run.dataset.classes == ("sphere", "cube") and run.dataset.n_points == 128


def test_paper_profile():
    run = resolve({"run": {"profile": "paper"}})
    assert run.model == PAPER and run.train == PAPER_TRAIN


def test_flags_override_file():
    run = resolve(parse_text(TEXT), {"model": {"tau": 2.0}, "train": {"seed": 7}})
    assert run.model.tau == 2.0 and run.train.seed == 7 and run.model.mask_ratio == 0.3


def test_echo_reproduces_config(tmp_path):
    run = resolve(parse_text(TEXT), {"train": {"seed": 3}})
    path = run.echo(tmp_path)
    assert path.name == "config.resolved"
    assert load(path) == run


def test_default_round_trips(tmp_path):
    assert load(RunConfig().echo(tmp_path)) == RunConfig()


@pytest.mark.parametrize(
    "text, field",
    [
        ("[model]\nmask_ratio = 1.5", "model.mask_ratio"),
        ("[model]\ntau = abc", "model.tau"),
        ("[model]\nwidth = 3", "model.width"),
        ("[train]\nloss = mse", "train.loss"),
        ("[data]\nn_points = 4", "data.n_points"),
        ("[run]\nprofile = huge", "run.profile"),
        ("[run]\ncolour = red", "run.colour"),
        ("[train]\nsymmetric = maybe", "train.symmetric"),
        ("[extra]\na = 1", "extra"),
    ],
)
def test_errors_name_the_field(text, field):
    with pytest.raises(ConfigError) as e:
        resolve(parse_text(text))
    assert e.value.field == field
    assert str(e.value).startswith(field)


def test_line_without_equals():
    with pytest.raises(ConfigError, match="line 2"):
        parse_text("[model]\nnonsense")

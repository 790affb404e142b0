import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd2.config import PipelineConfig, dump, emit, load, parse
from fd2.errors import ConfigError

unit = st.floats(0.0, 1.0, allow_nan=False)
text = st.text(st.characters(whitelist_categories=("L", "N"), whitelist_characters="/_.-"), max_size=20)


@st.composite
def configs(draw):
    kind = draw(st.sampled_from(["toy", "folder"]))
    n_ch = draw(st.integers(1, 4))
    return PipelineConfig(
        dataset_kind=kind,
        dataset_path=draw(text.filter(bool)) if kind == "folder" else draw(text),
        image_size=(2 ** n_ch) * draw(st.integers(1, 8)),
        num_classes=draw(st.integers(2, 50)),
        channels=tuple(draw(st.lists(st.integers(1, 256), min_size=n_ch, max_size=n_ch))),
        alpha=draw(unit), beta=draw(unit), lam=draw(unit),
        eta=draw(st.floats(0, 10)), mu=draw(st.floats(1e-6, 1 - 1e-6)),
        eps=draw(st.floats(1e-12, 1.0)), tau=draw(st.floats(1e-3, 100)),
        ipc=draw(st.integers(1, 100)), group_size=draw(st.integers(1, 64)),
        distill_lr=draw(st.floats(0, 10)), r_bn=draw(st.floats(0, 1)),
        init_grid=draw(st.sampled_from(["1x1", "2x2"])),
        use_constraints=draw(st.booleans()),
        softlabel_mode=draw(st.sampled_from(["online", "offline"])),
        student_arch=draw(st.sampled_from(["convnet4", "convnet3"])),
        seed=draw(st.integers(0, 2 ** 31)),
        deterministic=draw(st.booleans()),
        out_dir=draw(text.filter(bool)),
    )


@settings(max_examples=200, deadline=None)
@given(configs())
def test_round_trip(cfg):
    assert parse(emit(cfg)) == cfg


def test_file_round_trip(tmp_path):
    cfg = PipelineConfig(lam=0.3, seed=9, channels=(8, 16))
    dump(cfg, tmp_path / "c.cfg")
    assert load(tmp_path / "c.cfg") == cfg


def test_lambda_key_and_comments():
    cfg = parse("# balance\nlambda = 0.25\n\n  beta=0.1  \n")
    assert cfg.lam == 0.25 and cfg.beta == 0.1
    assert "lambda = 0.25" in emit(cfg)


def test_every_field_is_emitted():
    out = emit(PipelineConfig())
    for f in dataclasses.fields(PipelineConfig):
        key = "lambda" if f.name == "lam" else f.name
        assert f"\n{key} = " in "\n" + out


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="'lamda'"):
        parse("lamda = 0.5")
    with pytest.raises(ConfigError, match="'lam'"):
        parse("lam = 0.5")


@pytest.mark.parametrize("line", ["beta = 1.5", "lambda = -0.1", "ipc = 0", "tau = 0", "mu = 1",
                                  "init_grid = 3x3", "image_size = 60", "ipc = three", "nonsense",
                                  "dataset_kind = folder", "use_constraints = maybe"])
def test_invalid_values(line):
    with pytest.raises(ConfigError):
        parse(line)


def test_defaults_match_documented_values():
    c = PipelineConfig()
    assert (c.alpha, c.beta, c.lam, c.group_size, c.num_attention_maps) == (0.5, 0.5, 0.8, 4, 8)
    assert (c.ipc, c.tau, c.eps) == (3, 4.0, 1e-8)


def test_fingerprint_tracks_content():
    a, b = PipelineConfig(), PipelineConfig(seed=1)
    assert a.fingerprint() == PipelineConfig().fingerprint() != b.fingerprint()
    assert len(a.fingerprint()) == 16
    assert PipelineConfig(out_dir="elsewhere").fingerprint() == a.fingerprint()

import pytest

from terminal_embed.config import BACKENDS, Config
from terminal_embed.errors import FormatError


def test_text_round_trip():
    cfg = Config(eps=0.35, seed=9, median_jl=True, aann_backend="lsh")
    assert Config.from_text(cfg.to_text()) == cfg


def test_comments_and_blank_lines():
    cfg = Config.from_text("# note\n\neps = 0.4  # inline\nk=12\n")
    assert cfg.eps == 0.4 and cfg.k == 12
    assert cfg.sketch_rows(1000) == 12


@pytest.mark.parametrize("text", ["bogus=1\n", "eps\n", "k=1.5\n", "median_jl=maybe\n"])
def test_bad_config_lines(text):
    with pytest.raises(FormatError):
        Config.from_text(text)


def test_backend_presets():
    for name, values in BACKENDS.items():
        cfg = Config().with_backend(name)
        for key, value in values.items():
            assert getattr(cfg, key) == value
    with pytest.raises(ValueError):
        Config().with_backend("faiss")


def test_derived_values():
    cfg = Config(eps=0.25, eps_dagger_ratio=0.1)
    assert cfg.eps_dagger == pytest.approx(0.025)
    assert Config(eps=0.25, k_max=10_000).sketch_rows(256) == 710
    assert Config(eps=0.25).sketch_rows(256) == 256

import numpy as np

from ctmcsens.streams import as_bitgen, stage_word, substream, substreams


def draws(bg, n=5):
    return np.random.Generator(bg).random(n)


def test_substream_is_reproducible():
    assert np.array_equal(draws(substream(3, 7, "main")), draws(substream(3, 7, "main")))


def test_stages_paths_and_seeds_are_distinct():
    base = draws(substream(3, 7, "main"))
    for other in (substream(3, 8, "main"), substream(3, 7, "pilot"), substream(4, 7, "main")):
        assert not np.array_equal(base, draws(other))
    assert stage_word(0, "a") != stage_word(0, "b")


def test_batch_matches_individual():
    batch = substreams(11, 4, 3, "x")
    for j, bg in enumerate(batch):
        assert np.array_equal(draws(bg), draws(substream(11, 4 + j, "x")))


def test_as_bitgen_accepts_several_forms():
    bg = substream(1, 0)
    assert as_bitgen(bg) is bg
    g = np.random.Generator(bg)
    assert as_bitgen(g) is bg
    assert np.array_equal(draws(as_bitgen(5)), draws(substream(5, 0)))
    assert isinstance(as_bitgen(None), np.random.BitGenerator)

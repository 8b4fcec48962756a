from collections import Counter

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from ralb.captions import (
    ABLATION_MODES,
    FULL,
    NO_ADJ_ADV,
    NO_FUNCTION_WORDS,
    NO_NOUNS,
    NOUNS_ONLY,
    AblationMode,
    AnnotatedCaption,
    ablate_corpus,
    apply_ablation,
    caption_stats,
    normalize_whitespace,
    parse_mode,
    read_captions_jsonl,
    shuffle_words,
    write_captions_jsonl,
)
from ralb.datagen import SceneSpec, caption_of
from ralb.encoders import new_model, tokenize

from conftest import TINY
from golden import FISH_EXPECTED, FISH_RAW, FISH_TAGGED

FISH = AnnotatedCaption(words=FISH_TAGGED, raw_text=FISH_RAW)

tagged_words = st.lists(
    st.tuples(st.sampled_from(["cat", "red", "the", "runs", "big", "mat", ","]), st.sampled_from("NAFO")),
    max_size=30,
)


def _caption(words):
    return AnnotatedCaption(words=words, raw_text=" ".join(s for s, _ in words))


@pytest.mark.parametrize("mode", ["nouns-only", "no-adj-adv", "no-nouns", "no-function-words"])
def test_fish_golden(mode):
    got = apply_ablation(FISH, parse_mode(mode))
    assert normalize_whitespace(got) == normalize_whitespace(FISH_EXPECTED[mode])


def test_fish_surfaces_rebuild_raw_text():
    assert normalize_whitespace(" ".join(FISH.surfaces())) == normalize_whitespace(FISH_RAW)


def test_fish_shuffle_is_permutation():
    out = apply_ablation(FISH, shuffle_words(7))
    assert Counter(out.split(" ")) == Counter(FISH.surfaces())
    assert out == apply_ablation(FISH, shuffle_words(7))


def test_simple_examples():
    nouns = _caption([("cat", "N"), ("mat", "N")])
    assert apply_ablation(nouns, NO_NOUNS) == ""
    assert apply_ablation(nouns, NOUNS_ONLY) == "cat,mat"
    three = _caption([("a", "F"), ("red", "A"), ("cat", "N")])
    assert apply_ablation(three, shuffle_words(3)) == apply_ablation(three, shuffle_words(3))
    empty = _caption([])
    for name in ABLATION_MODES:
        assert apply_ablation(empty, parse_mode(name)) == ""


def test_untagged_only_full():
    cap = AnnotatedCaption.untagged("a red cat")
    assert apply_ablation(cap, FULL) == "a red cat"
    with pytest.raises(ValueError):
        apply_ablation(cap, NO_NOUNS)


def test_mode_validation():
    with pytest.raises(ValueError):
        AblationMode("shuffle-words")
    with pytest.raises(ValueError):
        AblationMode("verbs-only")
    with pytest.raises(ValueError):
        AnnotatedCaption(words=[("x", "Z")], raw_text="x")


def _is_subsequence(sub, seq):
    it = iter(seq)
    return all(w in it for w in sub)


@given(tagged_words)
def test_removal_modes_are_subsequences(words):
    cap = _caption(words)
    surfaces = cap.surfaces()
    for mode in (NO_ADJ_ADV, NO_NOUNS, NO_FUNCTION_WORDS):
        out = apply_ablation(cap, mode)
        assert _is_subsequence(out.split(), surfaces)
    assert apply_ablation(cap, FULL) == cap.raw_text


@given(tagged_words)
def test_nouns_only_keeps_exactly_the_nouns(words):
    # the comma is the join character, so it cannot round-trip as a noun
    words = [(s, c) for s, c in words if s != ","]
    cap = _caption(words)
    out = apply_ablation(cap, NOUNS_ONLY)
    nouns = list(dict.fromkeys(s for s, c in words if c == "N"))
    assert (out.split(",") if out else []) == nouns


@given(tagged_words, st.integers(0, 2**32))
def test_shuffle_multiset(words, seed):
    cap = _caption(words)
    out = apply_ablation(cap, shuffle_words(seed))
    assert sorted(out.split()) == sorted(cap.surfaces())


@given(st.lists(st.sampled_from(["cat", "red", "the", ","]), max_size=150), st.sampled_from(ABLATION_MODES))
def test_ablations_retokenize_within_cap(words, mode):
    from ralb.encoders import Vocab

    cap = _caption([(w, "N" if w == "cat" else "F") for w in words])
    out = apply_ablation(cap, parse_mode(mode, seed=1))
    assert len(tokenize(out, Vocab.build(["cat red the ,"]))) <= 77


def test_corpus_shuffle_uses_per_caption_seeds():
    caps = {f"{i}": _caption([(w, "N") for w in "a b c d e f g h".split()]) for i in range(6)}
    out = ablate_corpus(caps, shuffle_words(0))
    assert len({c.raw_text for c in out.values()}) > 1
    assert out == ablate_corpus(caps, shuffle_words(0))
    for cap in out.values():
        assert [s for s, _ in cap.words] == cap.raw_text.split()


def test_jsonl_round_trip(tmp_path):
    caps = [FISH, caption_of(SceneSpec("circle", "red", "large", 1, 1, "plain", "white"))]
    path = tmp_path / "c.jsonl"
    write_captions_jsonl(path, caps, ["fish", "circle"])
    back = read_captions_jsonl(path)
    assert back["fish"] == FISH and back["circle"] == caps[1]
    path.write_text(path.read_text() + path.read_text().splitlines()[0] + "\n")
    with pytest.raises(ValueError):
        read_captions_jsonl(path)


# --- statistics --------------------------------------------------------------

def test_stats_single_caption():
    cap = _caption([(w, "N") for w in "one two three four five six seven".split()])
    s = caption_stats([cap])
    assert s.mean_length == 7 and s.median_length == 7
    assert s.length_hist == [(5, 10, 1)]
    assert s.similarity_hist == []


class _Const(nn.Module):
    def forward(self, x):
        return torch.ones(x.shape[0], TINY.d_embed)


def test_stats_degenerate_similarity_lands_in_one_bin():
    texts = ["a red circle"]
    state = new_model(texts, TINY, seed=0)
    state.vision = _Const()
    caps = [_caption([("a", "F"), ("red", "A"), ("circle", "N")])] * 5
    s = caption_stats(caps, state, np.zeros((5, 32, 32, 3), dtype=np.float32))
    assert len(s.similarity_hist) == 1 and s.similarity_hist[0][2] == 5
    assert s.to_csv().startswith("histogram,bin_lo,bin_hi,count\n")
    with pytest.raises(ValueError):
        caption_stats(caps, state, np.zeros((4, 32, 32, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        caption_stats([])

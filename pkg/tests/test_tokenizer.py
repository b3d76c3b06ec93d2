import random

import pytest

from bias_rescore.tokenizer import (
    SPECIAL_SURFACES,
    SpecialToken,
    Vocab,
    build_vocab,
    decode,
    encode,
)


def test_build_vocab_counts_specials_and_chars():
    vocab = build_vocab(["ab"])
    assert vocab.vocab_size == 11 + 2
    assert vocab.chars == ["a", "b"]


def test_build_vocab_ignores_empty_strings():
    vocab = build_vocab(["", "a"])
    assert vocab.chars == ["a"]


def test_build_vocab_rejects_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab(["", ""])
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab([])


def test_specials_take_the_lowest_ids():
    vocab = build_vocab(["zyx"])
    for i, token in enumerate(SpecialToken):
        assert vocab.special_id(token) == i
        assert vocab.is_special(i)
    assert vocab.chars == ["x", "y", "z"]
    assert vocab.id("x") == len(SPECIAL_SURFACES)
    assert not vocab.is_special(vocab.id("x"))


def test_maps_are_exact_inverses():
    vocab = build_vocab(["hello world"])
    for token_id in range(vocab.vocab_size):
        assert vocab.id(vocab.surface(token_id)) == token_id


def test_encode_plain_text():
    vocab = build_vocab(["ab"])
    assert encode("ab", vocab) == [vocab.id("a"), vocab.id("b")]


def test_class_tags_collapse_to_one_id():
    vocab = build_vocab(["amy"])
    assert encode("<PER>amy</PER>", vocab) == [
        vocab.special_id(SpecialToken.OPEN_PER),
        vocab.id("a"),
        vocab.id("m"),
        vocab.id("y"),
        vocab.special_id(SpecialToken.CLOSE_PER),
    ]


def test_input_scaffold_is_one_token():
    vocab = build_vocab(["call amy"])
    ids = encode(" Input: call", vocab)
    assert ids[0] == vocab.special_id(SpecialToken.INPUT_MARK)
    assert len(ids) == 1 + len("call")


def test_unknown_character_names_char_and_position():
    vocab = build_vocab(["ab"])
    with pytest.raises(ValueError, match=r"'c' at position 2"):
        encode("abc", vocab)


def test_decode_specials_render_canonical_surface():
    vocab = build_vocab(["a"])
    assert decode([vocab.id("a")], vocab) == "a"
    assert decode([vocab.special_id(SpecialToken.OPEN_LOC)], vocab) == "<LOC>"


def test_decode_out_of_range_id():
    vocab = build_vocab(["a"])
    with pytest.raises(ValueError, match="out of range"):
        decode([vocab.vocab_size], vocab)
    with pytest.raises(ValueError, match="out of range"):
        decode([-1], vocab)


def test_round_trip_random_strings():
    alphabet = "abcdefghij klmn"
    vocab = build_vocab([alphabet])
    rng = random.Random(0)
    for _ in range(1000):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        assert decode(encode(text, vocab), vocab) == text


def test_serialization_is_deterministic(tmp_path):
    first = build_vocab(["the quick brown fox", "jumps"])
    second = build_vocab(["jumps", "the quick brown fox"])
    assert first.to_json() == second.to_json()

    path = tmp_path / "vocab.json"
    first.save(path)
    loaded = Vocab.load(path)
    assert loaded == first
    assert loaded.vocab_size == first.vocab_size


def test_vocab_rejects_tampered_layout():
    with pytest.raises(ValueError):
        Vocab(specials=SPECIAL_SURFACES, chars=["b", "a"])
    with pytest.raises(ValueError):
        Vocab(specials=SPECIAL_SURFACES[:-1], chars=["a"])

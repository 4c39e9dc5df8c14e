"""Tokenizer grammar and vocabulary invariants."""

from __future__ import annotations

import pytest

from markvlm.vocab import (
    MAX_MARKS,
    RESERVED_TOKENS,
    UNK,
    Vocab,
    VocabError,
    detokenize,
    split_text,
)


def test_split_mark_templates_as_single_tokens():
    assert split_text("<Region 1>: airplane") == ["<Region 1>", ":", "airplane"]
    assert split_text("<Mark 12>: storage tank") == ["<Mark 12>", ":", "storage", "tank"]


def test_split_empty_and_whitespace():
    assert split_text("") == []
    assert split_text("   \t ") == []


def test_split_keeps_newline_tokens():
    assert split_text("a\nb") == ["a", "\n", "b"]


def test_split_digit_runs_and_punctuation():
    assert split_text("'bbox':[10,10,50,50]") == [
        "'", "bbox", "'", ":", "[", "10", ",", "10", ",", "50", ",", "50", "]",
    ]


@pytest.mark.parametrize(
    "text",
    [
        "<Region 1>: airplane\n<Region 2>: vehicle\n'bbox':[10,10,50,50],[60,60,90,90]",
        "<Mark 1>: ship\n'points':[5,9]",
        "<Region 1>: two ships anchored near the harbor",
        "a large storage tank, beside the road.",
        "'points':[5,9],[12,30.5]",
    ],
)
def test_detokenize_inverts_split_on_answer_grammar(text):
    assert detokenize(split_text(text)) == text


def test_reserved_block_always_present():
    vocab = Vocab.from_corpus(["just a tiny corpus"])
    for tok in RESERVED_TOKENS:
        assert tok in vocab
    assert f"<Region {MAX_MARKS}>" in vocab
    assert f"<Mark {MAX_MARKS}>" in vocab
    assert f"<Region {MAX_MARKS + 1}>" not in vocab


def test_ids_contiguous_and_round_trip():
    vocab = Vocab.from_corpus(["alpha beta", "beta gamma"])
    assert [vocab.id(t) for t in vocab.tokens] == list(range(len(vocab)))
    for t in ("alpha", "beta", "gamma", "<sep>"):
        assert vocab.tokens[vocab.id(t)] == t


def test_unknown_words_map_to_unk():
    vocab = Vocab.from_corpus(["known words only"])
    ids = vocab.encode("zebra")
    assert ids == [vocab.id(UNK)]


def test_encode_decode_round_trip():
    text = "<Region 1>: airplane\n'bbox':[10,10,50,50]"
    vocab = Vocab.from_corpus([text])
    assert vocab.decode(vocab.encode(text)) == text


def test_decode_rejects_out_of_range_ids():
    vocab = Vocab.from_corpus(["a"])
    with pytest.raises(VocabError, match="out of range"):
        vocab.decode([len(vocab)])


def test_vocab_requires_reserved_prefix():
    with pytest.raises(VocabError):
        Vocab(["a", "b"])


def test_vocab_rejects_duplicates():
    with pytest.raises(VocabError, match="duplicate"):
        Vocab(list(RESERVED_TOKENS) + ["a", "a"])


def test_vocab_json_round_trip(tmp_path):
    vocab = Vocab.from_corpus(["some words 42 'bbox':[1,2,3,4]"])
    path = tmp_path / "vocab.json"
    vocab.to_json(path)
    back = Vocab.from_json(path)
    assert back.tokens == vocab.tokens


def test_corpus_tokens_sorted_after_reserved_block():
    vocab = Vocab.from_corpus(["delta apple", "carrot apple"])
    extra = vocab.tokens[len(RESERVED_TOKENS):]
    assert extra == sorted(extra)

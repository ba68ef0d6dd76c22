import pytest
from hypothesis import given, strategies as st

from distilkit.errors import ContractError, FormatError
from distilkit.tokenizer import (
    CLS,
    PAD,
    SEP,
    UNK,
    Encoded,
    Vocab,
    basic_split,
    decode_pieces,
    encode,
    wordpiece,
)

PAPER_VOCAB = Vocab.from_tokens(
    ["mobile", "##note", "to", "ms", ".", "jacobs", "##on", "and", "ferrer"])


class TestBasicSplit:
    def test_empty(self):
        assert basic_split("") == []

    def test_punctuation_becomes_standalone(self):
        assert basic_split("ms. jacobson") == ["ms", ".", "jacobson"]

    def test_lowercase_and_whitespace_collapse(self):
        assert basic_split("Hello,  World") == ["hello", ",", "world"]

    def test_multiple_punctuation(self):
        assert basic_split("a!?b") == ["a", "!", "?", "b"]


class TestWordpiece:
    def test_greedy_split_with_continuation(self):
        assert wordpiece("mobilenote", PAPER_VOCAB) == ["mobile", "##note"]

    def test_name_split(self):
        assert wordpiece("jacobson", PAPER_VOCAB) == ["jacobs", "##on"]

    def test_uncoverable_word_becomes_unk(self):
        assert wordpiece("xyzzy", PAPER_VOCAB) == [UNK]

    def test_partial_coverage_still_unk(self):
        # "mobile" matches but the tail "ß" cannot
        assert wordpiece("mobileß", PAPER_VOCAB) == [UNK]

    def test_empty_word_rejected(self):
        with pytest.raises(ContractError):
            wordpiece("", PAPER_VOCAB)


class TestEncode:
    def test_worked_example(self):
        enc = encode("mobilenote to ms. jacobson and ms. ferrer",
                     PAPER_VOCAB, max_len=16)
        tokens = decode_pieces(enc, PAPER_VOCAB)
        assert tokens == [CLS, "mobile", "##note", "to", "ms", ".", "jacobs",
                          "##on", "and", "ms", ".", "ferrer", SEP]

    def test_empty_text(self):
        enc = encode("", PAPER_VOCAB, max_len=6)
        assert decode_pieces(enc, PAPER_VOCAB) == [CLS, SEP]
        assert enc.length == 2
        assert all(PAPER_VOCAB.id_to_token[i] == PAD for i in enc.ids[2:])

    def test_truncation(self):
        text = " ".join(["ms"] * 300)
        enc = encode(text, PAPER_VOCAB, max_len=128)
        assert enc.length == 128
        assert enc.ids[-1] == PAPER_VOCAB.sep_id

    def test_max_len_too_small_rejected(self):
        with pytest.raises(ContractError):
            encode("ms", PAPER_VOCAB, max_len=1)

    def test_deterministic(self):
        a = encode("ms. jacobson", PAPER_VOCAB, max_len=10)
        b = encode("ms. jacobson", PAPER_VOCAB, max_len=10)
        assert a == b

    def test_unk_count_matches_uncoverable_words(self):
        enc = encode("qqq ms zzz", PAPER_VOCAB, max_len=10)
        unk = sum(1 for i in enc.ids if i == PAPER_VOCAB.unk_id)
        assert unk == 2

    def test_all_ids_below_vocab_size(self):
        enc = encode("mobilenote to ms. jacobson", PAPER_VOCAB, max_len=32)
        assert all(0 <= i < len(PAPER_VOCAB) for i in enc.ids)


class TestVocab:
    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "vocab.txt"
        PAPER_VOCAB.to_file(path)
        loaded = Vocab.from_file(path)
        assert loaded.id_to_token == PAPER_VOCAB.id_to_token

    def test_line_number_is_id(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("[PAD]\n[UNK]\n[CLS]\n[SEP]\nhello\n")
        v = Vocab.from_file(path)
        assert v.id("hello") == 4
        assert v.pad_id == 0

    def test_missing_special_rejected(self):
        with pytest.raises(FormatError):
            Vocab(["[CLS]", "[SEP]", "[UNK]", "a"])

    def test_duplicate_rejected(self):
        with pytest.raises(FormatError):
            Vocab(["[CLS]", "[SEP]", "[UNK]", "[PAD]", "a", "a"])

    def test_bare_continuation_rejected(self):
        with pytest.raises(FormatError):
            Vocab(["[CLS]", "[SEP]", "[UNK]", "[PAD]", "##"])


@given(st.sampled_from(["mobile", "mobilenote", "jacobson", "ms", "ferrer",
                        "mobilemobile"]))
def test_piece_concatenation_reproduces_word(word):
    pieces = wordpiece(word, PAPER_VOCAB)
    if pieces != [UNK]:
        rebuilt = pieces[0] + "".join(p[2:] for p in pieces[1:])
        assert rebuilt == word


@given(st.text(max_size=40))
def test_encode_total_and_idempotent(text):
    enc = encode(text, PAPER_VOCAB, max_len=16)
    assert isinstance(enc, Encoded)
    assert 2 <= enc.length <= 16
    assert len(enc.ids) == 16
    assert all(0 <= i < len(PAPER_VOCAB) for i in enc.ids)
    assert enc == encode(text, PAPER_VOCAB, max_len=16)

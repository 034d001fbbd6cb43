import html

import pytest
import regex
from hypothesis import given, settings
from hypothesis import strategies as st

from patchtag import SchemaError, Vocabulary, load_vocabulary, save_vocabulary, tokenize
from patchtag.bundle import toy_vocabulary
from patchtag.tokenizer import (EOT_TOKEN, PAD_ID, SOT_TOKEN, byte_symbols,
                                encode_text_ids)

# independent re-statement of the released byte table construction
def reference_byte_table():
    bs = list(range(ord("!"), ord("~") + 1))
    bs += list(range(ord("¡"), ord("¬") + 1))
    bs += list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


_REF_PATTERN = regex.compile(
    r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    regex.IGNORECASE)


def reference_encode(text, vocab):
    """Slow merge loop rebuilt from the published algorithm description."""
    table = reference_byte_table()
    text = html.unescape(html.unescape(text))
    text = " ".join(text.strip().split()).lower()
    ids = []
    for token in _REF_PATTERN.findall(text):
        symbols = [table[b] for b in token.encode("utf-8")]
        symbols[-1] = symbols[-1] + "</w>"
        while len(symbols) > 1:
            best, best_rank = None, None
            for i in range(len(symbols) - 1):
                rank = vocab.ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best, best_rank = (symbols[i], symbols[i + 1]), rank
            if best is None:
                break
            rebuilt = []
            i = 0
            while i < len(symbols):
                if (i + 1 < len(symbols)
                        and (symbols[i], symbols[i + 1]) == best):
                    rebuilt.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    rebuilt.append(symbols[i])
                    i += 1
            symbols = rebuilt
        ids.extend(vocab.encoder[s] for s in symbols)
    return ids


@pytest.fixture(scope="module")
def vocab():
    return toy_vocabulary()


def test_byte_table_matches_reference():
    ref = reference_byte_table()
    table = byte_symbols()
    assert len(table) == 256
    for b in range(256):
        assert table[b] == ref[b]
    assert len(set(table)) == 256


def test_empty_text(vocab):
    seq = tokenize("", vocab, 8)
    assert seq.ids == (vocab.sot_id, vocab.eot_id) + (PAD_ID,) * 6
    assert seq.eot_index == 1


def test_single_merge_applies(vocab):
    # toy merges chain a+b -> ab, ab+c</w> -> abc</w>
    assert encode_text_ids("abc", vocab) == [vocab.encoder["abc</w>"]]
    # word-final "b" carries the end marker, so the plain a+b merge cannot fire
    assert encode_text_ids("ab", vocab) == [vocab.encoder["a"], vocab.encoder["b</w>"]]
    assert encode_text_ids("aba", vocab)[0] == vocab.encoder["ab"]


def test_known_words_merge_fully(vocab):
    for word in ("hello", "the", "dog"):
        ids = encode_text_ids(word, vocab)
        assert ids == [vocab.encoder[word + "</w>"]]


def test_cleaning_rules(vocab):
    spaced = encode_text_ids("  The   DOG ", vocab)
    plain = encode_text_ids("the dog", vocab)
    assert spaced == plain
    escaped = encode_text_ids("the &amp;amp; dog", vocab)
    literal = encode_text_ids("the & dog", vocab)
    assert escaped == literal


def test_truncation_keeps_eot_last(vocab):
    seq = tokenize("x " * 50, vocab, 16)
    assert len(seq.ids) == 16
    assert seq.eot_index == 15
    assert seq.ids[0] == vocab.sot_id
    assert seq.ids[15] == vocab.eot_id
    body = encode_text_ids("x " * 50, vocab)
    assert seq.ids[1:15] == tuple(body[:14])


def test_padding_after_eot(vocab):
    seq = tokenize("dog", vocab, 8)
    assert seq.ids[seq.eot_index] == vocab.eot_id
    assert all(i == PAD_ID for i in seq.ids[seq.eot_index + 1:])


def test_matches_reference_on_fixed_strings(vocab):
    for text in ("hello abc the dog", "ab ab ab", "dog!! cat?", "a b c d e",
                 "thethethe", "abcabc", "", "  ", "42 dogs & 7 cats"):
        assert encode_text_ids(text, vocab) == reference_encode(text, vocab)


@settings(max_examples=150, deadline=None)
@given(st.text(max_size=40))
def test_matches_reference_on_random_strings(text):
    vocab = toy_vocabulary()
    assert encode_text_ids(text, vocab) == reference_encode(text, vocab)


def test_all_ids_below_vocab_size(vocab):
    ids = encode_text_ids("héllo wörld é世界", vocab)
    assert all(0 <= i < len(vocab) for i in ids)


def test_vocab_round_trip(tmp_path, vocab):
    enc, mrg = tmp_path / "vocab.json", tmp_path / "merges.txt"
    save_vocabulary(vocab, enc, mrg)
    loaded = load_vocabulary(enc, mrg)
    assert loaded.encoder == vocab.encoder
    assert loaded.merges == vocab.merges


def test_vocab_requires_specials(vocab):
    broken = {k: v for k, v in vocab.encoder.items() if k != EOT_TOKEN}
    with pytest.raises(SchemaError):
        Vocabulary(encoder=broken, merges=vocab.merges)


def test_vocab_requires_byte_completeness(vocab):
    sample = byte_symbols()[10]
    broken = {k: v for k, v in vocab.encoder.items() if k != sample}
    with pytest.raises(SchemaError):
        Vocabulary(encoder=broken, merges=vocab.merges)


def test_vocab_requires_dense_ids(vocab):
    shifted = dict(vocab.encoder)
    shifted[SOT_TOKEN] = len(shifted) + 5
    with pytest.raises(SchemaError):
        Vocabulary(encoder=shifted, merges=vocab.merges)

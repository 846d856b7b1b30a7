"""Vocabulary, greedy encoding, round-trip, batching."""

import numpy as np
import pytest
from hypothesis import given, settings

from locaris.errors import DataError, UnknownToken
from locaris.telemetry import serialize_prompt
from locaris.tokenizer import (
    VOCAB_VERSION, build_vocab, decode, encode, pad_batch, vocab_from_json,
    vocab_to_json,
)

from conftest import telemetry_samples


class TestVocab:
    def test_size_and_layout(self, vocab):
        assert len(vocab) == 63
        assert vocab.id_to_token[0] == "<eos>"
        assert vocab.id_to_token[1] == "AP1"
        assert vocab.id_to_token[16] == "AP16"
        assert vocab.id_to_token[17] == "RTT:"
        assert vocab.id_to_token[18] == "RSS:"
        assert vocab.eos_id == vocab.pad_id == 0
        assert vocab.version == VOCAB_VERSION

    def test_json_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        vocab_to_json(vocab, path)
        again = vocab_from_json(path)
        assert again.id_to_token == vocab.id_to_token
        assert again.eos_id == vocab.eos_id

    def test_fits_one_byte(self, vocab):
        assert len(vocab) <= 256


class TestEncode:
    def test_contract_example(self, vocab):
        ids = encode("AP1 RSS: -45", vocab).ids
        assert list(ids) == [1, 35, 18, 35, 34, 28, 29, 0]

    def test_greedy_longest_match(self, vocab):
        # AP12 must become one token, not AP1 followed by the digit 2.
        ids = encode("AP12 RTT: 5", vocab).ids
        assert ids[0] == 12

    def test_single_trailing_eos(self, vocab):
        ids = encode("AP1 RTT: 8667", vocab).ids
        assert ids[-1] == vocab.eos_id
        assert list(ids).count(vocab.eos_id) == 1

    def test_unknown_character_offset(self, vocab):
        with pytest.raises(UnknownToken) as err:
            encode("AP1 RSS: -45!", vocab)
        assert err.value.offset == 12

    def test_unknown_at_start(self, vocab):
        with pytest.raises(UnknownToken) as err:
            encode("Q", vocab)
        assert err.value.offset == 0

    @given(telemetry_samples())
    @settings(max_examples=200)
    def test_round_trip(self, vocab, sample):
        prompt = serialize_prompt(sample)
        assert decode(encode(prompt, vocab).ids, vocab) == prompt


class TestPadBatch:
    def test_shapes_and_mask(self, vocab):
        seqs = [encode("AP1 RSS: -45", vocab), encode("AP2 RTT: 12334", vocab)]
        batch = pad_batch(seqs, [(0.0, 0.0), (1.0, 2.0)])
        n, length = batch.ids.shape
        assert n == 2
        assert length == max(s.length for s in seqs)
        assert batch.attention_mask.shape == (n, length)
        for i, seq in enumerate(seqs):
            assert batch.attention_mask[i, : seq.length].all()
            assert not batch.attention_mask[i, seq.length :].any()
            assert (batch.ids[i, seq.length :] == vocab.pad_id).all()

    def test_targets_shape(self, vocab):
        batch = pad_batch([encode("AP1 RSS: -45", vocab)], [(3.0, 4.0)])
        assert batch.targets.shape == (1, 2)
        assert batch.targets.dtype == np.float64

    def test_empty_batch(self):
        with pytest.raises(DataError):
            pad_batch([], [])

    def test_count_mismatch(self, vocab):
        with pytest.raises(DataError):
            pad_batch([encode("AP1 RSS: -45", vocab)], [(0.0, 0.0), (1.0, 1.0)])

    @given(telemetry_samples())
    def test_lengths_recoverable_from_mask(self, vocab, sample):
        seq = encode(serialize_prompt(sample), vocab)
        batch = pad_batch([seq, encode("AP1 RSS: -45", vocab)],
                          [(0.0, 0.0), (0.0, 0.0)])
        assert batch.lengths[0] == seq.length

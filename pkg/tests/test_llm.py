import numpy as np
import pytest

from minimm import llm as L
from minimm.errors import ContractError, SequenceOverflowError
from minimm.llm import (
    EOS,
    SEP,
    TEXT_TAG,
    VISUAL_TAG,
    LanguageModel,
    LlmConfig,
    decode_text,
    encode_text,
)
from minimm.tensor import Tensor


def make_llm(seed=0, **kw):
    return LanguageModel(LlmConfig(**kw), np.random.default_rng(seed))


def test_text_round_trip():
    s = "a red circle left of a blue square?"
    assert decode_text(encode_text(s)) == s
    with pytest.raises(ContractError):
        encode_text("Ünicode")


def test_assemble_pure_text():
    m = make_llm(layers=1)
    seq = m.assemble_sequence(encode_text("abc"))
    assert len(seq) == 3
    assert (seq.segment_tags == TEXT_TAG).all()


def test_assemble_interleaved_tags(rng):
    m = make_llm(layers=1)
    visual = Tensor(rng.standard_normal((4, 128)).astype(np.float32))
    seq = m.assemble_sequence(encode_text("abc"), visual, encode_text("de"))
    assert len(seq) == 9
    expected = [TEXT_TAG] * 3 + [VISUAL_TAG] * 4 + [TEXT_TAG] * 2
    assert list(seq.segment_tags) == expected


def test_assemble_visual_slots_verbatim(rng):
    m = make_llm(layers=1)
    visual = Tensor(rng.standard_normal((4, 128)).astype(np.float32))
    seq = m.assemble_sequence(encode_text("abc"), visual, encode_text("de"))
    assert np.array_equal(seq.embeddings.data[3:7], visual.data)


def test_assemble_overflow():
    m = make_llm(layers=1, max_seq=8)
    with pytest.raises(SequenceOverflowError):
        m.assemble_sequence(encode_text("abcdefghi"))


def test_causality_bitwise(rng):
    m = make_llm(layers=2)
    ids = encode_text("hello world")
    base = m.forward_hidden(m.assemble_sequence(ids))[0].data
    # perturb token j = 6; prefix hidden states must not move at all
    perturbed_ids = list(ids)
    perturbed_ids[6] = encode_text("z")[0]
    pert = m.forward_hidden(m.assemble_sequence(perturbed_ids))[0].data
    assert np.array_equal(base[:6], pert[:6])
    assert not np.array_equal(base[6:], pert[6:])


def test_forward_deterministic():
    m = make_llm(layers=2)
    seq = m.assemble_sequence(encode_text("same text"))
    a = m.forward_hidden(seq)[0].data
    b = m.forward_hidden(m.assemble_sequence(encode_text("same text")))[0].data
    assert np.array_equal(a, b)


def test_single_layer_h_prev_convention():
    m = make_llm(layers=1)
    seq = m.assemble_sequence(encode_text("abc"))
    _, h_prev, _ = m.forward_hidden(seq)
    expected = m.final_norm(seq.embeddings).data
    assert np.array_equal(h_prev.data, expected)


def test_h_prev_differs_from_h_last(rng):
    m = make_llm(layers=2)
    h_last, h_prev, _ = m.forward_hidden(m.assemble_sequence(encode_text("abcd")))
    assert np.abs(h_last.data - h_prev.data).max() > 1e-4


def test_lm_loss_uniform_logits_is_log_vocab():
    m = make_llm(layers=1)
    m.head.w.data[:] = 0
    m.head.b.data[:] = 0
    seq = m.assemble_sequence(encode_text("abcd"))
    targets = np.full(4, -1, dtype=np.int64)
    targets[1] = encode_text("c")[0]
    targets[2] = encode_text("d")[0]
    m.set_targets(seq, targets)
    loss = m.lm_loss(seq)
    assert abs(loss.item() - np.log(512)) < 1e-5


def test_lm_loss_matches_manual_cross_entropy(rng):
    m = make_llm(layers=2)
    seq = m.assemble_sequence(encode_text("abcdef"))
    targets = np.full(6, -1, dtype=np.int64)
    targets[2] = 7
    targets[4] = 9
    m.set_targets(seq, targets)
    loss = m.lm_loss(seq).item()
    _, _, logits = m.forward_hidden(seq)
    ref = 0.0
    for pos, tgt in [(2, 7), (4, 9)]:
        row = logits.data[pos].astype(np.float64)
        row = row - row.max()
        ref += -(row[tgt] - np.log(np.exp(row).sum()))
    assert abs(loss - ref / 2) < 1e-5


def test_targets_on_visual_positions_rejected(rng):
    m = make_llm(layers=1)
    visual = Tensor(rng.standard_normal((2, 128)).astype(np.float32))
    seq = m.assemble_sequence(encode_text("ab"), visual)
    targets = np.full(4, -1, dtype=np.int64)
    targets[2] = 5  # visual slot
    with pytest.raises(ContractError):
        m.set_targets(seq, targets)


def test_lm_loss_requires_targets():
    m = make_llm(layers=1)
    with pytest.raises(ContractError):
        m.lm_loss(m.assemble_sequence(encode_text("ab")))


def test_batched_forward_matches_single(rng):
    m = make_llm(layers=2)
    seqs = [m.assemble_sequence(encode_text(t)) for t in ("short", "a longer sequence")]
    h_last_b, h_prev_b, logits_b = m.forward_hidden_batch(seqs)
    for i, t in enumerate(("short", "a longer sequence")):
        h_last, h_prev, logits = m.forward_hidden(m.assemble_sequence(encode_text(t)))
        n = len(t)
        assert np.abs(h_last_b.data[i, :n] - h_last.data).max() < 1e-5
        assert np.abs(h_prev_b.data[i, :n] - h_prev.data).max() < 1e-5
        assert np.abs(logits_b.data[i, :n] - logits.data).max() < 1e-4


def test_generate_text_deterministic_and_greedy():
    m = make_llm(layers=1)
    seq = m.assemble_sequence(encode_text("ab") + [SEP])
    out1 = m.generate_text(seq, max_new=5)
    out2 = m.generate_text(m.assemble_sequence(encode_text("ab") + [SEP]), max_new=5)
    assert out1 == out2


def test_generate_rejects_empty_prompt():
    m = make_llm(layers=1)
    empty = m.assemble_sequence(encode_text("x"))
    empty.embeddings = empty.embeddings[:0]
    with pytest.raises(ContractError):
        m.generate_text(empty, max_new=2)

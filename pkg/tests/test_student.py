import numpy as np
import pytest

from distilkit import student as S
from distilkit.errors import ContractError
from distilkit.student import (
    StudentConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from distilkit.tokenizer import Encoded, Vocab, encode

from conftest import MICRO_CONFIG

VOCAB = Vocab.from_tokens([f"w{i}" for i in range(16)])  # vocab size 20


def enc(text, max_len=5):
    return encode(text, VOCAB, max_len=max_len)


def _np_lstm_sequence(params, direction, xs):
    """Independent single-sequence LSTM recurrence in plain numpy."""
    L = params.config.lstm_hidden
    h = np.zeros(L)
    c = np.zeros(L)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    outs = []
    for x in xs:
        def pre(gate):
            return (x @ params[f"lstm_{direction}_{gate}_w"].data
                    + h @ params[f"lstm_{direction}_{gate}_u"].data
                    + params[f"lstm_{direction}_{gate}_b"].data)
        i = sig(pre("input"))
        f = sig(pre("forget"))
        o = sig(pre("output"))
        g = np.tanh(pre("cell"))
        c = f * c + i * g
        h = o * np.tanh(c)
        outs.append(h)
    return outs


def _np_encode_sequence(params, encoded):
    """Oracle for encode(): per-sequence recurrence + concat + max pool."""
    emb = params["embedding"].data
    xs = [emb[i] for i in encoded.ids[: encoded.length]]
    fwd = _np_lstm_sequence(params, "fwd", xs)
    bwd = _np_lstm_sequence(params, "bwd", xs[::-1])[::-1]
    joined = np.array([np.concatenate([f, b]) for f, b in zip(fwd, bwd)])
    return joined.max(axis=0), joined


class TestEncode:
    def test_single_timestep_equals_h1(self, micro_params):
        e = Encoded(ids=(VOCAB.cls_id, VOCAB.sep_id, VOCAB.pad_id,
                         VOCAB.pad_id, VOCAB.pad_id), length=2, max_len=5)
        # length 2 = just [CLS][SEP]; compare against the recurrence oracle
        z = S.encode(micro_params, [e]).data[0]
        expected, joined = _np_encode_sequence(micro_params, e)
        np.testing.assert_allclose(z, expected, atol=1e-12)
        assert (z[None, :] >= joined - 1e-12).all()

    def test_max_dominates_every_step(self, micro_params):
        batch = [enc("w1 w2 w3"), enc("w4")]
        z = S.encode(micro_params, batch).data
        for row, e in zip(z, batch):
            _, joined = _np_encode_sequence(micro_params, e)
            assert (row[None, :] >= joined - 1e-12).all()
            # equality attained for at least one step per channel
            np.testing.assert_allclose(row, joined.max(axis=0), atol=1e-12)

    def test_matches_recurrence_oracle(self, micro_params):
        batch = [enc("w1 w2 w3"), enc("w7 w8"), enc("w15")]
        z = S.encode(micro_params, batch).data
        for row, e in zip(z, batch):
            expected, _ = _np_encode_sequence(micro_params, e)
            np.testing.assert_allclose(row, expected, atol=1e-12)

    def test_padding_invariance(self, micro_params):
        short = enc("w1 w2", max_len=5)
        padded = enc("w1 w2", max_len=5)
        extra = Encoded(ids=tuple(list(padded.ids[:padded.length])
                                  + [VOCAB.pad_id] * (5 - padded.length)),
                        length=padded.length, max_len=5)
        a = S.encode(micro_params, [short]).data
        b = S.encode(micro_params, [extra]).data
        np.testing.assert_array_equal(a, b)

    def test_mixed_lengths_match_singleton_batches(self, micro_params):
        batch = [enc("w1 w2 w3"), enc("w4")]
        together = S.encode(micro_params, batch).data
        separate = np.vstack([S.encode(micro_params, [e]).data for e in batch])
        np.testing.assert_allclose(together, separate, atol=1e-12)

    def test_empty_batch_rejected(self, micro_params):
        with pytest.raises(ContractError):
            S.encode(micro_params, [])


class TestHeads:
    def test_zero_classifier_gives_uniform(self, micro_params):
        micro_params["classifier_w"].data[:] = 0.0
        z = S.encode(micro_params, [enc("w1 w2")])
        p = S.classify(micro_params, z).data
        np.testing.assert_allclose(p, 1 / 3, atol=1e-12)

    def test_rows_sum_to_one(self, micro_params):
        z = S.encode(micro_params, [enc("w1"), enc("w2 w3")])
        p = S.classify(micro_params, z).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_classify_matches_external_softmax(self, micro_params):
        z = S.encode(micro_params, [enc("w1 w2")])
        p = S.classify(micro_params, z).data
        scores = z.data @ micro_params["classifier_w"].data
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        np.testing.assert_allclose(p, e / e.sum(axis=1, keepdims=True),
                                   atol=1e-12)

    def test_constant_regressor(self, micro_params):
        micro_params["regressor_w"].data[:] = 0.0
        micro_params["regressor_b"].data[:] = [1.0, -1.0, 0.5]
        z = S.encode(micro_params, [enc("w1"), enc("w2")])
        r = S.regress_logits(micro_params, z).data
        np.testing.assert_allclose(r, [[1.0, -1.0, 0.5]] * 2, atol=1e-12)

    def test_regressor_is_affine(self, micro_params):
        z = S.encode(micro_params, [enc("w1 w2")])
        from distilkit.autodiff import Tensor
        z2 = Tensor(2 * z.data)
        r1 = S.regress_logits(micro_params, z).data
        r2 = S.regress_logits(micro_params, z2).data
        np.testing.assert_allclose(
            r2 - r1, z.data @ micro_params["regressor_w"].data.T, atol=1e-12)

    def test_regress_matches_external_affine(self, micro_params):
        z = S.encode(micro_params, [enc("w3 w4")])
        r = S.regress_logits(micro_params, z).data
        expected = (z.data @ micro_params["regressor_w"].data.T
                    + micro_params["regressor_b"].data)
        np.testing.assert_allclose(r, expected, atol=1e-12)

    def test_zero_projector_gives_zeros(self, micro_params):
        micro_params["projector_w"].data[:] = 0.0
        micro_params["projector_b"].data[:] = 0.0
        z = S.encode(micro_params, [enc("w1")])
        np.testing.assert_allclose(S.project(micro_params, z).data, 0.0,
                                   atol=1e-12)

    def test_project_shape_and_value(self, micro_params):
        from scipy.special import erf
        z = S.encode(micro_params, [enc("w1 w2"), enc("w3")])
        out = S.project(micro_params, z).data
        assert out.shape == (2, MICRO_CONFIG.teacher_hidden)
        pre = (z.data @ micro_params["projector_w"].data.T
               + micro_params["projector_b"].data)
        expected = pre * 0.5 * (1 + erf(pre / np.sqrt(2)))
        np.testing.assert_allclose(out, expected, atol=1e-12)


class TestGradientsAndFreezing:
    def _loss(self, params, batch):
        from distilkit import autodiff as ad
        z = S.encode(params, batch)
        p = S.classify(params, z)
        r = S.regress_logits(params, z)
        f = S.project(params, z)
        return ad.tsum(ad.add(ad.add(ad.tsum(ad.log_clamped(p)),
                                     ad.tsum(ad.mul(r, r))),
                              ad.tsum(ad.mul(f, f))))

    def test_all_unfrozen_all_receive_grads(self):
        # Generic batch: long enough that max-pool winners spread over steps
        # in both directions, so every recurrence matrix participates.
        import dataclasses
        params = init_params(dataclasses.replace(MICRO_CONFIG, max_len=8),
                             seed=1)
        params.set_frozen(())
        batch = [enc("w1 w2 w3 w4 w5 w6", max_len=8),
                 enc("w7 w8 w9 w10 w11", max_len=8),
                 enc("w12 w13 w14 w2 w4", max_len=8)]
        self._loss(params, batch).backward()
        for name, t in params.tensors.items():
            assert t.grad is not None, name
            assert np.abs(t.grad).sum() > 0, name

    def test_frozen_group_receives_none(self, micro_params):
        micro_params.set_frozen({S.GROUP_EMBEDDINGS, S.GROUP_BILSTM})
        batch = [enc("w1 w2 w3")]
        self._loss(micro_params, batch).backward()
        for name, t in micro_params.tensors.items():
            if micro_params.group_of(name) == S.GROUP_HEADS:
                assert t.grad is not None, name
            else:
                assert t.grad is None, name


class TestInitAndCheckpoint:
    def test_init_deterministic(self):
        a = init_params(MICRO_CONFIG, seed=11)
        b = init_params(MICRO_CONFIG, seed=11)
        for name in a.names():
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_forget_bias_is_one(self, micro_params):
        np.testing.assert_array_equal(
            micro_params["lstm_fwd_forget_b"].data, 1.0)
        np.testing.assert_array_equal(
            micro_params["lstm_bwd_forget_b"].data, 1.0)

    def test_init_range(self, micro_params):
        w = micro_params["embedding"].data
        assert w.min() >= -0.1 and w.max() <= 0.1

    def test_checkpoint_round_trip_bit_exact(self, micro_params, tmp_path):
        micro_params.set_frozen({S.GROUP_EMBEDDINGS})
        path = tmp_path / "model.ckpt"
        save_checkpoint(micro_params, path)
        loaded = load_checkpoint(path)
        assert loaded.config == micro_params.config
        assert loaded.frozen == micro_params.frozen
        for name in micro_params.names():
            np.testing.assert_array_equal(loaded[name].data,
                                          micro_params[name].data)
        path2 = tmp_path / "model2.ckpt"
        save_checkpoint(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_pretrained_embedding_hook(self, micro_params):
        table = np.full((20, 4), 0.25)
        S.load_pretrained_embeddings(micro_params, table)
        np.testing.assert_array_equal(micro_params["embedding"].data, table)
        with pytest.raises(ContractError):
            S.load_pretrained_embeddings(micro_params, np.zeros((3, 3)))

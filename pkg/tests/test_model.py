import math

import numpy as np
import pytest

from hlstm_phish import model as M
from hlstm_phish.numcore import finite_diff_check
from hlstm_phish.textprep import PAD, EncodedEmail, stack
from hlstm_phish.train import batch_loss

from toy import ref_attention, ref_bilstm, ref_forward, toy_batch, toy_encoded, toy_params, toy_table


def _scalar_lstm_cell(x, h, c, Wx, Wh, b):
    """Gate-by-gate evaluation with math functions only."""
    n = len(h)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    pre = []
    for r in range(4 * n):
        s = b[r]
        for k in range(len(x)):
            s += Wx[r][k] * x[k]
        for k in range(n):
            s += Wh[r][k] * h[k]
        pre.append(s)
    h_new, c_new = [], []
    for j in range(n):
        i, f, g, o = sig(pre[j]), sig(pre[n + j]), math.tanh(pre[2 * n + j]), sig(pre[3 * n + j])
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * math.tanh(cj))
    return h_new, c_new


class TestLstmCell:
    def test_zero(self):
        c = 3
        z = np.zeros
        h, cs = M.lstm_cell(z(2), z(c), z(c), z((4 * c, 2)), z((4 * c, c)), z(4 * c))
        np.testing.assert_array_equal(h, 0)
        np.testing.assert_array_equal(cs, 0)

    def test_forget_saturation(self):
        c = 2
        b = np.zeros(4 * c)
        b[c: 2 * c] = 20.0
        c_prev = np.array([0.7, -1.3])
        _, cs = M.lstm_cell(np.zeros(3), np.zeros(c), c_prev, np.zeros((4 * c, 3)), np.zeros((4 * c, c)), b)
        np.testing.assert_allclose(cs, c_prev, rtol=1e-8)

    def test_against_scalar_loop(self):
        rng = np.random.default_rng(4)
        n = 4
        x, h, c = rng.normal(size=4), rng.normal(size=n), rng.normal(size=n)
        Wx, Wh, b = rng.normal(size=(4 * n, 4)), rng.normal(size=(4 * n, n)), rng.normal(size=4 * n)
        h_ref, c_ref = _scalar_lstm_cell(x.tolist(), h.tolist(), c.tolist(), Wx.tolist(), Wh.tolist(), b.tolist())
        h_out, c_out = M.lstm_cell(x, h, c, Wx, Wh, b)
        np.testing.assert_allclose(h_out, h_ref, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(c_out, c_ref, rtol=1e-13, atol=1e-15)


class TestBiLstm:
    def setup_method(self):
        self.params = toy_params(d=4, c=3)
        self.rng = np.random.default_rng(5)

    def test_length_one(self):
        x = self.rng.normal(size=(1, 1, 4))
        out, _ = M.bilstm(x, np.ones((1, 1)), self.params, "word")
        ref = ref_bilstm([x[0, 0]], self.params, "word")
        np.testing.assert_allclose(out[0, 0], ref[0], atol=1e-15)

    def test_all_masked(self):
        out, _ = M.bilstm(self.rng.normal(size=(2, 4, 4)), np.zeros((2, 4)), self.params, "word")
        np.testing.assert_array_equal(out, 0)

    def test_manual_unroll_with_padding(self):
        x = self.rng.normal(size=(1, 5, 4))
        mask = np.array([[1, 1, 1, 0, 0]], dtype=float)
        out, _ = M.bilstm(x, mask, self.params, "word")
        ref = ref_bilstm(list(x[0, :3]), self.params, "word")
        np.testing.assert_allclose(out[0, :3], np.array(ref), atol=1e-14)
        np.testing.assert_array_equal(out[0, 3:], 0)


class TestAttention:
    def setup_method(self):
        self.params = toy_params(c=3, a=3)
        self.W, self.b, self.w = (self.params[f"word.att.{k}"] for k in "Wbw")

    def test_identical_hiddens(self):
        h = np.array([0.3, -0.2, 0.5, 0.1, 0.0, 0.9])
        weights, pooled, _ = M.attention_pool(np.stack([h, h])[None], np.ones((1, 2)), self.W, self.b, self.w)
        np.testing.assert_allclose(weights[0], [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(pooled[0], h, atol=1e-15)

    def test_single_position(self):
        H = np.random.default_rng(1).normal(size=(1, 3, 6))
        weights, pooled, _ = M.attention_pool(H, np.array([[1.0, 0, 0]]), self.W, self.b, self.w)
        np.testing.assert_array_equal(weights[0], [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(pooled[0], H[0, 0])

    def test_direct_summation(self):
        H = np.random.default_rng(2).normal(size=(1, 3, 6))
        weights, pooled, _ = M.attention_pool(H, np.ones((1, 3)), self.W, self.b, self.w)
        ref_w, ref_pooled = ref_attention(list(H[0]), self.params, "word.att")
        np.testing.assert_allclose(weights[0], ref_w, atol=1e-15)
        np.testing.assert_allclose(pooled[0], ref_pooled, atol=1e-15)

    def test_all_masked_gives_zero(self):
        H = np.ones((1, 2, 6))
        weights, pooled, _ = M.attention_pool(H, np.zeros((1, 2)), self.W, self.b, self.w)
        np.testing.assert_array_equal(weights, 0)
        np.testing.assert_array_equal(pooled, 0)


class TestForward:
    def test_matches_compositional_reference(self):
        params = toy_params(d=4, c=2, a=3, use_header=True)
        batch_items = [toy_encoded(np.random.default_rng(s), L=2, K=3, H=5) for s in range(6)]
        trace = M.forward(stack(batch_items), params)
        for n, enc in enumerate(batch_items):
            ref = ref_forward(enc, params)
            assert trace.p[n] == pytest.approx(ref["p"], abs=1e-14)
            np.testing.assert_allclose(trace.body.r_b[n], ref["r_b"], atol=1e-14)
            n_sent = int(enc.sentence_mask.sum())
            np.testing.assert_allclose(trace.beta[n, :n_sent], ref["beta"], atol=1e-14)
            for i, a in enumerate(ref["alphas"]):
                np.testing.assert_allclose(trace.alpha[n, i, : len(a)], a, atol=1e-14)
            np.testing.assert_allclose(trace.header.r_s[n], ref["r_s"], atol=1e-14)

    def test_body_only_reference(self):
        params = toy_params(use_header=False)
        items = [toy_encoded(np.random.default_rng(s), with_header=False) for s in range(4)]
        trace = M.forward(stack(items), params)
        for n, enc in enumerate(items):
            assert trace.p[n] == pytest.approx(ref_forward(enc, params)["p"], abs=1e-14)

    def test_identical_sentences_share_u_hat(self):
        params = toy_params(use_header=False)
        ids = np.array([[3, 4, 5], [3, 4, 5], [3, 4, 5], [0, 0, 0]])
        mask = (ids != PAD).astype(float)
        enc = EncodedEmail(ids, mask, mask.any(axis=1).astype(float))
        _, trace = M.predict_proba(enc, params)
        u = trace.body.u_hat[0]
        np.testing.assert_allclose(u[1], u[0], atol=1e-15)
        # the sentence BiLSTM makes h-hat position dependent, so beta is not uniform here

    def test_single_sentence_body(self):
        params = toy_params(use_header=False)
        ids2 = np.array([[3, 4, 5], [0, 0, 0]])
        mask2 = (ids2 != PAD).astype(float)
        _, trace2 = M.predict_proba(EncodedEmail(ids2, mask2, mask2.any(axis=1).astype(float)), params)
        assert trace2.beta[0].tolist() == [1.0, 0.0]
        np.testing.assert_array_equal(trace2.body.r_b[0], trace2.body.sent_hidden[0, 0])

    def test_empty_header_zero_vector(self):
        params = toy_params(use_header=True)
        rng = np.random.default_rng(0)
        enc = toy_encoded(rng, H=3)
        enc.header_ids[:] = 0
        enc.header_mask[:] = 0
        _, trace = M.predict_proba(enc, params, use_header=True)
        np.testing.assert_array_equal(trace.header.r_s, 0)

    def test_single_token_header(self):
        params = toy_params(use_header=True)
        enc = toy_encoded(np.random.default_rng(0), H=3)
        enc.header_ids[:] = [7, 0, 0]
        enc.header_mask[:] = [1, 0, 0]
        _, trace = M.predict_proba(enc, params, use_header=True)
        hidden = ref_bilstm([params["head.embed"][7]], params, "head")[0]
        np.testing.assert_allclose(trace.header.r_s[0], hidden, atol=1e-15)

    def test_output_bias_closed_forms(self):
        params = toy_params(use_header=False)
        params.params["out.W"][...] = 0.0
        params.params["out.b"][...] = 0.0
        enc = toy_encoded(np.random.default_rng(0), with_header=False)
        assert M.predict_proba(enc, params)[0] == 0.5
        params.params["out.b"][...] = 10.0
        assert M.predict_proba(enc, params)[0] == pytest.approx(1 / (1 + math.exp(-10)), abs=1e-15)

    def test_use_header_without_header_errors(self):
        params = toy_params(use_header=True)
        enc = toy_encoded(np.random.default_rng(0), with_header=False)
        with pytest.raises(ValueError):
            M.predict_proba(enc, params, use_header=True)
        with pytest.raises(ValueError):
            M.predict_proba(enc, toy_params(use_header=False), use_header=True)

    def test_default_dimensions(self):
        params = M.init_params(M.ModelDims(50, 300, 60, 60, use_header=True), seed=0)
        enc = toy_encoded(np.random.default_rng(3), vocab=50, L=4, K=6, H=5)
        _, trace = M.predict_proba(enc, params, use_header=True)
        assert trace.body.word_att.hiddens.shape[-1] == 120
        assert trace.body.u_hat.shape[-1] == 120
        assert trace.r.shape == (1, 240)
        assert 0 < trace.p[0] < 1

    def test_forget_bias_initialised(self):
        params = M.init_params(M.ModelDims(10, 4, 3, 3), seed=0)
        b = params["word.fwd.b"]
        assert b[3:6].tolist() == [1.0] * 3
        assert b[:3].tolist() == [0.0] * 3 and b[6:].tolist() == [0.0] * 6
        assert np.all(params["embed"][PAD] == 0)


class TestBackward:
    def _loss(self, batch, lam=0.1, table=None):
        def f(store):
            store.zero_grad()
            loss, _ = batch_loss(batch, store, lam, table)
            return loss.total, {k: v.copy() for k, v in store.grads.items()}
        return f

    @pytest.mark.parametrize("use_header", [False, True])
    def test_finite_differences(self, use_header):
        params = toy_params(use_header=use_header)
        batch = toy_batch(3, seed=1, with_header=use_header)
        err = finite_diff_check(self._loss(batch, 0.1, toy_table()), params, eps=1e-4)
        assert err < 1e-4

    def test_zero_upstream(self):
        params = toy_params()
        trace = M.forward(toy_batch(2), params)
        M.backward(trace, params, np.zeros(2), np.zeros_like(trace.alpha))
        assert all(np.all(g == 0) for g in params.grads.values())

    def test_additivity(self):
        params = toy_params()
        enc = toy_encoded(np.random.default_rng(9), label=1)
        single = params.copy()
        single.zero_grad()
        M.backward(M.forward(stack([enc]), single), single, np.array([0.7]))
        double = params.copy()
        double.zero_grad()
        M.backward(M.forward(stack([enc, enc]), double), double, np.array([0.7, 0.7]))
        for name in params:
            np.testing.assert_allclose(double.grads[name], 2 * single.grads[name], rtol=1e-12, atol=1e-15)

    def test_pad_embedding_gradient_zero(self):
        params = toy_params()
        batch = toy_batch(4, seed=3)
        params.zero_grad()
        batch_loss(batch, params, 0.1, toy_table())
        assert np.all(params.grads["embed"][PAD] == 0)
        assert np.all(params.grads["head.embed"][PAD] == 0)
        assert np.any(params.grads["embed"] != 0)

    def test_mismatched_upstream(self):
        params = toy_params()
        trace = M.forward(toy_batch(2), params)
        with pytest.raises(RuntimeError):
            M.backward(trace, params, np.zeros(3))

    def test_dropout_recorded_in_trace(self):
        params = toy_params(use_header=False)
        batch = toy_batch(3, seed=2, with_header=False)
        rng = np.random.default_rng(0)
        trace = M.forward(batch, params, dropout=0.5, rng=rng)
        assert set(np.unique(trace.r_drop)) <= {0.0, 2.0}

        # with the dropout masks frozen, the gradient still matches finite differences
        def f(store):
            store.zero_grad()
            tr = M.forward(batch, store, dropout=0.5, rng=np.random.default_rng(0))
            y = batch.labels
            loss = float(np.mean(-(y * np.log(tr.p) + (1 - y) * np.log(1 - tr.p))))
            M.backward(tr, store, (tr.p - y) / len(y))
            return loss, {k: v.copy() for k, v in store.grads.items()}

        assert finite_diff_check(f, params, eps=1e-4) < 1e-4

"""Hierarchical attentive BiLSTM body network and the header network.

All passes are batched over emails and hand-differentiated. Shapes use
B = emails, L = sentences, K = tokens per sentence, H = header tokens,
d = embedding size, c = LSTM cell size, a = attention size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .numcore import DTYPE, ParamStore, dropout_mask, masked_softmax, sigmoid
from .textprep import PAD, Batch, EncodedEmail, stack

INIT_SCALE = 0.08
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    embed_dim: int = 300
    cell: int = 60
    att: int = 60
    use_header: bool = False


def _uniform(rng, shape):
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


def _add_lstm(store: ParamStore, prefix: str, in_dim: int, c: int, rng) -> None:
    store.add(f"{prefix}.Wx", _uniform(rng, (4 * c, in_dim)))
    store.add(f"{prefix}.Wh", _uniform(rng, (4 * c, c)))
    b = np.zeros(4 * c)
    b[c: 2 * c] = FORGET_BIAS  # gate order i, f, g, o
    store.add(f"{prefix}.b", b)


def _add_attention(store: ParamStore, prefix: str, in_dim: int, a: int, rng) -> None:
    store.add(f"{prefix}.W", _uniform(rng, (a, in_dim)))
    store.add(f"{prefix}.b", np.zeros(a))
    store.add(f"{prefix}.w", _uniform(rng, (a,)))


def init_params(dims: ModelDims, seed=0, embedding: Optional[np.ndarray] = None) -> ParamStore:
    """Fresh parameters. ``embedding`` (vocab_size x embed_dim) overrides the random table."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, c, a = dims.embed_dim, dims.cell, dims.att
    store = ParamStore()

    def table():
        if embedding is not None:
            if embedding.shape != (dims.vocab_size, d):
                raise ValueError(f"embedding shape {embedding.shape} != {(dims.vocab_size, d)}")
            e = np.array(embedding, dtype=DTYPE)
        else:
            e = _uniform(rng, (dims.vocab_size, d))
        e[PAD] = 0.0
        return e

    store.add("embed", table(), is_embedding=True)
    _add_lstm(store, "word.fwd", d, c, rng)
    _add_lstm(store, "word.bwd", d, c, rng)
    _add_attention(store, "word.att", 2 * c, a, rng)
    _add_lstm(store, "sent.fwd", 2 * c, c, rng)
    _add_lstm(store, "sent.bwd", 2 * c, c, rng)
    _add_attention(store, "sent.att", 2 * c, a, rng)
    if dims.use_header:
        store.add("head.embed", table(), is_embedding=True)
        _add_lstm(store, "head.fwd", d, c, rng)
        _add_lstm(store, "head.bwd", d, c, rng)
        _add_attention(store, "head.att", 2 * c, a, rng)
        store.add("sub.W", _uniform(rng, (1, 4 * c)))
        store.add("sub.b", np.zeros(1))
    else:
        store.add("out.W", _uniform(rng, (1, 2 * c)))
        store.add("out.b", np.zeros(1))
    return store


def dims_of(params: ParamStore) -> ModelDims:
    vocab, d = params["embed"].shape
    c = params["word.fwd.Wh"].shape[1]
    a = params["word.att.W"].shape[0]
    return ModelDims(vocab, d, c, a, use_header="head.embed" in params)


# ---------------------------------------------------------------------------
# LSTM


def lstm_cell(x, h_prev, c_prev, Wx, Wh, b):
    """One LSTM step without peepholes; gates stacked as i, f, g, o."""
    c = Wh.shape[1]
    z = x @ Wx.T + h_prev @ Wh.T + b
    i = sigmoid(z[..., :c])
    f = sigmoid(z[..., c: 2 * c])
    g = np.tanh(z[..., 2 * c: 3 * c])
    o = sigmoid(z[..., 3 * c:])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


@dataclass
class LstmCache:
    x: np.ndarray          # (N, T, D)
    mask: np.ndarray       # (N, T)
    reverse: bool
    h_prev: np.ndarray     # (N, T, c) state entering step t
    c_prev: np.ndarray
    gates: np.ndarray      # (N, T, 4c) post-activation i, f, g, o
    tanh_c: np.ndarray


def lstm_forward(x, mask, Wx, Wh, b, reverse=False):
    """Run one direction over (N, T, D) inputs.

    Masked steps leave the state unchanged and emit zeros, so with a prefix
    mask the reverse direction starts fresh at the last real token.
    """
    N, T, _ = x.shape
    c = Wh.shape[1]
    xw = x @ Wx.T + b
    h = np.zeros((N, c))
    cs = np.zeros((N, c))
    out = np.zeros((N, T, c))
    h_prev = np.zeros((N, T, c))
    c_prev = np.zeros((N, T, c))
    gates = np.zeros((N, T, 4 * c))
    tanh_c = np.zeros((N, T, c))
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        z = xw[:, t] + h @ Wh.T
        i = sigmoid(z[:, :c])
        f = sigmoid(z[:, c: 2 * c])
        g = np.tanh(z[:, 2 * c: 3 * c])
        o = sigmoid(z[:, 3 * c:])
        c_new = f * cs + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        h_prev[:, t], c_prev[:, t] = h, cs
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        tanh_c[:, t] = tc
        m = mask[:, t, None]
        h = m * h_new + (1.0 - m) * h
        cs = m * c_new + (1.0 - m) * cs
        out[:, t] = m * h_new
    return out, LstmCache(x, mask, reverse, h_prev, c_prev, gates, tanh_c)


def lstm_backward(dout, cache: LstmCache, Wx, Wh):
    """Returns (dx, dWx, dWh, db)."""
    N, T, c = cache.h_prev.shape
    dz_all = np.zeros((N, T, 4 * c))
    dWh = np.zeros_like(Wh)
    dh = np.zeros((N, c))
    dc = np.zeros((N, c))
    steps = range(T) if cache.reverse else range(T - 1, -1, -1)
    for t in steps:
        m = cache.mask[:, t, None]
        i, f, g, o = np.split(cache.gates[:, t], 4, axis=1)
        tc = cache.tanh_c[:, t]
        dh_new = m * (dh + dout[:, t])
        dc_new = m * dc + dh_new * o * (1.0 - tc * tc)
        do = dh_new * tc
        di = dc_new * g
        dg = dc_new * i
        df = dc_new * cache.c_prev[:, t]
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1
        )
        dz_all[:, t] = dz
        dWh += dz.T @ cache.h_prev[:, t]
        dh = (1.0 - m) * dh + dz @ Wh
        dc = (1.0 - m) * dc + dc_new * f
    dx = dz_all @ Wx
    dWx = np.einsum("ntg,ntd->gd", dz_all, cache.x)
    db = dz_all.sum(axis=(0, 1))
    return dx, dWx, dWh, db


def _lstm_weights(params: ParamStore, prefix: str):
    return params[f"{prefix}.Wx"], params[f"{prefix}.Wh"], params[f"{prefix}.b"]


def bilstm(x, mask, params: ParamStore, prefix: str):
    """Concatenated forward/backward hiddens, (N, T, 2c), zero at masked steps."""
    out_f, cache_f = lstm_forward(x, mask, *_lstm_weights(params, f"{prefix}.fwd"))
    out_b, cache_b = lstm_forward(x, mask, *_lstm_weights(params, f"{prefix}.bwd"), reverse=True)
    return np.concatenate([out_f, out_b], axis=-1), (cache_f, cache_b)


def bilstm_backward(dout, caches, params: ParamStore, grads: Dict[str, np.ndarray], prefix: str):
    c = dout.shape[-1] // 2
    dx = 0.0
    for direction, cache, d in (("fwd", caches[0], dout[..., :c]), ("bwd", caches[1], dout[..., c:])):
        name = f"{prefix}.{direction}"
        dxi, dWx, dWh, db = lstm_backward(d, cache, params[f"{name}.Wx"], params[f"{name}.Wh"])
        grads[f"{name}.Wx"] += dWx
        grads[f"{name}.Wh"] += dWh
        grads[f"{name}.b"] += db
        dx = dx + dxi
    return dx


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionCache:
    hiddens: np.ndarray   # (N, T, D)
    proj: np.ndarray      # (N, T, a) tanh outputs
    weights: np.ndarray   # (N, T)


def attention_pool(hiddens, mask, W, b, w):
    """Weights = masked softmax of tanh(W h + b) . w; pooled = weighted sum of hiddens."""
    proj = np.tanh(hiddens @ W.T + b)
    weights = masked_softmax(proj @ w, mask)
    pooled = np.einsum("nt,ntd->nd", weights, hiddens)
    return weights, pooled, AttentionCache(hiddens, proj, weights)


def attention_backward(dpooled, dweights_extra, cache: AttentionCache, W, w):
    """Returns (dhiddens, dW, db, dw). ``dweights_extra`` adds a direct loss term on the weights."""
    H, A, alpha = cache.hiddens, cache.proj, cache.weights
    dalpha = np.einsum("nd,ntd->nt", dpooled, H)
    if dweights_extra is not None:
        dalpha = dalpha + dweights_extra
    dH = alpha[..., None] * dpooled[:, None, :]
    dscore = alpha * (dalpha - np.sum(alpha * dalpha, axis=-1, keepdims=True))
    dw = np.einsum("nt,nta->a", dscore, A)
    dproj = dscore[..., None] * w * (1.0 - A * A)
    dW = np.einsum("nta,ntd->ad", dproj, H)
    db = dproj.sum(axis=(0, 1))
    dH = dH + dproj @ W
    return dH, dW, db, dw


def _att_weights(params: ParamStore, prefix: str):
    return params[f"{prefix}.W"], params[f"{prefix}.b"], params[f"{prefix}.w"]


def _att_backward(dpooled, extra, cache, params, grads, prefix):
    W, _, w = _att_weights(params, prefix)
    dH, dW, db, dw = attention_backward(dpooled, extra, cache, W, w)
    grads[f"{prefix}.W"] += dW
    grads[f"{prefix}.b"] += db
    grads[f"{prefix}.w"] += dw
    return dH


# ---------------------------------------------------------------------------
# body and header networks


@dataclass
class BodyTrace:
    L: int
    K: int
    Lt: int                     # trimmed sentence count
    Kt: int                     # trimmed token count
    rows: np.ndarray            # flat (email, sentence) indices of real sentences
    ids: np.ndarray             # (N, Kt) token ids of real sentences
    word_mask: np.ndarray       # (N, Kt)
    sent_mask: np.ndarray       # (B, Lt)
    word_lstm: tuple
    word_att: AttentionCache
    u_hat: np.ndarray           # (B, Lt, 2c) before dropout
    u_drop: np.ndarray          # (B, Lt, 2c) dropout multipliers
    sent_hidden: np.ndarray     # (B, Lt, 2c)
    sent_lstm: tuple
    sent_att: AttentionCache
    alpha: np.ndarray           # (B, L, K) word attention, zero on padding
    beta: np.ndarray            # (B, L) sentence attention
    r_b: np.ndarray             # (B, 2c)


@dataclass
class HeaderTrace:
    H: int
    Ht: int
    ids: np.ndarray
    mask: np.ndarray
    lstm: tuple
    att: AttentionCache
    alpha: np.ndarray           # (B, H)
    r_s: np.ndarray


@dataclass
class ForwardTrace:
    body: BodyTrace
    header: Optional[HeaderTrace]
    r: np.ndarray               # (B, 2c or 4c) before dropout
    r_drop: np.ndarray
    logit: np.ndarray           # (B,)
    p: np.ndarray               # (B,)

    @property
    def alpha(self):
        return self.body.alpha

    @property
    def beta(self):
        return self.body.beta


def _trim(mask, axis_len):
    """Length of the populated prefix along the last axis (at least 1)."""
    if mask.size == 0:
        return 1
    used = np.nonzero(mask.reshape(-1, axis_len).any(axis=0))[0]
    return int(used[-1]) + 1 if used.size else 1


def body_forward(batch: Batch, params: ParamStore, dropout: float = 0.0, rng=None) -> BodyTrace:
    B, L, K = batch.body_ids.shape
    c2 = params["word.fwd.Wh"].shape[1] * 2
    Lt = _trim(batch.sentence_mask, L)
    Kt = _trim(batch.body_mask, K)
    ids = batch.body_ids[:, :Lt, :Kt].reshape(B * Lt, Kt)
    wmask = batch.body_mask[:, :Lt, :Kt].reshape(B * Lt, Kt)
    smask = batch.sentence_mask[:, :Lt]
    rows = np.nonzero(smask.reshape(-1) > 0)[0]
    ids, wmask = ids[rows], wmask[rows]

    x = params["embed"][ids]
    hw, word_lstm = bilstm(x, wmask, params, "word")
    alpha_rows, u_rows, word_att = attention_pool(hw, wmask, *_att_weights(params, "word.att"))

    u_hat = np.zeros((B * Lt, c2))
    u_hat[rows] = u_rows
    u_hat = u_hat.reshape(B, Lt, c2)
    u_drop = dropout_mask(u_hat.shape, dropout, rng) if dropout > 0 else np.ones_like(u_hat)
    hs, sent_lstm = bilstm(u_hat * u_drop, smask, params, "sent")
    beta_t, r_b, sent_att = attention_pool(hs, smask, *_att_weights(params, "sent.att"))

    alpha = np.zeros((B * Lt, Kt))
    alpha[rows] = alpha_rows
    alpha_full = np.zeros((B, L, K))
    alpha_full[:, :Lt, :Kt] = alpha.reshape(B, Lt, Kt)
    beta = np.zeros((B, L))
    beta[:, :Lt] = beta_t
    return BodyTrace(L, K, Lt, Kt, rows, ids, wmask, smask, word_lstm, word_att,
                     u_hat, u_drop, hs, sent_lstm, sent_att, alpha_full, beta, r_b)


def header_forward(batch: Batch, params: ParamStore) -> HeaderTrace:
    if batch.header_ids is None:
        raise ValueError("batch has no header encodings")
    B, H = batch.header_ids.shape
    Ht = _trim(batch.header_mask, H)
    ids = batch.header_ids[:, :Ht]
    mask = batch.header_mask[:, :Ht]
    x = params["head.embed"][ids]
    hh, lstm = bilstm(x, mask, params, "head")
    alpha_t, r_s, att = attention_pool(hh, mask, *_att_weights(params, "head.att"))
    alpha = np.zeros((B, H))
    alpha[:, :Ht] = alpha_t
    return HeaderTrace(H, Ht, ids, mask, lstm, att, alpha, r_s)


def forward(batch: Batch, params: ParamStore, dropout: float = 0.0, rng=None) -> ForwardTrace:
    """Phishing probabilities for a batch. ``dropout > 0`` means training mode."""
    body = body_forward(batch, params, dropout, rng)
    if "sub.W" in params:
        header = header_forward(batch, params)
        r = np.concatenate([body.r_b, header.r_s], axis=1)
        W, b = params["sub.W"], params["sub.b"]
    else:
        header = None
        r = body.r_b
        W, b = params["out.W"], params["out.b"]
    r_drop = dropout_mask(r.shape, dropout, rng) if dropout > 0 else np.ones_like(r)
    logit = (r * r_drop) @ W[0] + b[0]
    return ForwardTrace(body, header, r, r_drop, logit, sigmoid(logit))


def backward(trace: ForwardTrace, params: ParamStore, dlogit, dalpha=None,
             grads: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """Accumulate parameter gradients given dLoss/dlogit (B,) and optionally dLoss/dalpha (B, L, K).

    Gradients are added into ``grads`` (default: ``params.grads``).
    """
    if grads is None:
        grads = params.grads
    body = trace.body
    dlogit = np.asarray(dlogit, dtype=DTYPE).reshape(-1)
    if dlogit.shape[0] != trace.p.shape[0]:
        raise RuntimeError("upstream gradient does not match the traced batch")
    head = "sub" if trace.header is not None else "out"
    if f"{head}.W" not in params:
        raise RuntimeError("trace and parameters disagree on the header network")
    W = params[f"{head}.W"]
    grads[f"{head}.W"] += (dlogit @ (trace.r * trace.r_drop))[None, :]
    grads[f"{head}.b"] += dlogit.sum(keepdims=True)
    dr = dlogit[:, None] * W[0] * trace.r_drop
    c2 = body.r_b.shape[1]
    dr_b = dr[:, :c2]

    # sentence level
    dhs = _att_backward(dr_b, None, body.sent_att, params, grads, "sent.att")
    du = bilstm_backward(dhs, body.sent_lstm, params, grads, "sent") * body.u_drop
    B = du.shape[0]
    du_rows = du.reshape(B * body.Lt, c2)[body.rows]

    # word level
    extra = None
    if dalpha is not None:
        B_, L, K = dalpha.shape
        extra = dalpha[:, : body.Lt, : body.Kt].reshape(B_ * body.Lt, body.Kt)[body.rows]
    dhw = _att_backward(du_rows, extra, body.word_att, params, grads, "word.att")
    dx = bilstm_backward(dhw, body.word_lstm, params, grads, "word")
    _scatter_embedding(grads["embed"], body.ids, dx)

    if trace.header is not None:
        hd = trace.header
        dhh = _att_backward(dr[:, c2:], None, hd.att, params, grads, "head.att")
        dxh = bilstm_backward(dhh, hd.lstm, params, grads, "head")
        _scatter_embedding(grads["head.embed"], hd.ids, dxh)
    return grads


def _scatter_embedding(grad_table, ids, dx):
    d = dx.shape[-1]
    np.add.at(grad_table, ids.reshape(-1), dx.reshape(-1, d))
    grad_table[PAD] = 0.0


def predict_proba(encoded: EncodedEmail, params: ParamStore, use_header: bool = False) -> Tuple[float, ForwardTrace]:
    if use_header != ("sub.W" in params):
        raise ValueError(
            f"use_header={use_header} but the parameters are for a "
            f"{'header' if 'sub.W' in params else 'body-only'} model"
        )
    if use_header and not encoded.has_header:
        raise ValueError("use_header requested but the email has no header encoding")
    trace = forward(stack([encoded]), params)
    return float(trace.p[0]), trace


def predict_batch(encoded, params: ParamStore, batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode probabilities for a list of encodings."""
    out = []
    for start in range(0, len(encoded), batch_size):
        out.append(forward(stack(encoded[start: start + batch_size]), params).p)
    return np.concatenate(out) if out else np.zeros(0)

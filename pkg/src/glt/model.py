"""Chart model: per-span representations and denotations over all splits.

Every span (i, j) of the input gets a representation h_ij and, in grounded
mode, a per-object denotation d_ij in [0,1]^N. Spans are filled bottom-up
by length; a span of length l aggregates its l-1 binary splits through a
learned split distribution alpha, so the whole computation is a soft CKY
chart that stays differentiable end to end. Denotations are produced by a
mixture of four combination modules (skip, intersection, union, visual).

The chart is batched: all spans of one diagonal and all their splits are
composed in a single call, with shapes (spans S, splits K, batch B, ...).
Single-vector wrappers around the same code paths are exported for tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from . import grounding
from . import tensor as T
from .tensor import Tensor

MODULES = ("skip", "intersection", "union", "visual")


@dataclass
class ModelConfig:
    vocab_size: int
    n_answers: int
    h_dim: int = 64
    feat_dim: int = 32
    max_len: int = 16
    grounded: bool = False
    dropout: float = 0.1

    def validate(self) -> None:
        for name in ("vocab_size", "n_answers", "h_dim", "feat_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0,1), got {self.dropout}")


def _xavier(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float32) -> Dict[str, Tensor]:
    """Fresh parameter dict; insertion order is the serialization order."""
    cfg.validate()
    h = cfg.h_dim

    def mat(*shape):
        return Tensor(_xavier(rng, shape, dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    p: Dict[str, Tensor] = {}
    p["embed"] = Tensor((0.02 * rng.standard_normal((cfg.vocab_size, h))).astype(dtype),
                        requires_grad=True)
    for l in range(1, cfg.max_len + 1):
        p[f"ln_gain_{l}"] = Tensor(np.ones(h, dtype=dtype), requires_grad=True)
        p[f"ln_bias_{l}"] = zeros(h)
    p["a_l"] = mat(h)
    p["a_r"] = mat(h)
    p["w_l"] = mat(h, h)
    p["w_r"] = mat(h, h)
    p["ff_rep_w"] = mat(h, h)
    p["ff_rep_b"] = zeros(h)
    p["split_s"] = mat(h)
    if cfg.grounded:
        p["w_mod"] = mat(h, len(MODULES))
        p["w_sk"] = mat(h, 2)
        p["w_h"] = mat(h, h)
        p["ff_r_w"] = mat(h, h)
        p["ff_r_b"] = zeros(h)
        p["ff_vis_w"] = mat(h, h)
        p["ff_vis_b"] = zeros(h)
        p["s_l"] = mat(h)
        p["s_r"] = mat(h)
        p["w_feat"] = mat(cfg.feat_dim, h)
        p["w_pos"] = mat(4, h)
        p["attn_q"] = mat(h, h)
        p["attn_k"] = mat(h, h)
        p["attn_v"] = mat(h, h)
        p["coref_w"] = mat(h, 2)
        p["coref_b"] = zeros(2)
        # zero answer head: step-0 predictions are exactly uniform, so the
        # initial loss is ln(n_answers) and early updates stay small
        p["w_ans"] = zeros(2 * h, cfg.n_answers)
    else:
        p["w_ans"] = zeros(h, cfg.n_answers)
    return p


def layernorm_for_length(params: Dict[str, Tensor], length: int,
                         max_len: int) -> Tuple[Tensor, Tensor]:
    """Per-length layer-norm params; lengths beyond max_len reuse max_len's."""
    l = min(length, max_len)
    return params[f"ln_gain_{l}"], params[f"ln_bias_{l}"]


def _compose(params: Dict[str, Tensor], h_left: Tensor, h_right: Tensor,
             dropout_p: float, rng: Optional[np.random.Generator],
             training: bool) -> Tensor:
    """f_h on (S, K, B, h_dim) stacks of left/right child representations."""
    bl = T.contract("skbh,h->skb", h_left, params["a_l"])
    br = T.contract("skbh,h->skb", h_right, params["a_r"])
    beta = T.softmax(T.stack([bl, br], axis=-1), axis=-1)
    b1, b2 = T.take(beta, 0, -1), T.take(beta, 1, -1)
    h_hat = T.add(T.contract("skb,skbh->skbh", b1, T.linear(h_left, params["w_l"])),
                  T.contract("skb,skbh->skbh", b2, T.linear(h_right, params["w_r"])))
    ff = T.relu(T.linear(h_hat, params["ff_rep_w"], params["ff_rep_b"]))
    ff = T.dropout(ff, dropout_p, rng, training)
    return T.add(ff, h_hat)


def _module_skip(params, h_span: Tensor, dbar_l: Tensor, dbar_r: Tensor) -> Tensor:
    gates = T.softmax(T.linear(h_span, params["w_sk"]), axis=-1)
    c1, c2 = T.take(gates, 0, -1), T.take(gates, 1, -1)
    return T.add(T.contract("sb,sbn->sbn", c1, dbar_l),
                 T.contract("sb,sbn->sbn", c2, dbar_r))


def _module_visual(params, h_span: Tensor, dbar_l: Tensor, dbar_r: Tensor,
                   v_mat: Tensor) -> Tensor:
    s, b = h_span.shape[0], h_span.shape[1]
    n = v_mat.shape[1]
    vbar_r = T.contract("sbn,bnh->sbh", dbar_r, v_mat)
    base = T.linear(h_span, params["w_h"])
    q_r = T.relu(T.linear(T.add(base, vbar_r), params["ff_r_w"], params["ff_r_b"]))
    q_in = T.add(T.add(T.expand(base, 2, n), T.expand(v_mat, 0, s)),
                 T.add(T.contract("sbn,h->sbnh", dbar_l, params["s_l"]),
                       T.contract("sbn,h->sbnh", dbar_r, params["s_r"])))
    q_obj = T.relu(T.linear(q_in, params["ff_vis_w"], params["ff_vis_b"]))
    return T.sigmoid(T.contract("sbnh,sbh->sbn", q_obj, q_r))


def _mix_denotations(params, h_span: Tensor, dbar_l: Tensor, dbar_r: Tensor,
                     v_mat: Tensor) -> Tuple[Tensor, Tensor]:
    """f_d: module mixture; returns (d_span (S,B,N), module probs (S,B,4))."""
    d_skip = _module_skip(params, h_span, dbar_l, dbar_r)
    d_int = T.minimum(dbar_l, dbar_r)
    d_uni = T.maximum(dbar_l, dbar_r)
    d_vis = _module_visual(params, h_span, dbar_l, dbar_r, v_mat)
    mix = T.softmax(T.linear(h_span, params["w_mod"]), axis=-1)
    stacked = T.stack([d_skip, d_int, d_uni, d_vis], axis=0)
    d_span = T.contract("sbm,msbn->sbn", mix, stacked)
    return d_span, mix


@dataclass
class ChartResult:
    """Forward outputs for one batch: answer logits plus per-span tables.

    The per-span dicts hold numpy views keyed by (i, j); alpha rows have
    shape (splits, batch), h rows (batch, h_dim), d rows (batch, n_obj).
    """
    n: int
    batch: int
    answer_logits: Optional[Tensor]
    h_of: Dict[Tuple[int, int], np.ndarray]
    d_of: Dict[Tuple[int, int], np.ndarray]
    alpha_of: Dict[Tuple[int, int], np.ndarray]
    module_probs_of: Dict[Tuple[int, int], np.ndarray]
    compose_calls: int
    fd_calls: int
    first: Optional["ChartResult"] = None
    sep_index: Optional[int] = None
    token_offset: int = 0

    def answer_probs(self) -> np.ndarray:
        z = self.answer_logits.data
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def _build_chart(params, cfg: ModelConfig, ids: np.ndarray, v_mat: Optional[Tensor],
                 rng, training: bool,
                 leaf_denotations: Optional[Callable[[Tensor], Tensor]] = None):
    """One bottom-up chart pass. Returns (diag_h, diag_d, alphas, mixes, counts)."""
    n, _ = ids.shape
    emb = T.embedding(params["embed"], ids)
    emb = T.dropout(emb, cfg.dropout, rng, training)
    g1, b1 = layernorm_for_length(params, 1, cfg.max_len)
    h_leaf = T.layer_norm(emb, g1, b1)

    diag_h: Dict[int, Tensor] = {1: h_leaf}
    diag_d: Dict[int, Tensor] = {}
    alphas: Dict[int, Tensor] = {}
    mixes: Dict[int, Tensor] = {}
    compose_calls = 0
    fd_calls = 0

    if cfg.grounded:
        if leaf_denotations is not None:
            diag_d[1] = leaf_denotations(h_leaf)
        else:
            diag_d[1] = T.sigmoid(T.contract("sbh,bnh->sbn", h_leaf, v_mat))

    for l in range(2, n + 1):
        s_cnt = n - l + 1
        splits = range(1, l)
        h_l = T.stack([T.index_select(diag_h[k], np.arange(s_cnt)) for k in splits], axis=1)
        h_r = T.stack([T.index_select(diag_h[l - k], np.arange(k, k + s_cnt)) for k in splits],
                      axis=1)
        comp = _compose(params, h_l, h_r, cfg.dropout, rng, training)
        compose_calls += s_cnt * (l - 1)

        scores = T.contract("skbh,h->skb", comp, params["split_s"])
        alpha = T.softmax(scores, axis=1)
        h_exp = T.contract("skb,skbh->sbh", alpha, comp)
        gain, bias = layernorm_for_length(params, l, cfg.max_len)
        diag_h[l] = T.layer_norm(h_exp, gain, bias)
        alphas[l] = alpha

        if cfg.grounded:
            d_l = T.stack([T.index_select(diag_d[k], np.arange(s_cnt)) for k in splits], axis=1)
            d_r = T.stack([T.index_select(diag_d[l - k], np.arange(k, k + s_cnt)) for k in splits],
                          axis=1)
            dbar_l = T.contract("skb,skbn->sbn", alpha, d_l)
            dbar_r = T.contract("skb,skbn->sbn", alpha, d_r)
            d_span, mix = _mix_denotations(params, diag_h[l], dbar_l, dbar_r, v_mat)
            diag_d[l] = d_span
            mixes[l] = mix
            fd_calls += s_cnt

    return diag_h, diag_d, alphas, mixes, compose_calls, fd_calls


def _result_from_diags(n, batch, logits, diag_h, diag_d, alphas, mixes,
                       compose_calls, fd_calls, offset=0) -> ChartResult:
    h_of, d_of, alpha_of, mix_of = {}, {}, {}, {}
    for l, t in diag_h.items():
        for i in range(n - l + 1):
            h_of[(i + offset, i + l + offset)] = t.data[i]
    for l, t in diag_d.items():
        for i in range(n - l + 1):
            d_of[(i + offset, i + l + offset)] = t.data[i]
    for l, t in alphas.items():
        for i in range(n - l + 1):
            alpha_of[(i + offset, i + l + offset)] = t.data[i]
    for l, t in mixes.items():
        for i in range(n - l + 1):
            mix_of[(i + offset, i + l + offset)] = t.data[i]
    return ChartResult(n=n, batch=batch, answer_logits=logits, h_of=h_of, d_of=d_of,
                       alpha_of=alpha_of, module_probs_of=mix_of,
                       compose_calls=compose_calls, fd_calls=fd_calls, token_offset=offset)


def _answer_logits(params, cfg: ModelConfig, h_root: Tensor,
                   d_root: Optional[Tensor], v_mat: Optional[Tensor]) -> Tensor:
    if cfg.grounded:
        dv = T.contract("bn,bnh->bh", d_root, v_mat)
        return T.linear(T.concat([h_root, dv], axis=-1), params["w_ans"])
    return T.linear(h_root, params["w_ans"])


def _find_separator(ids: np.ndarray, sep_id: Optional[int]) -> Optional[int]:
    if sep_id is None:
        return None
    hits = np.nonzero(ids == sep_id)
    if hits[0].size == 0:
        return None
    cols = np.unique(hits[0])
    if cols.size != 1 or hits[0].size != ids.shape[1]:
        raise ValueError("sentence separator must appear exactly once, at the same "
                         "position in every sequence of the batch")
    return int(cols[0])


def forward(params: Dict[str, Tensor], cfg: ModelConfig, ids: np.ndarray,
            v_mat: Optional[Tensor] = None, rng: Optional[np.random.Generator] = None,
            training: bool = False, sep_id: Optional[int] = None) -> ChartResult:
    """Full chart + answer head for a batch of same-length token sequences.

    ids is (n, B) int; v_mat (B, N, h_dim) contextualized objects in
    grounded mode. A two-sentence input (separator token between them)
    charts the first sentence alone, then grounds the second sentence's
    leaves through the coreference gate against the first root denotation.
    """
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[:, None]
    if ids.ndim != 2 or ids.shape[0] == 0:
        raise T.DimensionError(f"token ids must be (n, batch) with n >= 1, got {ids.shape}")
    if cfg.grounded and v_mat is None:
        raise ValueError("grounded mode requires a contextualized object matrix")
    if not cfg.grounded and v_mat is not None:
        raise ValueError("text-only mode takes no object matrix")
    if (ids < 0).any() or (ids >= cfg.vocab_size).any():
        raise IndexError("token id out of vocabulary range")
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    n, batch = ids.shape

    sep = _find_separator(ids, sep_id)
    if sep is not None:
        if not cfg.grounded:
            raise ValueError("two-sentence inputs are only defined in grounded mode")
        if sep == 0 or sep == n - 1:
            raise ValueError("sentence separator at the boundary leaves an empty sentence")
        dh1, dd1, al1, mx1, cc1, fd1 = _build_chart(params, cfg, ids[:sep], v_mat,
                                                    rng, training)
        d_first = T.take(dd1[sep], 0, 0)
        first = _result_from_diags(sep, batch, None, dh1, dd1, al1, mx1, cc1, fd1)

        def gated_leaves(h_leaf: Tensor) -> Tensor:
            return grounding.coref_mix(params, h_leaf, v_mat, d_first)

        ids2 = ids[sep + 1:]
        dh, dd, al, mx, cc, fd = _build_chart(params, cfg, ids2, v_mat, rng, training,
                                              leaf_denotations=gated_leaves)
        n2 = ids2.shape[0]
        h_root = T.take(dh[n2], 0, 0)
        d_root = T.take(dd[n2], 0, 0)
        logits = _answer_logits(params, cfg, h_root, d_root, v_mat)
        result = _result_from_diags(n2, batch, logits, dh, dd, al, mx, cc, fd,
                                    offset=sep + 1)
        result.first = first
        result.sep_index = sep
        return result

    dh, dd, al, mx, cc, fd = _build_chart(params, cfg, ids, v_mat, rng, training)
    h_root = T.take(dh[n], 0, 0)
    d_root = T.take(dd[n], 0, 0) if cfg.grounded else None
    logits = _answer_logits(params, cfg, h_root, d_root, v_mat)
    return _result_from_diags(n, batch, logits, dh, dd, al, mx, cc, fd)


# Single-vector wrappers over the batched code paths, for direct testing.

def compose_rep(params: Dict[str, Tensor], h_left, h_right) -> Tensor:
    """f_h on two (h_dim,) vectors; returns the pre-norm composed vector."""
    hl = T.reshape(T.as_tensor(h_left), (1, 1, 1, -1))
    hr = T.reshape(T.as_tensor(h_right), (1, 1, 1, -1))
    out = _compose(params, hl, hr, 0.0, None, False)
    return T.reshape(out, (-1,))


def module_skip(params, dbar_l, dbar_r, h_span) -> Tensor:
    dl = T.reshape(T.as_tensor(dbar_l), (1, 1, -1))
    dr = T.reshape(T.as_tensor(dbar_r), (1, 1, -1))
    h = T.reshape(T.as_tensor(h_span), (1, 1, -1))
    return T.reshape(_module_skip(params, h, dl, dr), (-1,))


def module_intersection(dbar_l, dbar_r) -> Tensor:
    return T.minimum(T.as_tensor(dbar_l), T.as_tensor(dbar_r))


def module_union(dbar_l, dbar_r) -> Tensor:
    return T.maximum(T.as_tensor(dbar_l), T.as_tensor(dbar_r))


def module_visual(params, dbar_l, dbar_r, h_span, v_mat) -> Tensor:
    dl = T.reshape(T.as_tensor(dbar_l), (1, 1, -1))
    dr = T.reshape(T.as_tensor(dbar_r), (1, 1, -1))
    h = T.reshape(T.as_tensor(h_span), (1, 1, -1))
    v = T.as_tensor(v_mat)
    v3 = T.reshape(v, (1,) + tuple(v.shape))
    return T.reshape(_module_visual(params, h, dl, dr, v3), (-1,))


def compose_den(params, dbar_l, dbar_r, h_span, v_mat) -> Tensor:
    """f_d on single vectors: module mixture for one span."""
    dl = T.reshape(T.as_tensor(dbar_l), (1, 1, -1))
    dr = T.reshape(T.as_tensor(dbar_r), (1, 1, -1))
    h = T.reshape(T.as_tensor(h_span), (1, 1, -1))
    v = T.as_tensor(v_mat)
    v3 = T.reshape(v, (1,) + tuple(v.shape))
    d, _ = _mix_denotations(params, h, dl, dr, v3)
    return T.reshape(d, (-1,))

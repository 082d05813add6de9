"""Toy shared encoder with four decoder heads and hand-written backprop.

Shapes use the row-vector convention ``y = x @ W + b`` with ``W`` stored
as ``(in, out)``. With K real tokens the heads output:

* CTC and joint network: K+1 columns, column ``i`` is vocabulary id ``i``
  (column 0 is blank);
* attention decoder: K+1 columns, column ``i`` is id ``i+1`` (last column is eos);
* MLM decoder: K columns, column ``i`` is id ``i+1``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import losses as L
from .core import EncodedSeq, FeatureSeq, Vocabulary, log_softmax

HEADS = ("ctc", "rnnt", "att", "mlm")
# fixed sharpness of the MLM positional attention prior
MLM_POS_SHARPNESS = 25.0
# location-aware attention: frame offsets of the convolution over the previous
# step's attention weights, and a fixed gain on that term
LOC_OFFSETS = (-1, 0, 1, 2, 3, 4)
LOC_GAIN = 4.0


@dataclass(frozen=True)
class ModelConfig:
    n_tokens: int = 16
    feat_dim: int = 8
    enc_dim: int = 32
    enc_layers: int = 2
    emb_dim: int = 16
    att_dim: int = 32
    pred_dim: int = 32
    joint_dim: int = 32
    mlm_dim: int = 32
    subsample: int = 2
    context: int = 1

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.of_size(self.n_tokens)


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    K, F, D = cfg.n_tokens, cfg.feat_dim, cfg.enc_dim
    V = K + 4
    E, A, P, J, M = cfg.emb_dim, cfg.att_dim, cfg.pred_dim, cfg.joint_dim, cfg.mlm_dim
    shapes: dict[str, tuple[int, ...]] = {}
    d_in = (2 * cfg.context + 1) * cfg.subsample * F
    for i in range(cfg.enc_layers):
        shapes[f"enc.W{i}"] = (d_in, D)
        shapes[f"enc.b{i}"] = (D,)
        d_in = D
    shapes.update({
        "ctc.W": (D, K + 1), "ctc.b": (K + 1,),
        "att.emb": (V, E), "att.Wr": (E, A), "att.Ur": (A, A), "att.Wc": (D, A), "att.br": (A,),
        "att.Wq": (A, D), "att.wloc": (len(LOC_OFFSETS),), "att.Wo": (A + D + 1, K + 1), "att.bo": (K + 1,),
        "pred.emb": (V, E), "pred.W": (E, P), "pred.U": (P, P), "pred.b": (P,),
        "joint.Wh": (D, J), "joint.Wg": (P, J), "joint.b": (J,),
        "joint.Wo": (J, K + 1), "joint.bo": (K + 1,),
        "mlm.emb": (V, E), "mlm.Wc": (3 * E, M), "mlm.bc": (M,), "mlm.Wq": (M, D),
        "mlm.Wo": (M + D, K), "mlm.bo": (K,),
    })
    return shapes


# blocks used by exactly one head; the encoder is shared
EXCLUSIVE = {
    "ctc": ("ctc.",),
    "rnnt": ("pred.", "joint."),
    "att": ("att.",),
    "mlm": ("mlm.",),
}


class ModelParams:
    """Named float64 parameter blocks plus the config and seed that made them."""

    def __init__(self, cfg: ModelConfig, blocks: Mapping[str, np.ndarray], seed: int = 0):
        shapes = _block_shapes(cfg)
        if set(blocks) != set(shapes):
            raise ValueError("parameter blocks do not match the model config")
        self.cfg = cfg
        self.seed = seed
        self.blocks: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            arr = np.array(blocks[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} is not finite")
            self.blocks[name] = arr
        self.version = 0

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        """Uniform init in +-1/sqrt(fan_in); biases start at zero."""
        rng = np.random.default_rng(seed)
        blocks = {}
        for name, shape in _block_shapes(cfg).items():
            if len(shape) == 1:
                blocks[name] = np.zeros(shape)
            elif name.endswith(".emb"):
                blocks[name] = rng.uniform(-1.0, 1.0, size=shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                blocks[name] = rng.uniform(-bound, bound, size=shape)
        return cls(cfg, blocks, seed)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ModelParams":
        return cls(cfg, {n: np.zeros(s) for n, s in _block_shapes(cfg).items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def manifest(self) -> list[dict]:
        return [{"name": n, "shape": list(a.shape)} for n, a in self.blocks.items()]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.blocks.values())

    def copy(self) -> "ModelParams":
        p = ModelParams(self.cfg, self.blocks, self.seed)
        return p

    def bump(self):
        self.version += 1

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.blocks.values()])


# ---------------------------------------------------------------- encoder


def _stack_frames(X: np.ndarray, factor: int) -> np.ndarray:
    N, F = X.shape
    T = -(-N // factor)
    padded = np.zeros((T * factor, F))
    padded[:N] = X
    return padded.reshape(T, factor * F)


def _splice(Z: np.ndarray, context: int) -> np.ndarray:
    """Concatenate each row with its ``context`` neighbours on both sides (zero padded)."""
    T, F = Z.shape
    padded = np.zeros((T + 2 * context, F))
    padded[context:context + T] = Z
    return np.concatenate([padded[j:j + T] for j in range(2 * context + 1)], axis=1)


def encode(params: ModelParams, X: FeatureSeq | np.ndarray) -> EncodedSeq:
    """Stack ``subsample`` consecutive frames, splice neighbours, then apply the tanh layers."""
    H, _ = _encode(params, X)
    return EncodedSeq(H)


def _encode(params: ModelParams, X):
    X = X.frames if isinstance(X, FeatureSeq) else np.asarray(X, dtype=np.float64)
    cfg = params.cfg
    if X.ndim != 2 or X.shape[1] != cfg.feat_dim:
        raise ValueError(f"expected feature dim {cfg.feat_dim}, got shape {X.shape}")
    Z = _splice(_stack_frames(X, cfg.subsample), cfg.context)
    acts = [Z]
    for i in range(cfg.enc_layers):
        Z = np.tanh(Z @ params[f"enc.W{i}"] + params[f"enc.b{i}"])
        acts.append(Z)
    return Z, acts


def _encode_backward(params, acts, dH, grads):
    dZ = dH
    for i in range(params.cfg.enc_layers - 1, -1, -1):
        dA = dZ * (1.0 - acts[i + 1] ** 2)
        grads[f"enc.W{i}"] += acts[i].T @ dA
        grads[f"enc.b{i}"] += dA.sum(axis=0)
        dZ = dA @ params[f"enc.W{i}"].T


# ---------------------------------------------------------------- heads: forward pieces


def ctc_logits(params: ModelParams, H: np.ndarray) -> np.ndarray:
    return H @ params["ctc.W"] + params["ctc.b"]


def ctc_log_posteriors(params: ModelParams, H: np.ndarray) -> np.ndarray:
    return log_softmax(ctc_logits(params, H))


def pred_step(params: ModelParams, g_prev: np.ndarray | None, token: int) -> np.ndarray:
    """One prediction-network step; ``g_prev=None`` starts a fresh history."""
    pre = params["pred.emb"][token] @ params["pred.W"] + params["pred.b"]
    if g_prev is not None:
        pre = pre + g_prev @ params["pred.U"]
    return np.tanh(pre)


def pred_states(params: ModelParams, y: Sequence[int], sos: int) -> np.ndarray:
    g = None
    out = []
    for tok in (sos, *y):
        g = pred_step(params, g, tok)
        out.append(g)
    return np.array(out)


def joint_proj_enc(params: ModelParams, H: np.ndarray) -> np.ndarray:
    return H @ params["joint.Wh"]


def joint_logits(params: ModelParams, Hproj: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Joint network over encoder projections ``(T, J)`` and prediction states ``(..., P)``.

    A single prediction state gives ``(T, K+1)``, a stack ``(S+1, P)`` gives
    the full ``(T, S+1, K+1)`` lattice.
    """
    gp = G @ params["joint.Wg"] + params["joint.b"]
    if G.ndim == 1:
        a = np.tanh(Hproj + gp)
    else:
        a = np.tanh(Hproj[:, None, :] + gp[None, :, :])
    return a @ params["joint.Wo"] + params["joint.bo"]


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    """``out[t] = v[t - k]``, zero where out of range."""
    out = np.zeros_like(v)
    T = v.shape[0]
    if k >= 0:
        if k < T:
            out[k:] = v[:T - k]
    elif -k < T:
        out[:k] = v[-k:]
    return out


def _loc_bias(w: np.ndarray, a_prev: np.ndarray) -> np.ndarray:
    return LOC_GAIN * sum(wk * _shift(a_prev, k) for wk, k in zip(w, LOC_OFFSETS))


def _frames_to_end(T: int) -> np.ndarray:
    """Number of encoder frames after each frame: T-1 at the first, 0 at the last."""
    return np.arange(T - 1, -1, -1, dtype=np.float64)


def _initial_alignment(T: int) -> np.ndarray:
    a = np.zeros(T)
    a[0] = 1.0
    return a


def att_step(params: ModelParams, H: np.ndarray, state: tuple | None,
             token: int) -> tuple[tuple, np.ndarray]:
    """Consume ``token`` and return the new decoder state and the log-distribution of the next token.

    The state is ``(r, a, c)``: recurrent vector, attention weights and
    context vector of the step; ``None`` starts a fresh decoder.
    """
    pre = params["att.emb"][token] @ params["att.Wr"] + params["att.br"]
    if state is None:
        a_prev = _initial_alignment(H.shape[0])
    else:
        r_prev, a_prev, c_prev = state
        pre = pre + r_prev @ params["att.Ur"] + c_prev @ params["att.Wc"]
    r = np.tanh(pre)
    q = r @ params["att.Wq"]
    s = H @ q / math.sqrt(H.shape[1]) + _loc_bias(params["att.wloc"], a_prev)
    a = np.exp(s - s.max())
    a /= a.sum()
    c = a @ H
    # frames left after the attention focus: the frame-local encoder cannot
    # tell the decoder where the input ends, which it needs to emit eos
    focus = a @ _frames_to_end(H.shape[0])
    logits = np.concatenate([r, c, [focus]]) @ params["att.Wo"] + params["att.bo"]
    return (r, a, c), log_softmax(logits)


def _mlm_pos_bias(S: int, T: int) -> np.ndarray:
    tpos = (np.arange(T) + 0.5) / T
    spos = (np.arange(S) + 0.5) / S
    return -MLM_POS_SHARPNESS * (tpos[None, :] - spos[:, None]) ** 2


def _mlm_forward(params: ModelParams, H: np.ndarray, tokens: Sequence[int]):
    E = params["mlm.emb"]
    S = len(tokens)
    emb = E[list(tokens)]
    pad = np.zeros((S + 2, E.shape[1]))
    pad[1:-1] = emb
    ctx = np.concatenate([pad[:-2], pad[1:-1], pad[2:]], axis=1)  # (S, 3E)
    u = np.tanh(ctx @ params["mlm.Wc"] + params["mlm.bc"])
    q = u @ params["mlm.Wq"]
    scale = 1.0 / math.sqrt(H.shape[1])
    sc = q @ H.T * scale + _mlm_pos_bias(S, H.shape[0])
    a = np.exp(sc - sc.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    c = a @ H
    feats = np.concatenate([u, c], axis=1)
    logits = feats @ params["mlm.Wo"] + params["mlm.bo"]
    return logits, (ctx, u, q, a, c, feats, scale)


def mlm_log_posteriors(params: ModelParams, H: np.ndarray, tokens: Sequence[int]) -> np.ndarray:
    """Per-position log-distributions over real tokens for a (partially masked) sequence."""
    logits, _ = _mlm_forward(params, H, tokens)
    return log_softmax(logits)


def _rnnt_lattice(params: ModelParams, H: np.ndarray, y: Sequence[int]):
    sos = params.cfg.vocab.sos_id
    G_in = (sos, *y)
    G = pred_states(params, y, sos)
    Hp = joint_proj_enc(params, H)
    gp = G @ params["joint.Wg"] + params["joint.b"]
    a = np.tanh(Hp[:, None, :] + gp[None, :, :])
    logits = a @ params["joint.Wo"] + params["joint.bo"]
    return G_in, G, a, logits


def rnnt_lattice_logits(params: ModelParams, H: np.ndarray, y: Sequence[int]) -> np.ndarray:
    """Full ``(T, S+1, K+1)`` joint-network lattice for target ``y``."""
    return _rnnt_lattice(params, H, y)[3]


def _att_teacher_forced(params: ModelParams, H: np.ndarray, ins: Sequence[int]):
    # every step feeds its recurrent state, alignment and context to the next
    E = params["att.emb"][list(ins)]
    scale = 1.0 / math.sqrt(H.shape[1])
    S = len(ins)
    R = np.zeros((S, params.cfg.att_dim))
    Q = np.zeros((S, H.shape[1]))
    Aw = np.zeros((S, H.shape[0]))
    Aprev = np.zeros((S, H.shape[0]))
    C = np.zeros((S, H.shape[1]))
    r = np.zeros(params.cfg.att_dim)
    c = np.zeros(H.shape[1])
    a = _initial_alignment(H.shape[0])
    for s in range(S):
        r = np.tanh(E[s] @ params["att.Wr"] + r @ params["att.Ur"] + c @ params["att.Wc"] + params["att.br"])
        q = r @ params["att.Wq"]
        Aprev[s] = a
        sc = H @ q * scale + _loc_bias(params["att.wloc"], a)
        a = np.exp(sc - sc.max())
        a /= a.sum()
        c = a @ H
        R[s], Q[s], Aw[s], C[s] = r, q, a, c
    focus = Aw @ _frames_to_end(H.shape[0])
    feats = np.concatenate([R, C, focus[:, None]], axis=1)
    logits = feats @ params["att.Wo"] + params["att.bo"]
    return logits, (E, R, Q, Aw, Aprev, C, feats, scale)


def att_sequence_logits(params: ModelParams, H: np.ndarray, y: Sequence[int]) -> np.ndarray:
    """Teacher-forced attention logits for ``sos + y``: one row per label plus the eos step."""
    return _att_teacher_forced(params, H, (params.cfg.vocab.sos_id, *y))[0]


# ---------------------------------------------------------------- training pass


@dataclass
class ForwardCache:
    version: int
    params_id: int
    X: np.ndarray
    y: tuple[int, ...]
    heads: tuple[str, ...]
    H: np.ndarray
    enc_acts: list
    ctc_feasible: bool = True
    store: dict = field(default_factory=dict)
    used: bool = False


def forward_all(params: ModelParams, X, y: Sequence[int], masks: L.MaskedBatch | None = None,
                heads: Iterable[str] = HEADS):
    """All requested head losses from one shared encoder pass.

    Returns ``(losses, cache)``, where ``losses`` maps head name to NLL
    (heads not requested are absent). The CTC loss is ``+inf`` and
    ``cache.ctc_feasible`` is False when ``y`` does not fit in T frames.
    """
    heads = tuple(h for h in HEADS if h in set(heads))
    cfg = params.cfg
    vocab = cfg.vocab
    y = tuple(int(v) for v in y)
    if any(not 1 <= v <= cfg.n_tokens for v in y):
        raise ValueError("targets must be real token ids")
    H, acts = _encode(params, X)
    cache = ForwardCache(params.version, id(params), np.asarray(X.frames if isinstance(X, FeatureSeq) else X),
                         y, heads, H, acts)
    out: dict[str, float] = {}

    if "ctc" in heads:
        logits = ctc_logits(params, H)
        res = L.ctc_forward(logits, y, blank=vocab.blank_id)
        cache.ctc_feasible = res.feasible
        cache.store["ctc"] = logits
        out["ctc"] = res.nll

    if "rnnt" in heads:
        G_in, G, a, logits = _rnnt_lattice(params, H, y)
        cache.store["rnnt"] = (G_in, G, a, logits)
        out["rnnt"] = L.rnnt_loss(logits, y, blank=vocab.blank_id)

    if "att" in heads:
        ins = (vocab.sos_id, *y)
        logits, aux = _att_teacher_forced(params, H, ins)
        cols = [v - 1 for v in y]
        cache.store["att"] = (ins, *aux, logits, cols)
        out["att"] = L.att_loss(logits, cols)

    if "mlm" in heads:
        if masks is None:
            raise ValueError("mlm head needs a mask sample")
        if masks.full_seq != y:
            raise ValueError("mask sample does not belong to this target")
        if y:
            inp = masks.masked_input(vocab.mask_id)
            logits, aux = _mlm_forward(params, H, inp)
            rows = np.array(masks.mask_positions)
            cache.store["mlm"] = (masks, inp, logits, aux, rows)
            out["mlm"] = L.mlm_loss(logits[rows], masks, id_offset=1)
        else:
            cache.store["mlm"] = None
            out["mlm"] = 0.0
    return out, cache


def _zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(a) for n, a in params.blocks.items()}


def backward_all(params: ModelParams, cache: ForwardCache, weights: L.TrainWeights) -> dict[str, np.ndarray]:
    """Gradient of the weighted multitask loss with respect to every parameter block."""
    if cache.version != params.version or cache.params_id != id(params):
        raise ValueError("stale forward cache: parameters changed since forward_all")
    vocab = params.cfg.vocab
    w = dict(zip(HEADS, weights.as_tuple()))
    grads = _zero_grads(params)
    H = cache.H
    dH = np.zeros_like(H)
    y = cache.y

    if w["ctc"] and "ctc" in cache.heads:
        if not cache.ctc_feasible:
            raise ValueError("cannot differentiate an infeasible CTC target")
        g = w["ctc"] * L.ctc_grad(cache.store["ctc"], y, blank=vocab.blank_id)
        grads["ctc.W"] += H.T @ g
        grads["ctc.b"] += g.sum(axis=0)
        dH += g @ params["ctc.W"].T

    if w["rnnt"] and "rnnt" in cache.heads:
        G_in, G, a, logits = cache.store["rnnt"]
        g = w["rnnt"] * L.rnnt_grad(logits, y, blank=vocab.blank_id)  # (T, S+1, K+1)
        grads["joint.Wo"] += np.einsum("tsj,tsk->jk", a, g)
        grads["joint.bo"] += g.sum(axis=(0, 1))
        dpre = (g @ params["joint.Wo"].T) * (1.0 - a ** 2)
        grads["joint.b"] += dpre.sum(axis=(0, 1))
        dHp = dpre.sum(axis=1)
        grads["joint.Wh"] += H.T @ dHp
        dH += dHp @ params["joint.Wh"].T
        dgp = dpre.sum(axis=0)  # (S+1, J)
        grads["joint.Wg"] += G.T @ dgp
        dG = dgp @ params["joint.Wg"].T
        _rnn_backward(params, "pred", G_in, G, dG, grads, params["pred.emb"], ("pred.W", "pred.U", "pred.b"))

    if w["att"] and "att" in cache.heads:
        ins, E, R, Q, Aw, Aprev, C, feats, scale, logits, cols = cache.store["att"]
        g = w["att"] * L.att_grad(logits, cols)
        grads["att.Wo"] += feats.T @ g
        grads["att.bo"] += g.sum(axis=0)
        dfeats = g @ params["att.Wo"].T
        A = R.shape[1]
        dR = dfeats[:, :A]
        dC = dfeats[:, A:-1]
        dfocus = dfeats[:, -1]
        tau = _frames_to_end(H.shape[0])
        Wr, Ur, Wc, Wq = params["att.Wr"], params["att.Ur"], params["att.Wc"], params["att.Wq"]
        wloc = params["att.wloc"]
        da_carry = np.zeros(H.shape[0])
        dpre_next = np.zeros(A)
        for s in range(len(ins) - 1, -1, -1):
            dc = dC[s] + dpre_next @ Wc.T
            da = dc @ H.T + da_carry + dfocus[s] * tau
            dH += np.outer(Aw[s], dc)
            dsc = Aw[s] * (da - da @ Aw[s])
            dloc = LOC_GAIN * dsc
            for j, k in enumerate(LOC_OFFSETS):
                grads["att.wloc"][j] += dloc @ _shift(Aprev[s], k)
            # the first step's previous alignment is a constant
            da_carry = sum(wk * _shift(dloc, -k) for wk, k in zip(wloc, LOC_OFFSETS))
            dq = dsc @ H * scale
            dH += np.outer(dsc, Q[s]) * scale
            grads["att.Wq"] += np.outer(R[s], dq)
            dr = dR[s] + dq @ Wq.T + dpre_next @ Ur.T
            dpre = dr * (1.0 - R[s] ** 2)
            grads["att.Wr"] += np.outer(E[s], dpre)
            grads["att.br"] += dpre
            grads["att.emb"][ins[s]] += dpre @ Wr.T
            if s > 0:
                grads["att.Ur"] += np.outer(R[s - 1], dpre)
                grads["att.Wc"] += np.outer(C[s - 1], dpre)
            dpre_next = dpre

    if w["mlm"] and "mlm" in cache.heads and cache.store["mlm"] is not None:
        masks, inp, logits, aux, rows = cache.store["mlm"]
        ctx, u, q, a, c, feats, scale = aux
        dlog = np.zeros_like(logits)
        dlog[rows] = w["mlm"] * L.mlm_grad(logits[rows], masks, id_offset=1)
        grads["mlm.Wo"] += feats.T @ dlog
        grads["mlm.bo"] += dlog.sum(axis=0)
        dfeats = dlog @ params["mlm.Wo"].T
        M = u.shape[1]
        du = dfeats[:, :M].copy()
        dc = dfeats[:, M:]
        da = dc @ H.T
        dH += a.T @ dc
        dsc = a * (da - (da * a).sum(axis=1, keepdims=True))
        dq = dsc @ H * scale
        dH += dsc.T @ q * scale
        grads["mlm.Wq"] += u.T @ dq
        du += dq @ params["mlm.Wq"].T
        dpre = du * (1.0 - u ** 2)
        grads["mlm.Wc"] += ctx.T @ dpre
        grads["mlm.bc"] += dpre.sum(axis=0)
        dctx = dpre @ params["mlm.Wc"].T
        Ed = params["mlm.emb"].shape[1]
        S = len(inp)
        demb = np.zeros((S + 2, Ed))
        demb[:-2] += dctx[:, :Ed]
        demb[1:-1] += dctx[:, Ed:2 * Ed]
        demb[2:] += dctx[:, 2 * Ed:]
        np.add.at(grads["mlm.emb"], list(inp), demb[1:-1])

    _encode_backward(params, cache.enc_acts, dH, grads)
    return grads


def _rnn_backward(params, prefix, ins, R, dR, grads, emb, names):
    """BPTT for ``r_s = tanh(emb[in_s] W + r_{s-1} U + b)`` with ``r_{-1} = 0``."""
    Wn, Un, bn = names
    W, U = params[Wn], params[Un]
    carry = np.zeros(R.shape[1])
    for s in range(len(ins) - 1, -1, -1):
        dpre = (dR[s] + carry) * (1.0 - R[s] ** 2)
        grads[Wn] += np.outer(emb[ins[s]], dpre)
        grads[bn] += dpre
        grads[f"{prefix}.emb"][ins[s]] += dpre @ W.T
        if s > 0:
            grads[Un] += np.outer(R[s - 1], dpre)
        carry = dpre @ U.T


def loss_and_grads(params: ModelParams, X, y, masks, weights: L.TrainWeights):
    heads = [h for h, w in zip(HEADS, weights.as_tuple()) if w > 0]
    losses, cache = forward_all(params, X, y, masks, heads)
    return losses, backward_all(params, cache, weights)


def combined_loss(params: ModelParams, X, y, masks, weights: L.TrainWeights) -> float:
    heads = [h for h, w in zip(HEADS, weights.as_tuple()) if w > 0]
    losses, _ = forward_all(params, X, y, masks, heads)
    return L.multitask_loss(weights, *(losses.get(h, 0.0) for h in HEADS))


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_block: dict[str, float]
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= 1e-4


def grad_check(params: ModelParams, batch: Sequence[tuple], weights: L.TrainWeights,
               epsilon: float = 1e-5, grads: Mapping[str, np.ndarray] | None = None,
               max_per_block: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences, block by block.

    ``batch`` holds ``(X, y, masks)`` triples; the loss is their sum. Passing
    ``grads`` checks those instead of freshly computed ones. The relative
    error of a block is ``max|a - n| / max(max|a|, max|n|, 1e-8)``.
    """
    def total(p):
        return sum(combined_loss(p, X, y, m, weights) for X, y, m in batch)

    if grads is None:
        grads = _zero_grads(params)
        for X, y, m in batch:
            _, g = loss_and_grads(params, X, y, m, weights)
            for k in grads:
                grads[k] += g[k]
    rng = np.random.default_rng(seed)
    per_block = {}
    n = 0
    work = params.copy()
    for name, arr in work.blocks.items():
        idx = np.arange(arr.size)
        if max_per_block is not None and arr.size > max_per_block:
            idx = rng.choice(arr.size, size=max_per_block, replace=False)
        num = np.zeros(idx.size)
        flat = arr.reshape(-1)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + epsilon
            fp = total(work)
            flat[i] = old - epsilon
            fm = total(work)
            flat[i] = old
            num[j] = (fp - fm) / (2 * epsilon)
        ana = np.asarray(grads[name]).reshape(-1)[idx]
        denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-8)
        per_block[name] = float(np.abs(ana - num).max(initial=0.0) / denom)
        n += idx.size
    return GradCheckReport(max(per_block.values()), per_block, n)

"""Self-checks against brute force: loss enumeration, finite differences and
exhaustive search. Each suite returns a :class:`SuiteResult`; ``run_all``
backs the ``check`` command."""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import models, search
from .core import BeamConfig, DecoderWeights, log_softmax
from .models import ModelConfig, ModelParams

# basis vectors plus both joint operating points, as (ctc, att, rnnt)
ORACLE_MUS = (
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0),
    (0.2, 0.6, 0.2), (0.1, 0.5, 0.4),
    # the same two points read in (ctc, att, rnnt) order
    (0.2, 0.2, 0.6), (0.1, 0.4, 0.5),
)
EXHAUSTIVE = 10 ** 6
TOY_SEARCH_MODEL = ModelConfig(n_tokens=2, feat_dim=3, enc_dim=4, enc_layers=1, emb_dim=3,
                               att_dim=4, pred_dim=4, joint_dim=4, mlm_dim=3)
# under 500 parameters
TOY_GRAD_MODEL = ModelConfig(n_tokens=3, feat_dim=2, enc_dim=5, enc_layers=1, emb_dim=3,
                             att_dim=4, pred_dim=4, joint_dim=4, mlm_dim=3)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    n_cases: int
    metric: float
    tolerance: float
    seconds: float
    failures: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.n_cases} cases, worst {self.metric:.3g} "
                f"(tol {self.tolerance:g}), {self.seconds:.1f}s")


# ---------------------------------------------------------------- enumeration


def _collapse(path, blank):
    out = []
    prev = None
    for z in path:
        if z != blank and z != prev:
            out.append(z)
        prev = z
    return tuple(out)


def ctc_prob_enumerated(logits: np.ndarray, y, blank: int = 0) -> float:
    """Sum over every length-T path that collapses to ``y``."""
    p = np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))
    T = p.shape[0]
    y = tuple(y)
    symbols = sorted({blank, *y})
    total = 0.0
    for path in itertools.product(symbols, repeat=T):
        if _collapse(path, blank) == y:
            total += math.prod(p[t, z] for t, z in enumerate(path))
    return total


def rnnt_prob_enumerated(logits: np.ndarray, y, blank: int = 0) -> float:
    """Sum over every lattice path: T blanks and the S labels, ending with blank."""
    p = np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))
    T, S1, _ = p.shape
    S = S1 - 1
    y = tuple(y)
    total = 0.0
    for label_slots in itertools.combinations(range(T + S - 1), S):
        t = s = 0
        prob = 1.0
        for i in range(T + S):
            if i in label_slots:
                prob *= p[t, s, y[s]]
                s += 1
            else:
                prob *= p[t, s, blank]
                t += 1
        total += prob
    return total


def loss_suite(n: int = 200, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    fails = []
    for i in range(n):
        V = int(rng.integers(1, 4))
        T = int(rng.integers(1, 7))
        S = int(rng.integers(0, 4))
        y = tuple(int(v) for v in rng.integers(1, V + 1, size=S))
        ctc_logits = rng.normal(scale=2.0, size=(T, V + 1))
        rnnt_logits = rng.normal(scale=2.0, size=(T, S + 1, V + 1))
        e1 = abs(math.exp(-L.ctc_loss(ctc_logits, y)) - ctc_prob_enumerated(ctc_logits, y))
        e2 = abs(math.exp(-L.rnnt_loss(rnnt_logits, y)) - rnnt_prob_enumerated(rnnt_logits, y))
        worst = max(worst, e1, e2)
        if e1 > tol or e2 > tol:
            fails.append({"case": i, "T": T, "y": y, "ctc_err": e1, "rnnt_err": e2})
    return SuiteResult("loss enumeration", not fails, n, worst, tol, time.perf_counter() - t0, fails)


# ---------------------------------------------------------------- finite differences


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-8)
    return float(np.abs(a - b).max(initial=0.0)) / scale


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f(x)
        x[idx] = old - eps
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def grad_suite(n: int = 50, seed: int = 0, tol: float = 1e-4, eps: float = 1e-5,
               params: ModelParams | None = None, max_per_block: int | None = None) -> SuiteResult:
    """ctc_grad and rnnt_grad on ``n`` random instances; backward_all on ``n`` batches."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    fails = []
    for i in range(n):
        V = int(rng.integers(1, 4))
        S = int(rng.integers(0, 4))
        y = tuple(int(v) for v in rng.integers(1, V + 1, size=S))
        T = int(rng.integers(max(1, L.ctc_min_frames(y)), 7))
        x = rng.normal(size=(T, V + 1))
        e = rel_error(L.ctc_grad(x, y), numeric_grad(lambda z: L.ctc_loss(z, y), x, eps))
        x = rng.normal(size=(T, S + 1, V + 1))
        e = max(e, rel_error(L.rnnt_grad(x, y), numeric_grad(lambda z: L.rnnt_loss(z, y), x, eps)))
        worst = max(worst, e)
        if e > tol:
            fails.append({"case": i, "kind": "loss", "err": e})
    model = params
    for i in range(n):
        p = model if model is not None else ModelParams.init(TOY_GRAD_MODEL, seed * 1000 + i)
        K = p.cfg.n_tokens
        batch = []
        for _ in range(2):
            S = int(rng.integers(1, 4))
            y = tuple(int(v) for v in rng.integers(1, K + 1, size=S))
            X = rng.normal(size=(2 * p.cfg.subsample * S + int(rng.integers(0, 3)), p.cfg.feat_dim))
            batch.append((X, y, L.sample_masks(y, rng)))
        w = L.TrainWeights(*rng.uniform(0.1, 1.0, size=4))
        rep = models.grad_check(p, batch, w, eps, max_per_block=max_per_block, seed=seed + i)
        worst = max(worst, rep.max_rel_err)
        if rep.max_rel_err > tol:
            fails.append({"case": i, "kind": "model", "err": rep.max_rel_err, "blocks": rep.per_block})
    return SuiteResult("gradient check", not fails, 2 * n, worst, tol, time.perf_counter() - t0, fails)


# ---------------------------------------------------------------- search


def _toy_search_instance(seed: int, cfg: ModelConfig = TOY_SEARCH_MODEL, max_frames: int = 4):
    rng = np.random.default_rng(seed)
    p = ModelParams.init(cfg, seed)
    # sharpen the random model so hypotheses are well separated
    for k in p.blocks:
        p.blocks[k] *= 3.0
    N = int(rng.integers(1, cfg.subsample * max_frames + 1))
    H = models.encode(p, rng.normal(size=(N, cfg.feat_dim))).states
    return p, H, models.ctc_log_posteriors(p, H)


def search_suite(n: int = 100, seed: int = 0, max_len: int = 3, mus=ORACLE_MUS,
                 params: ModelParams | None = None, score_tol: float = 1e-9) -> SuiteResult:
    """Both time-synchronous joint searches at exhaustive widths vs. brute force.

    A case passes when the search returns the brute-force argmax with the
    same joint score (within ``score_tol``).
    """
    t0 = time.perf_counter()
    big = BeamConfig(k_beam=EXHAUSTIVE, k_pre=EXHAUSTIVE, max_output_len=max_len)
    fails = []
    worst = 0.0
    cases = 0
    for i in range(n):
        if params is None:
            p, H, lat = _toy_search_instance(seed * 100_003 + i)
        else:
            p = params
            rng = np.random.default_rng([seed, i])
            H = models.encode(p, rng.normal(size=(int(rng.integers(1, 9)), p.cfg.feat_dim))).states
            lat = models.ctc_log_posteriors(p, H)
        for m in mus:
            mu = DecoderWeights(*m)
            full = search.brute_force(H, lat, p, mu, max_len)
            in_ctc = search.brute_force(H, lat, p, mu, max_len, support="ctc")
            for name, got, ref in (
                ("joint-ctc-driven", search.joint_ctc_driven(H, lat, p, big, mu), in_ctc),
                ("joint-rnnt-driven", search.joint_rnnt_driven(H, lat, p, big, mu), full),
            ):
                cases += 1
                gap = abs(got.score - ref.score) if got.best == ref.best else math.inf
                worst = max(worst, gap)
                if gap > score_tol:
                    fails.append({"case": i, "mu": m, "decoder": name, "got": got.best, "want": ref.best,
                                  "gap": gap})
    return SuiteResult("search oracle", not fails, cases, worst, score_tol,
                       time.perf_counter() - t0, fails)


DEGENERATE_PAIRS = (
    # joint decoder, basis weights (ctc, att, rnnt), single-decoder counterpart
    ("joint-ctc-driven", (1.0, 0.0, 0.0), "ctc-beam"),
    ("joint-rnnt-driven", (0.0, 0.0, 1.0), "rnnt"),
    ("joint-ctc-att", (0.0, 1.0, 0.0), "att"),
)


def degeneration_suite(n: int = 100, seed: int = 0, beam: BeamConfig = BeamConfig(k_beam=3, k_pre=4, max_output_len=8),
                       cfg: ModelConfig = ModelConfig(n_tokens=5, feat_dim=3, enc_dim=6, enc_layers=1, emb_dim=4,
                                                      att_dim=6, pred_dim=6, joint_dim=6, mlm_dim=4)) -> SuiteResult:
    """Joint decoders with a basis weight vector vs. the matching single decoder, at ordinary widths."""
    t0 = time.perf_counter()
    fails = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        p = ModelParams.init(cfg, seed * 100_003 + i)
        for k in p.blocks:
            p.blocks[k] *= 2.0
        H = models.encode(p, rng.normal(size=(int(rng.integers(2, 17)), cfg.feat_dim))).states
        for joint, mu, single in DEGENERATE_PAIRS:
            a = search.decode(joint, p, H, beam, DecoderWeights(*mu))
            b = search.decode(single, p, H, beam)
            if a.best != b.best:
                fails.append({"case": i, "joint": joint, "got": a.best, "want": b.best})
    return SuiteResult("weight degeneration", not fails, n * len(DEGENERATE_PAIRS), float(len(fails)), 0.0,
                       time.perf_counter() - t0, fails)


def run_all(seed: int = 0, params: ModelParams | None = None, scale: float = 1.0) -> list[SuiteResult]:
    """Every suite; ``params`` swaps the random toy models for a given checkpoint where feasible."""
    k = lambda n: max(1, int(round(n * scale)))
    out = [loss_suite(k(200), seed)]
    if params is None:
        out.append(grad_suite(k(50), seed))
        out.append(search_suite(k(100), seed))
    else:
        out.append(grad_suite(k(5), seed, params=params, max_per_block=4))
        out.append(search_suite(k(10), seed, max_len=2, mus=ORACLE_MUS[:5], params=params))
    out.append(degeneration_suite(k(100), seed))
    return out

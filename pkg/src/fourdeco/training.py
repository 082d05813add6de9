"""Synthetic transduction task, multitask training with Adam, the two-stage
weight rule, and WER/RTF evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import losses as L
from . import models, search
from .core import BeamConfig, DecoderWeights, edit_distance
from .models import HEADS, ModelConfig, ModelParams

log = logging.getLogger(__name__)

# key of the snapshot with the lowest weighted validation objective
OBJECTIVE = "objective"
# nominal duration of one raw feature frame, for RTF
FRAME_SHIFT_S = 0.010


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 16
    min_len: int = 3
    max_len: int = 8
    min_frames_per_token: int = 4
    max_frames_per_token: int = 6
    feat_dim: int = 8
    noise: float = 1.0
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("length range must be nonempty and start at >= 1")
        if not 1 <= self.min_frames_per_token <= self.max_frames_per_token:
            raise ValueError("frames-per-token range must be nonempty")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.vocab_size < 1 or self.feat_dim < 1:
            raise ValueError("vocab size and feature dim must be positive")


@dataclass(frozen=True)
class Utterance:
    uid: str
    features: np.ndarray
    tokens: tuple[int, ...]


def token_embeddings(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(4)[0])
    return rng.normal(size=(spec.vocab_size, spec.feat_dim))


def render(tokens: Sequence[int], durations: Sequence[int], emb: np.ndarray, noise: float,
           rng: np.random.Generator) -> np.ndarray:
    """Repeat each token's embedding for its duration, then add Gaussian noise."""
    frames = np.repeat(emb[np.asarray(tokens) - 1], durations, axis=0)
    if noise > 0:
        frames = frames + noise * rng.normal(size=frames.shape)
    return frames


def gen_dataset(spec: SyntheticTaskSpec) -> dict[str, list[Utterance]]:
    """Train/valid/test splits; every split draws from its own seed stream."""
    streams = np.random.SeedSequence(spec.seed).spawn(4)
    emb = token_embeddings(spec)
    out = {}
    for name, n, ss in zip(("train", "valid", "test"), (spec.n_train, spec.n_valid, spec.n_test), streams[1:]):
        rng = np.random.default_rng(ss)
        utts = []
        for i in range(n):
            S = int(rng.integers(spec.min_len, spec.max_len + 1))
            toks = tuple(int(v) for v in rng.integers(1, spec.vocab_size + 1, size=S))
            dur = rng.integers(spec.min_frames_per_token, spec.max_frames_per_token + 1, size=S)
            utts.append(Utterance(f"{name}-{i:05d}", render(toks, dur, emb, spec.noise, rng), toks))
        out[name] = utts
    return out


# ---------------------------------------------------------------- weights


def two_stage_weights(argmin_epochs: Sequence[int]) -> L.TrainWeights:
    """Stage-2 weights proportional to each loss's stage-1 argmin epoch, in (ctc, rnnt, att, mlm) order."""
    e = [int(x) for x in argmin_epochs]
    if len(e) != 4:
        raise ValueError("need one epoch count per loss")
    if any(x < 1 for x in e):
        raise ValueError("argmin epochs must be >= 1")
    total = sum(e)
    return L.TrainWeights(*(x / total for x in e))


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    batch_size: int = 8
    clip_norm: float = 5.0
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    valid: dict[str, float]
    argmin: dict[str, int]
    train_loss: float

    def to_json(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: ModelParams, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.blocks.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.blocks.items()}
        self.step_count = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        c = self.cfg
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = c.clip_norm / norm if c.clip_norm and norm > c.clip_norm else 1.0
        self.step_count += 1
        b1t = 1.0 - c.beta1 ** self.step_count
        b2t = 1.0 - c.beta2 ** self.step_count
        for k, g in grads.items():
            g = g * scale
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params.blocks[k] -= c.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.eps)
        params.bump()


def _valid_masks(data: Sequence[Utterance], seed: int) -> list[L.MaskedBatch]:
    return [L.sample_masks(u.tokens, np.random.default_rng([seed, i])) for i, u in enumerate(data)]


def validation_losses(params: ModelParams, data: Sequence[Utterance], masks: Sequence[L.MaskedBatch],
                      heads: Sequence[str] = HEADS) -> dict[str, float]:
    tot = {h: 0.0 for h in heads}
    for u, m in zip(data, masks):
        out, _ = models.forward_all(params, u.features, u.tokens, m, heads)
        for h in heads:
            tot[h] += out[h]
    return {h: tot[h] / max(1, len(data)) for h in heads}


@dataclass
class TrainResult:
    """Final parameters, per-epoch records, and snapshots at each head's best
    validation loss plus one (keyed ``OBJECTIVE``) at the best weighted objective."""

    params: ModelParams
    history: list[EpochRecord]
    best: dict[str, ModelParams] = field(default_factory=dict)

    @property
    def argmin_epochs(self) -> tuple[int, ...]:
        return tuple(self.history[-1].argmin[h] for h in HEADS)


def train(params: ModelParams, train_data: Sequence[Utterance], valid_data: Sequence[Utterance],
          weights: L.TrainWeights, opt: OptimizerConfig, epochs: int,
          valid_heads: Sequence[str] = HEADS) -> TrainResult:
    """Adam on the weighted multitask loss; params are updated in place.

    Validation losses of ``valid_heads`` are recorded after every epoch, with
    a snapshot of the parameters at each head's (earliest) minimum.
    """
    rng = np.random.default_rng(opt.seed)
    adam = Adam(params, opt)
    active = [h for h, w in zip(HEADS, weights.as_tuple()) if w > 0]
    vmasks = _valid_masks(valid_data, opt.seed)
    history: list[EpochRecord] = []
    best_val = {h: math.inf for h in valid_heads}
    best_obj = math.inf
    if any(w > 0 and h not in valid_heads for h, w in zip(HEADS, weights.as_tuple())):
        raise ValueError("validation must cover every trained head")
    argmin = {h: 0 for h in valid_heads}
    best: dict[str, ModelParams] = {}
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_data))
        total, count = 0.0, 0
        for start in range(0, len(order), opt.batch_size):
            idx = order[start:start + opt.batch_size]
            acc = None
            for i in idx:
                u = train_data[i]
                m = L.sample_masks(u.tokens, rng) if "mlm" in active else None
                out, cache = models.forward_all(params, u.features, u.tokens, m, active)
                if not cache.ctc_feasible:
                    continue
                loss = L.multitask_loss(weights, *(out.get(h, 0.0) for h in HEADS))
                if not math.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss {loss} at epoch {epoch} on {u.uid}: {out}")
                g = models.backward_all(params, cache, weights)
                if acc is None:
                    acc = g
                else:
                    for k in acc:
                        acc[k] += g[k]
                total += loss
                count += 1
            if acc is None:
                continue
            for k in acc:
                acc[k] /= len(idx)
            adam.step(params, acc)
        valid = validation_losses(params, valid_data, vmasks, valid_heads)
        for h, v in valid.items():
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite validation loss for {h} at epoch {epoch}")
            if v < best_val[h]:
                best_val[h] = v
                argmin[h] = epoch
                best[h] = params.copy()
        obj = L.multitask_loss(weights, *(valid.get(h, 0.0) for h in HEADS))
        if obj < best_obj:
            best_obj = obj
            best[OBJECTIVE] = params.copy()
        rec = EpochRecord(epoch, valid, dict(argmin), total / max(1, count))
        history.append(rec)
        log.info("epoch %d train %.4f valid %s", epoch, rec.train_loss,
                 " ".join(f"{h}={v:.4f}" for h, v in valid.items()))
    return TrainResult(params, history, best)


@dataclass(frozen=True)
class TwoStageConfig:
    model: ModelConfig = ModelConfig()
    opt: OptimizerConfig = OptimizerConfig()
    stage1_epochs: int = 12
    stage2_epochs: int = 12
    seed: int = 0
    continue_stage2: bool = False


@dataclass
class TwoStageResult:
    params: ModelParams
    weights: L.TrainWeights
    argmin_epochs: tuple[int, ...]
    stage1: TrainResult
    stage2: TrainResult

    def report(self) -> dict:
        return {
            "stage1_weights": L.TrainWeights.uniform().as_tuple(),
            "argmin_epochs": list(self.argmin_epochs),
            "stage2_weights": list(self.weights.as_tuple()),
            "stage1_history": [r.to_json() for r in self.stage1.history],
            "stage2_history": [r.to_json() for r in self.stage2.history],
        }


def run_two_stage(data: dict[str, list[Utterance]], cfg: TwoStageConfig) -> TwoStageResult:
    """Stage 1 with equal weights, then retrain with weights proportional to the argmin epochs."""
    stage1_weights = L.TrainWeights.uniform()
    assert stage1_weights.as_tuple() == (0.25, 0.25, 0.25, 0.25)
    p1 = ModelParams.init(cfg.model, cfg.seed)
    s1 = train(p1, data["train"], data["valid"], stage1_weights, cfg.opt, cfg.stage1_epochs)
    argmin = s1.argmin_epochs
    w2 = two_stage_weights(argmin)
    log.info("stage-1 argmin epochs %s -> stage-2 weights %s", argmin, w2.as_tuple())
    p2 = p1.copy() if cfg.continue_stage2 else ModelParams.init(cfg.model, cfg.seed + 1)
    opt2 = OptimizerConfig(**{**asdict(cfg.opt), "seed": cfg.opt.seed + 1})
    s2 = train(p2, data["train"], data["valid"], w2, opt2, cfg.stage2_epochs)
    return TwoStageResult(p2, w2, argmin, s1, s2)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    decoder: str
    wer: float
    cer: float
    rtf: float
    n_utts: int
    errors: dict[str, int]
    calls_per_utt: dict[str, float]
    hyps: list[tuple[str, tuple[int, ...]]] = field(repr=False, default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("hyps")
        return d


def characters(words: Sequence[str]) -> str:
    """Character units for CER: the words joined by single spaces, spaces included."""
    return " ".join(words)


def corpus_error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> tuple[float, dict[str, int]]:
    errs = {"sub": 0, "ins": 0, "del": 0}
    n_ref = 0
    for r, h in zip(refs, hyps):
        _, b = edit_distance(r, h)
        for k in errs:
            errs[k] += b[k]
        n_ref += len(r)
    return sum(errs.values()) / max(1, n_ref), errs


def evaluate(params: ModelParams, split: Sequence[Utterance], decoder: str, cfg: BeamConfig,
             mu: DecoderWeights | None = None, p_thr: float = 0.9, n_iters: int = 2) -> EvalReport:
    """Decode ``split`` and report corpus WER, CER, RTF and scorer calls per utterance."""
    vocab = params.cfg.vocab
    hyps = []
    calls: dict[str, float] = {}
    decode_time = 0.0
    audio = 0.0
    for u in split:
        t0 = time.perf_counter()
        H = models.encode(params, u.features)
        res = search.decode(decoder, params, H, cfg, mu, p_thr, n_iters)
        decode_time += time.perf_counter() - t0
        audio += u.features.shape[0] * FRAME_SHIFT_S
        hyps.append((u.uid, res.best))
        for k, v in res.stats.get("calls", {}).items():
            calls[k] = calls.get(k, 0) + v
    refs = [u.tokens for u in split]
    wer, errs = corpus_error_rate(refs, [h for _, h in hyps])
    cer, _ = corpus_error_rate([characters(vocab.decode(r)) for r in refs],
                               [characters(vocab.decode(h)) for _, h in hyps])
    n = max(1, len(split))
    return EvalReport(decoder, wer, cer, decode_time / max(audio, 1e-12), len(split), errs,
                      {k: v / n for k, v in sorted(calls.items())}, hyps)


# ---------------------------------------------------------------- studies

# single-task baselines: training weights (ctc, rnnt, att, mlm) and the decoder evaluated
SINGLE_TASK = {
    "ctc": ((1.0, 0.0, 0.0, 0.0), "ctc-greedy"),
    "att": ((0.0, 0.0, 1.0, 0.0), "att"),
    "rnnt": ((0.0, 1.0, 0.0, 0.0), "rnnt"),
    "maskctc": ((0.3, 0.0, 0.0, 0.7), "maskctc"),
}
# operating points of the two joint searches, as (ctc, att, rnnt)
CTC_DRIVEN_MU = DecoderWeights(mu_ctc=0.2, mu_att=0.6, mu_rnnt=0.2)
RNNT_DRIVEN_MU = DecoderWeights(mu_ctc=0.1, mu_att=0.5, mu_rnnt=0.4)


@dataclass(frozen=True)
class StudyConfig:
    task: SyntheticTaskSpec = SyntheticTaskSpec()
    model: ModelConfig = ModelConfig()
    opt: OptimizerConfig = OptimizerConfig()
    epochs: int = 12
    seeds: tuple[int, ...] = (0, 1, 2)
    beam: BeamConfig = BeamConfig()


def joint_training_study(cfg: StudyConfig, data: dict | None = None,
                         joint_decoders: Sequence[str] = ("joint-rnnt-driven",)) -> dict:
    """Two-stage 4D model vs. single-task models, per seed, on the test split.

    Each model is evaluated at its best weighted validation objective. The
    4D checkpoint is additionally decoded with ``joint_decoders``; the
    checkpoints themselves are returned under ``"models"``, keyed by seed.
    """
    data = data or gen_dataset(cfg.task)
    test = data["test"]
    out: dict = {"seeds": list(cfg.seeds), "single": {k: [] for k in SINGLE_TASK},
                 "joint": {k: [] for k in SINGLE_TASK}, "joint_decoding": {k: [] for k in joint_decoders},
                 "stage2_weights": [], "argmin_epochs": [], "models": {}}
    mus = {"joint-rnnt-driven": RNNT_DRIVEN_MU, "joint-ctc-driven": CTC_DRIVEN_MU,
           "joint-ctc-att": DecoderWeights(mu_ctc=0.3, mu_att=0.7, mu_rnnt=0.0)}
    for seed in cfg.seeds:
        opt = OptimizerConfig(**{**asdict(cfg.opt), "seed": seed})
        for name, (w, dec) in SINGLE_TASK.items():
            weights = L.TrainWeights(*w)
            heads = [h for h, x in zip(HEADS, weights.as_tuple()) if x > 0]
            res = train(ModelParams.init(cfg.model, seed), data["train"], data["valid"], weights, opt,
                        cfg.epochs, valid_heads=heads)
            wer = evaluate(res.best[OBJECTIVE], test, dec, cfg.beam).wer
            out["single"][name].append(wer)
            log.info("seed %d single-task %s: WER %.4f", seed, name, wer)
        two = run_two_stage(data, TwoStageConfig(cfg.model, opt, cfg.epochs, cfg.epochs, seed))
        best4d = two.stage2.best[OBJECTIVE]
        out["models"][seed] = best4d
        out["stage2_weights"].append(list(two.weights.as_tuple()))
        out["argmin_epochs"].append(list(two.argmin_epochs))
        for name, (_, dec) in SINGLE_TASK.items():
            wer = evaluate(best4d, test, dec, cfg.beam).wer
            out["joint"][name].append(wer)
            log.info("seed %d 4D %s: WER %.4f", seed, name, wer)
        for dec in joint_decoders:
            wer = evaluate(best4d, test, dec, cfg.beam, mus[dec]).wer
            out["joint_decoding"][dec].append(wer)
            log.info("seed %d 4D %s: WER %.4f", seed, dec, wer)
    mean = lambda xs: float(np.mean(xs))
    out["mean"] = {
        "single": {k: mean(v) for k, v in out["single"].items()},
        "joint": {k: mean(v) for k, v in out["joint"].items()},
        "joint_decoding": {k: mean(v) for k, v in out["joint_decoding"].items()},
    }
    return out

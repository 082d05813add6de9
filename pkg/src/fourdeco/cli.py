"""Command-line interface: ``fourdeco {gen,train,decode,eval,bench,check}``.

Exit codes: 0 ok, 1 usage error, 2 validation error (bad config, paths or
files), 3 oracle failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from . import losses as L
from . import models, oracles, search, storage, training
from .core import BeamConfig, DecoderWeights, Vocabulary, edit_distance
from .models import HEADS, ModelConfig, ModelParams
from .training import OptimizerConfig, SyntheticTaskSpec

log = logging.getLogger("fourdeco")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_ORACLE = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid configuration, path or input file (exit code 2)."""


class UsageError(ValueError):
    """Bad command-line usage (exit code 1)."""


# ---------------------------------------------------------------- run config


@dataclasses.dataclass(frozen=True)
class TrainingSection:
    weights: Any = "two-stage"
    epochs: int = 12
    stage2_epochs: int | None = None
    continue_stage2: bool = False


@dataclasses.dataclass(frozen=True)
class DecoderSection:
    name: str = "joint-rnnt-driven"
    mu: tuple[float, float, float] = (0.1, 0.5, 0.4)
    p_thr: float = 0.9
    n_iters: int = 2


@dataclasses.dataclass(frozen=True)
class PathsSection:
    data: str = "data"
    out: str = "run"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    task: SyntheticTaskSpec = SyntheticTaskSpec()
    model: ModelConfig = ModelConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    training: TrainingSection = TrainingSection()
    beam: BeamConfig = BeamConfig()
    decoder: DecoderSection = DecoderSection()
    paths: PathsSection = PathsSection()
    seed: int = 0

    def train_weights(self) -> L.TrainWeights | None:
        """Fixed weights, or None for the two-stage schedule."""
        w = self.training.weights
        return None if w == "two-stage" else L.TrainWeights(*w)

    def decoder_weights(self) -> DecoderWeights:
        return DecoderWeights(*self.decoder.mu)


SECTIONS = {"task": SyntheticTaskSpec, "model": ModelConfig, "optimizer": OptimizerConfig,
            "training": TrainingSection, "beam": BeamConfig, "decoder": DecoderSection, "paths": PathsSection}

_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _check_value(where: str, value, default):
    if default is None:
        if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigError(f"{where}: expected an integer or null")
        return value
    kind = type(default)
    if kind in (tuple, list):
        if not isinstance(value, list) or len(value) != len(default) or \
                not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of {len(default)} numbers")
        return tuple(float(v) for v in value)
    allowed = _SCALARS.get(kind)
    if allowed is None:
        return value
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{where}: expected {kind.__name__}, got a boolean")
    if not isinstance(value, allowed):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {type(value).__name__}")
    return kind(value)


def parse_run_config(doc: Any) -> RunConfig:
    """Validate a JSON document against the RunConfig schema; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = set(SECTIONS) | {"seed"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    if "seed" in doc:
        kwargs["seed"] = _check_value("seed", doc["seed"], 0)
    for name, cls in SECTIONS.items():
        if name not in doc:
            continue
        sec = doc[name]
        if not isinstance(sec, dict):
            raise ConfigError(f"{name}: expected an object")
        defaults = cls()
        fields = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(sec) - fields)
        if bad:
            raise ConfigError(f"unknown keys in {name}: {', '.join(bad)}")
        vals = {}
        for k, v in sec.items():
            d = getattr(defaults, k)
            if name == "training" and k == "weights":
                if v != "two-stage":
                    v = _check_value(f"{name}.{k}", v, (0.0,) * 4)
            else:
                v = _check_value(f"{name}.{k}", v, d)
            vals[k] = v
        try:
            kwargs[name] = cls(**vals)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: {e}") from None
    cfg = RunConfig(**kwargs)
    try:
        cfg.train_weights()
        cfg.decoder_weights()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.decoder.name not in search.DECODERS:
        raise ConfigError(f"decoder.name: unknown decoder {cfg.decoder.name!r}")
    if cfg.task.vocab_size != cfg.model.n_tokens or cfg.task.feat_dim != cfg.model.feat_dim:
        raise ConfigError("model.n_tokens/feat_dim must match task.vocab_size/feat_dim")
    if cfg.training.epochs < 0 or (cfg.training.stage2_epochs or 0) < 0:
        raise ConfigError("epoch counts must be >= 0")
    return cfg


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return parse_run_config(doc)


def config_to_json(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------- helpers


def resolve_threads(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get("FOURDECO_THREADS")
        if env is None:
            return 1
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"FOURDECO_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def parse_mu(text: str) -> DecoderWeights:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--mu expects three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise UsageError(f"--mu expects three comma-separated numbers (ctc,att,rnnt), got {text!r}")
    try:
        return DecoderWeights(*vals)
    except ValueError as e:
        raise ConfigError(f"--mu: {e}") from None


def _effective(args, cfg: RunConfig) -> tuple[RunConfig, DecoderWeights]:
    """Apply --seed/--k-beam/--k-pre/--decoder/--mu overrides."""
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    beam = cfg.beam
    if getattr(args, "k_beam", None) is not None:
        beam = dataclasses.replace(beam, k_beam=args.k_beam)
    if getattr(args, "k_pre", None) is not None:
        beam = dataclasses.replace(beam, k_pre=args.k_pre)
    try:
        beam = BeamConfig(**dataclasses.asdict(beam))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    dec = cfg.decoder
    if getattr(args, "decoder", None) is not None:
        dec = dataclasses.replace(dec, name=args.decoder)
    cfg = dataclasses.replace(cfg, beam=beam, decoder=dec)
    mu = parse_mu(args.mu) if getattr(args, "mu", None) else cfg.decoder_weights()
    return cfg, mu


def _load_split(cfg: RunConfig, split: str, data_dir: str | None = None):
    root = Path(data_dir or cfg.paths.data)
    if not (root / "manifest.json").exists():
        raise ConfigError(f"no dataset at {root} (run 'fourdeco gen' first)")
    try:
        _, splits = storage.load_dataset(root, [split])
    except (OSError, storage.FormatError) as e:
        raise ConfigError(str(e)) from None
    if split not in splits:
        raise ConfigError(f"dataset has no split {split!r}")
    return splits[split]


def _load_ckpt(path: str) -> ModelParams:
    try:
        params, _ = storage.load_checkpoint(path)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e.strerror}") from None
    except storage.FormatError as e:
        raise ConfigError(str(e)) from None
    return params


def decode_split(params: ModelParams, utts, decoder: str, beam: BeamConfig, mu: DecoderWeights,
                 p_thr: float = 0.9, n_iters: int = 2, threads: int = 1) -> list[search.DecodeResult]:
    """Decode every utterance; results come back in input order for any thread count."""
    if decoder not in search.DECODERS:
        raise ConfigError(f"unknown decoder {decoder!r}; choose from {', '.join(search.DECODERS)}")

    def one(u):
        return search.decode(decoder, params, models.encode(params, u.features), beam, mu, p_thr, n_iters)

    if threads == 1:
        return [one(u) for u in utts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, utts))


def _emit(report: dict, text: str, as_json: bool, out=None):
    out = out or sys.stdout
    out.write(json.dumps(report, indent=1, sort_keys=True) + "\n" if as_json else text)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg, _ = _effective(args, load_run_config(args.config))
    spec = dataclasses.replace(cfg.task, seed=cfg.seed) if args.seed is not None else cfg.task
    out = Path(args.out or cfg.paths.data)
    splits = training.gen_dataset(spec)
    storage.save_dataset(out, spec, splits)
    vocab = Vocabulary.of_size(spec.vocab_size)
    for name, utts in splits.items():
        storage.write_transcripts(out / f"ref.{name}.txt", [(u.uid, u.tokens) for u in utts], vocab)
    report = {"out": str(out), "counts": {k: len(v) for k, v in splits.items()}, "spec": dataclasses.asdict(spec)}
    text = f"wrote dataset to {out}: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items()) + "\n"
    _emit(report, text, args.json)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, _ = _effective(args, load_run_config(args.config))
    out = Path(args.out or cfg.paths.out)
    root = Path(args.data or cfg.paths.data)
    if not (root / "manifest.json").exists():
        raise ConfigError(f"no dataset at {root} (run 'fourdeco gen' first)")
    _, data = storage.load_dataset(root, ["train", "valid"])
    opt = dataclasses.replace(cfg.optimizer, seed=cfg.seed)
    weights = cfg.train_weights()
    out.mkdir(parents=True, exist_ok=True)
    meta = {"run_config": config_to_json(cfg)}
    if weights is None:
        tcfg = training.TwoStageConfig(cfg.model, opt, cfg.training.epochs,
                                       cfg.training.stage2_epochs or cfg.training.epochs, cfg.seed,
                                       cfg.training.continue_stage2)
        res = training.run_two_stage(data, tcfg)
        final = res.stage2
        report = {"schedule": "two-stage", **res.report()}
        used = res.weights
    else:
        params = ModelParams.init(cfg.model, cfg.seed)
        heads = [h for h, w in zip(HEADS, weights.as_tuple()) if w > 0]
        final = training.train(params, data["train"], data["valid"], weights, opt, cfg.training.epochs,
                               valid_heads=heads)
        report = {"schedule": "fixed", "weights": list(weights.as_tuple()),
                  "history": [r.to_json() for r in final.history]}
        used = weights
    best = final.best.get(training.OBJECTIVE, final.params)
    storage.save_checkpoint(out / "model.ckpt", best, {**meta, "weights": list(used.as_tuple())})
    storage.save_checkpoint(out / "last.ckpt", final.params, {**meta, "weights": list(used.as_tuple())})
    for h, p in final.best.items():
        if h != training.OBJECTIVE:
            storage.save_checkpoint(out / f"best-{h}.ckpt", p, {**meta, "best_for": h})
    (out / "train_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    lines = [f"schedule: {report['schedule']}"]
    if weights is None:
        lines.append(f"stage-1 argmin epochs (ctc,rnnt,att,mlm): {report['argmin_epochs']}")
        lines.append("stage-2 weights: " + ", ".join(f"{w:.4f}" for w in report["stage2_weights"]))
    for r in final.history:
        lines.append(f"epoch {r.epoch:3d} train {r.train_loss:.4f} " +
                     " ".join(f"{h}={v:.4f}" for h, v in r.valid.items()))
    lines.append(f"checkpoint: {out / 'model.ckpt'}")
    _emit(report, "\n".join(lines) + "\n", args.json)
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg, mu = _effective(args, load_run_config(args.config))
    params = _load_ckpt(args.checkpoint)
    utts = _load_split(cfg, args.split, args.data)
    name = cfg.decoder.name
    threads = resolve_threads(args.threads)
    results = decode_split(params, utts, name, cfg.beam, mu, cfg.decoder.p_thr, cfg.decoder.n_iters, threads)
    rows = [(u.uid, r.best) for u, r in zip(utts, results)]
    out = args.out or str(Path(cfg.paths.out) / f"hyp.{args.split}.{name}.txt")
    storage.write_transcripts(out, rows, params.cfg.vocab)
    header = {"decoder": name, "mu": {"ctc": mu.mu_ctc, "att": mu.mu_att, "rnnt": mu.mu_rnnt},
              "k_beam": cfg.beam.k_beam, "k_pre": cfg.beam.k_pre, "split": args.split,
              "n_utts": len(rows), "out": out}
    text = (f"decoder={name} mu(ctc,att,rnnt)=({mu.mu_ctc:.4f},{mu.mu_att:.4f},{mu.mu_rnnt:.4f}) "
            f"k_beam={cfg.beam.k_beam} k_pre={cfg.beam.k_pre}\nwrote {len(rows)} hypotheses to {out}\n")
    _emit(header, text, args.json)
    return EXIT_OK


def score_transcripts(refs: list, hyps: list) -> dict:
    """WER over tokens and CER over the characters of the space-joined tokens."""
    hyp_map = dict(hyps)
    if len(hyp_map) != len(hyps):
        raise ConfigError("duplicate utterance ids in hypothesis file")
    missing = [u for u, _ in refs if u not in hyp_map]
    if missing:
        raise ConfigError(f"{len(missing)} reference utterances have no hypothesis (first: {missing[0]})")
    extra = set(hyp_map) - {u for u, _ in refs}
    if extra:
        raise ConfigError(f"{len(extra)} hypotheses have no reference (first: {sorted(extra)[0]})")
    words = {"sub": 0, "ins": 0, "del": 0}
    chars = {"sub": 0, "ins": 0, "del": 0}
    n_w = n_c = 0
    for uid, ref in refs:
        hyp = hyp_map[uid]
        _, b = edit_distance(ref, hyp)
        for k in words:
            words[k] += b[k]
        n_w += len(ref)
        rc, hc = training.characters(ref), training.characters(hyp)
        _, b = edit_distance(rc, hc)
        for k in chars:
            chars[k] += b[k]
        n_c += len(rc)
    return {"n_utts": len(refs), "ref_words": n_w, "ref_chars": n_c,
            "wer": sum(words.values()) / max(1, n_w), "cer": sum(chars.values()) / max(1, n_c),
            "word_errors": words, "char_errors": chars}


def cmd_eval(args) -> int:
    try:
        refs = storage.read_transcripts(args.ref)
        hyps = storage.read_transcripts(args.hyp)
    except OSError as e:
        raise ConfigError(f"cannot read {e.filename}: {e.strerror}") from None
    except storage.FormatError as e:
        raise ConfigError(str(e)) from None
    rep = score_transcripts(refs, hyps)
    we = rep["word_errors"]
    text = (f"utterances {rep['n_utts']}\n"
            f"WER {100 * rep['wer']:.2f}% (sub {we['sub']} ins {we['ins']} del {we['del']} / {rep['ref_words']})\n"
            f"CER {100 * rep['cer']:.2f}%\n")
    _emit(rep, text, args.json)
    return EXIT_OK


def bench_rows(params: ModelParams, utts, decoders: Sequence[str], beam: BeamConfig, mu: DecoderWeights,
               p_thr: float = 0.9, n_iters: int = 2) -> list[dict]:
    mus = {"joint-ctc-driven": training.CTC_DRIVEN_MU, "joint-rnnt-driven": training.RNNT_DRIVEN_MU,
           "joint-ctc-att": DecoderWeights(mu.mu_ctc, mu.mu_att, 0.0) if mu.mu_ctc + mu.mu_att > 0
           else DecoderWeights(0.3, 0.7, 0.0),
           "oracle": mu}
    rows = []
    for d in decoders:
        if d not in search.DECODERS:
            raise ConfigError(f"unknown decoder {d!r}")
        m = mus.get(d, mu)
        rep = training.evaluate(params, utts, d, beam, m, p_thr, n_iters)
        rows.append({"decoder": d, "mu": list(m.as_tuple()), "wer": rep.wer, "cer": rep.cer, "rtf": rep.rtf,
                     "calls_per_utt": rep.calls_per_utt, "n_utts": rep.n_utts})
    return rows


def cmd_bench(args) -> int:
    cfg, mu = _effective(args, load_run_config(args.config))
    params = _load_ckpt(args.checkpoint)
    utts = _load_split(cfg, args.split, args.data)
    if args.limit is not None:
        utts = utts[:args.limit]
    decoders = [d for d in args.decoders.split(",") if d] if args.decoders else \
        [d for d in search.DECODERS if d != "oracle"]
    rows = bench_rows(params, utts, decoders, cfg.beam, mu, cfg.decoder.p_thr, cfg.decoder.n_iters)
    report = {"split": args.split, "k_beam": cfg.beam.k_beam, "k_pre": cfg.beam.k_pre, "rows": rows}
    lines = [f"{'decoder':<18} {'WER%':>7} {'CER%':>7} {'RTF':>9}  att_calls/utt  calls"]
    for r in rows:
        c = r["calls_per_utt"]
        lines.append(f"{r['decoder']:<18} {100 * r['wer']:7.2f} {100 * r['cer']:7.2f} {r['rtf']:9.5f}  "
                     f"{c.get('att_calls', 0.0):13.1f}  " + " ".join(f"{k}={v:.1f}" for k, v in c.items()))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    _emit(report, "\n".join(lines) + "\n", args.json)
    return EXIT_OK


def cmd_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    params = _load_ckpt(args.checkpoint) if args.checkpoint else None
    results = oracles.run_all(seed, params, scale=args.scale)
    report = {"seed": seed, "passed": all(r.passed for r in results),
              "suites": [{"name": r.name, "passed": r.passed, "cases": r.n_cases, "worst": r.metric,
                          "tolerance": r.tolerance, "seconds": r.seconds, "failures": r.failures[:5]}
                         for r in results]}
    _emit(json.loads(json.dumps(report, default=str)), "\n".join(r.line() for r in results) + "\n", args.json)
    return EXIT_OK if report["passed"] else EXIT_ORACLE


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fourdeco", description="Joint CTC / RNN-T / attention / Mask-CTC toolkit on a synthetic task.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, decoding=False):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--json", action="store_true", help="print the machine-readable report")
        if decoding:
            sp.add_argument("--data", help="dataset directory (default: paths.data)")
            sp.add_argument("--k-beam", type=int)
            sp.add_argument("--k-pre", type=int)
            sp.add_argument("--mu", help="decoder weights ctc,att,rnnt (normalized)")
            sp.add_argument("--threads", type=int, help="decode threads (default: $FOURDECO_THREADS or 1)")
        return sp

    common(sub.add_parser("gen", help="generate the synthetic dataset"))
    sp = common(sub.add_parser("train", help="train a model (fixed weights or two-stage)"))
    sp.add_argument("--data")
    sp = common(sub.add_parser("decode", help="decode a split to a hypothesis file"), decoding=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--decoder", choices=search.DECODERS)
    sp = sub.add_parser("eval", help="score a hypothesis file against references")
    sp.add_argument("ref")
    sp.add_argument("hyp")
    sp.add_argument("--json", action="store_true")
    sp = common(sub.add_parser("bench", help="WER/RTF table over decoders"), decoding=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--decoders", help="comma-separated decoder list (default: all but oracle)")
    sp.add_argument("--limit", type=int, help="only the first N utterances")
    sp = sub.add_parser("check", help="run the oracle self-check suites")
    sp.add_argument("--checkpoint")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--scale", type=float, default=1.0, help="multiply suite sizes")
    sp.add_argument("--json", action="store_true")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "decode": cmd_decode, "eval": cmd_eval,
            "bench": cmd_bench, "check": cmd_check}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"fourdeco: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"fourdeco: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, storage.FormatError) as e:
        print(f"fourdeco: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

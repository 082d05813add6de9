"""On-disk formats: checkpoints, datasets and hypothesis/reference files.

Checkpoint byte layout (single file)::

    offset 0   8 bytes    magic b"FDECKPT1"
    offset 8   8 bytes    manifest length N, unsigned 64-bit little-endian
    offset 16  N bytes    UTF-8 JSON manifest
    offset 16+N           parameter blocks, in manifest order, each a C-order
                          array of little-endian float64 (``<f8``)

The manifest holds ``config`` (ModelConfig fields), ``config_hash``, ``seed``,
``blocks`` (list of ``{"name", "shape"}``) and a free-form ``meta`` object.

A dataset directory holds ``manifest.json`` (task spec plus, per split, the
utterance ids, token targets and frame counts) and ``feats/<utt_id>.f8``,
each a raw C-order ``<f8`` matrix of shape (frames, feat_dim), the same
encoding as a checkpoint block.

Hypothesis and reference files have one utterance per line:
``utt_id<TAB>space-separated token strings``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Vocabulary
from .models import ModelConfig, ModelParams
from .training import SyntheticTaskSpec, Utterance

MAGIC = b"FDECKPT1"
FLOAT = np.dtype("<f8")


class FormatError(ValueError):
    pass


def _write_atomic(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    manifest = {
        "config": asdict(params.cfg),
        "config_hash": params.cfg.hash(),
        "seed": params.seed,
        "blocks": params.manifest(),
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<Q", len(head)), head]
    parts += [np.ascontiguousarray(a, dtype=FLOAT).tobytes() for a in params.blocks.values()]
    _write_atomic(Path(path), b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Return ``(params, meta)``; raises FormatError on any layout mismatch."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + n].decode())
        cfg = ModelConfig(**manifest["config"])
    except (ValueError, TypeError, KeyError) as e:
        raise FormatError(f"{path}: bad manifest: {e}") from None
    if cfg.hash() != manifest.get("config_hash"):
        raise FormatError(f"{path}: config hash mismatch")
    pos = 16 + n
    blocks = {}
    for b in manifest["blocks"]:
        shape = tuple(b["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * FLOAT.itemsize
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated block {b['name']}")
        blocks[b["name"]] = np.frombuffer(raw, FLOAT, count=size // FLOAT.itemsize, offset=pos).reshape(shape)
        pos += size
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    try:
        params = ModelParams(cfg, blocks, int(manifest["seed"]))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    return params, manifest.get("meta", {})


def save_dataset(root, spec: SyntheticTaskSpec, splits: dict[str, list[Utterance]]) -> None:
    root = Path(root)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    manifest = {"spec": asdict(spec), "splits": {}}
    for name, utts in splits.items():
        entries = []
        for u in utts:
            _write_atomic(root / "feats" / f"{u.uid}.f8", np.ascontiguousarray(u.features, FLOAT).tobytes())
            entries.append({"id": u.uid, "tokens": list(u.tokens), "frames": int(u.features.shape[0])})
        manifest["splits"][name] = entries
    _write_atomic(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())


def load_dataset(root, splits: Sequence[str] | None = None) -> tuple[SyntheticTaskSpec, dict[str, list[Utterance]]]:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        spec = SyntheticTaskSpec(**manifest["spec"])
    except (ValueError, TypeError, KeyError) as e:
        raise FormatError(f"{root}: bad dataset manifest: {e}") from None
    out = {}
    for name, entries in manifest["splits"].items():
        if splits is not None and name not in splits:
            continue
        utts = []
        for e in entries:
            raw = (root / "feats" / f"{e['id']}.f8").read_bytes()
            n = e["frames"] * spec.feat_dim
            if len(raw) != n * FLOAT.itemsize:
                raise FormatError(f"{e['id']}: expected {n} floats, found {len(raw) // FLOAT.itemsize}")
            X = np.frombuffer(raw, FLOAT).reshape(e["frames"], spec.feat_dim).copy()
            utts.append(Utterance(e["id"], X, tuple(e["tokens"])))
        out[name] = utts
    return spec, out


def format_transcripts(rows: Iterable[tuple[str, Sequence[int]]], vocab: Vocabulary) -> str:
    lines = []
    for uid, ids in rows:
        if "\t" in uid or "\n" in uid:
            raise ValueError(f"utterance id {uid!r} contains a tab or newline")
        lines.append(f"{uid}\t{' '.join(vocab.decode(ids))}\n")
    return "".join(lines)


def write_transcripts(path, rows: Iterable[tuple[str, Sequence[int]]], vocab: Vocabulary) -> None:
    _write_atomic(Path(path), format_transcripts(rows, vocab).encode())


def parse_transcripts(text: str) -> list[tuple[str, tuple[str, ...]]]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        uid, sep, toks = line.partition("\t")
        if not sep:
            raise FormatError(f"line {n}: expected 'utt_id<TAB>tokens'")
        out.append((uid, tuple(toks.split())))
    return out


def read_transcripts(path) -> list[tuple[str, tuple[str, ...]]]:
    return parse_transcripts(Path(path).read_text())

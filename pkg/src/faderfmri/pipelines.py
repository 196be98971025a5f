"""Cross-validation pipelines over frozen latent sequences, and latent archive I/O."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .classifier import GruConfig, predict, train_classifier
from .core import LatentSequence
from .errors import DomainError, FormatError

_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamp keeps archives byte-reproducible


def save_latents(path, sequences: list[LatentSequence], meta: dict | None = None) -> None:
    """Write an ``.npz``-compatible archive: ``seq_00000``... plus ``subject_ids``."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        def put(name, arr):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_EPOCH), buf.getvalue())

        put("subject_ids", np.array([s.subject_id for s in sequences]))
        for i, s in enumerate(sequences):
            put(f"seq_{i:05d}", np.asarray(s.vectors, dtype="<f4"))
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=_EPOCH), json.dumps(meta or {}, sort_keys=True))


def load_latents(path) -> list[LatentSequence]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            ids = [str(s) for s in z["subject_ids"]]
            return [LatentSequence(sid, z[f"seq_{i:05d}"]) for i, sid in enumerate(ids)]
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise FormatError(f"{path}: not a latent archive ({e})") from e


def latent_gru_pipeline(latents: dict[str, np.ndarray], cfg: GruConfig):
    """Train a fresh GRU per fold on frozen latents; the fold seed replaces ``cfg.seed``."""

    def pipeline(train, test, seed):
        fold_cfg = replace(cfg, seed=int(seed))
        model, _ = train_classifier([latents[r.subject_id] for r in train], [r.diagnosis for r in train], fold_cfg)
        return predict(model, [latents[r.subject_id] for r in test])

    return pipeline


def probe_vectors(sequences: list[LatentSequence], how: str = "frame", seed: int = 0) -> np.ndarray:
    """One vector per subject: a single frame drawn at random, or the time average."""
    if how == "mean":
        return np.stack([np.asarray(s.vectors, dtype=np.float64).mean(axis=0) for s in sequences])
    if how == "frame":
        rng = np.random.default_rng(seed)
        picks = [int(rng.integers(len(s.vectors))) for s in sequences]
        return np.stack([np.asarray(s.vectors[t], dtype=np.float64) for s, t in zip(sequences, picks)])
    raise DomainError(f"unknown probe vector mode {how!r}")

"""Per-speaker Gaussian model over d-vector speaker embeddings.

Training draws a fresh embedding per utterance from the speaker's Gaussian.
Inference uses the Gaussian mean, which removes the utterance-specific
acoustics that individual d-vectors carry.
"""

from __future__ import annotations

import csv
import zlib
from collections import defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMBEDDING_DIM = 128
VAR_FLOOR = 1e-8


class SpeakerSpaceError(ValueError):
    pass


class EmptyEmbeddingsError(SpeakerSpaceError):
    pass


class EmbeddingDimensionError(SpeakerSpaceError):
    pass


class MissingSpeakerError(SpeakerSpaceError):
    pass


@dataclass(frozen=True, eq=False)
class SpeakerGaussian:
    speaker: str
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        var = np.array(self.var, dtype=np.float64)
        if mean.shape != (EMBEDDING_DIM,) or var.shape != (EMBEDDING_DIM,):
            raise EmbeddingDimensionError(
                f"speaker {self.speaker!r}: expected {EMBEDDING_DIM}-dim mean and var"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise SpeakerSpaceError(f"speaker {self.speaker!r}: non-finite parameters")
        mean.flags.writeable = False
        var = np.maximum(var, VAR_FLOOR)
        var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    def __eq__(self, other):
        if not isinstance(other, SpeakerGaussian):
            return NotImplemented
        return (self.speaker == other.speaker and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.var, other.var))

    def to_dict(self) -> dict:
        return {"speaker": self.speaker, "mean": self.mean.tolist(), "var": self.var.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "SpeakerGaussian":
        return cls(data["speaker"], np.asarray(data["mean"]), np.asarray(data["var"]))


def _as_matrix(embeddings) -> np.ndarray:
    rows = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if not rows:
        raise EmptyEmbeddingsError("at least one embedding is required")
    for i, row in enumerate(rows):
        if row.shape != (EMBEDDING_DIM,):
            raise EmbeddingDimensionError(
                f"embedding {i} has shape {row.shape}, expected ({EMBEDDING_DIM},)"
            )
    return np.stack(rows)


def fit_speaker_gaussian(embeddings: Iterable, speaker: str = "") -> SpeakerGaussian:
    """Sample mean and per-dimension sample variance (ddof=1), floored."""
    x = _as_matrix(embeddings)
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1) if len(x) > 1 else np.full(EMBEDDING_DIM, VAR_FLOOR)
    return SpeakerGaussian(speaker, mean, var)


def draw_training_embedding(g: SpeakerGaussian, rng: np.random.Generator) -> np.ndarray:
    return g.mean + np.sqrt(g.var) * rng.standard_normal(EMBEDDING_DIM)


def inference_embedding(g: SpeakerGaussian) -> np.ndarray:
    return g.mean.copy()


def fit_speaker_gaussians(
    embeddings: Mapping[str, np.ndarray], speaker_of: Mapping[str, str],
    utt_ids: Iterable[str] | None = None,
) -> dict[str, SpeakerGaussian]:
    """Fit one Gaussian per speaker from per-utterance embeddings.

    ``utt_ids`` restricts fitting to a subset, e.g. the training subset.
    """
    ids = sorted(speaker_of) if utt_ids is None else sorted(utt_ids)
    grouped: dict[str, list[np.ndarray]] = defaultdict(list)
    for utt_id in ids:
        if utt_id not in embeddings:
            raise SpeakerSpaceError(f"no embedding for utterance {utt_id!r}")
        grouped[speaker_of[utt_id]].append(embeddings[utt_id])
    return {spk: fit_speaker_gaussian(vs, spk) for spk, vs in sorted(grouped.items())}


# -- files -------------------------------------------------------------------


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Read ``utt_id,v1,...,v128`` rows. A header row starting with ``utt_id`` is skipped."""
    out: dict[str, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0] == "utt_id"):
                continue
            if len(row) != EMBEDDING_DIM + 1:
                raise EmbeddingDimensionError(
                    f"{path}:{lineno}: expected {EMBEDDING_DIM} values, got {len(row) - 1}"
                )
            if row[0] in out:
                raise SpeakerSpaceError(f"{path}:{lineno}: duplicate utterance {row[0]!r}")
            try:
                out[row[0]] = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise SpeakerSpaceError(f"{path}:{lineno}: {exc}") from None
    return out


def save_embeddings(path: str | Path, embeddings: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for utt_id in sorted(embeddings):
            vec = np.asarray(embeddings[utt_id], dtype=np.float64)
            if vec.shape != (EMBEDDING_DIM,):
                raise EmbeddingDimensionError(f"{utt_id}: shape {vec.shape}")
            writer.writerow([utt_id, *(repr(float(v)) for v in vec)])


def synthetic_dvectors(
    speaker_of: Mapping[str, str], seed: int = 0, jitter: float = 0.05
) -> dict[str, np.ndarray]:
    """Stand-in d-vectors: a unit-norm direction per speaker plus per-utterance jitter.

    Each speaker and each utterance draws from its own stream keyed on its
    name, so adding utterances never changes existing vectors.
    """
    centres = {}
    for spk in sorted(set(speaker_of.values())):
        rng = np.random.default_rng([seed, zlib.crc32(spk.encode())])
        v = rng.standard_normal(EMBEDDING_DIM)
        centres[spk] = v / np.linalg.norm(v)
    out = {}
    for utt_id in sorted(speaker_of):
        rng = np.random.default_rng([seed, zlib.crc32(utt_id.encode()), 1])
        out[utt_id] = centres[speaker_of[utt_id]] + jitter * rng.standard_normal(EMBEDDING_DIM)
    return out

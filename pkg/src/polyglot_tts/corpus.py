"""Utterance manifests, training subsets and acoustic target frames."""

from __future__ import annotations

import json
import wave
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.io import wavfile

from .phones import (
    PhoneVocabulary,
    RuleTable,
    UnifiedPhoneSequence,
    default_rule_table,
    parse_unified,
    validate_sequence,
)

SAMPLE_RATE = 24000
N_MELS = 80
FRAME_DIM = N_MELS + 1
WIN_LENGTH = 600  # 25 ms
HOP_LENGTH = 240  # 10 ms
N_FFT = 1024
F_MIN = 0.0
F_MAX = 12000.0
LOG_FLOOR = 1e-5
LOG_FLOOR_VALUE = float(np.log(LOG_FLOOR))


class CorpusError(ValueError):
    pass


class DuplicateIdError(CorpusError):
    pass


class MissingAudioError(CorpusError):
    pass


class SampleRateError(CorpusError):
    pass


class AudioFormatError(CorpusError):
    pass


class InvalidPhoneSequenceError(CorpusError):
    pass


class EmptyCorpusError(CorpusError):
    pass


class EmptyAudioError(CorpusError):
    pass


# ---------------------------------------------------------------------------
# audio


def read_wav(path: str | Path) -> np.ndarray:
    """Read a 24 kHz mono PCM16 file as float32 samples in [-1, 1)."""
    sr, data = wavfile.read(str(path))
    if sr != SAMPLE_RATE:
        raise SampleRateError(f"{path}: sample rate {sr}, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype != np.int16:
        raise AudioFormatError(f"{path}: expected PCM16, got {data.dtype}")
    return (data.astype(np.float32) / 32768.0)


def write_wav(path: str | Path, audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(audio, dtype=np.float64) * 32767.0), -32768, 32767)
    wavfile.write(str(path), sample_rate, pcm.astype(np.int16))


def check_wav_header(path: Path) -> None:
    try:
        with wave.open(str(path), "rb") as w:
            sr, nch, width = w.getframerate(), w.getnchannels(), w.getsampwidth()
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if sr != SAMPLE_RATE:
        raise SampleRateError(f"{path}: sample rate {sr}, expected {SAMPLE_RATE}")
    if nch != 1 or width != 2:
        raise AudioFormatError(f"{path}: expected mono PCM16, got {nch} ch x {8 * width} bit")


# ---------------------------------------------------------------------------
# features


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = freq / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    log_region = freq >= min_log_hz
    return np.where(
        log_region, min_log_mel + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep, mels
    )


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        mels >= min_log_mel, min_log_hz * np.exp(logstep * (mels - min_log_mel)), f_sp * mels
    )


def mel_filterbank(
    sr: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    fmin: float = F_MIN,
    fmax: float = F_MAX,
) -> np.ndarray:
    """Triangular, area-normalised mel filters, shape (n_mels, 1 + n_fft // 2)."""
    fft_freqs = np.linspace(0.0, sr / 2.0, 1 + n_fft // 2)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def analysis_window(win_length: int = WIN_LENGTH, n_fft: int = N_FFT) -> np.ndarray:
    """Periodic Hann window of ``win_length`` centred in an ``n_fft`` frame."""
    n = np.arange(win_length)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    left = (n_fft - win_length) // 2
    out = np.zeros(n_fft)
    out[left:left + win_length] = win
    return out


def stft(audio: np.ndarray, n_fft: int = N_FFT, hop: int = HOP_LENGTH,
         win_length: int = WIN_LENGTH) -> np.ndarray:
    """Centred STFT with zero padding; returns complex (frames, 1 + n_fft // 2)."""
    audio = np.asarray(audio, dtype=np.float64)
    padded = np.pad(audio, n_fft // 2)
    n_frames = 1 + (len(padded) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(padded[idx] * analysis_window(win_length, n_fft), axis=1)


def istft(spec: np.ndarray, hop: int = HOP_LENGTH, win_length: int = WIN_LENGTH,
          length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n_fft = 2 * (spec.shape[1] - 1)
    win = analysis_window(win_length, n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win
    n_frames = spec.shape[0]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        out[t * hop:t * hop + n_fft] += frames[t]
        norm[t * hop:t * hop + n_fft] += win ** 2
    out = out / np.where(norm > 1e-10, norm, 1.0)
    out = out[n_fft // 2:]
    if length is None:
        length = hop * (n_frames - 1)
    out = out[:length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


_FILTERBANK = None


def _filterbank() -> np.ndarray:
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
    return _FILTERBANK


def log_mel(audio: np.ndarray) -> np.ndarray:
    power = np.abs(stft(audio)) ** 2
    return np.log(np.maximum(power @ _filterbank().T, LOG_FLOOR))


def compute_frames(audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Acoustic targets for one utterance.

    Returns a float32 array of shape (frames, 81): 80 log-mel energies and
    an endpoint flag that is 1 on the final frame only.
    """
    if sample_rate != SAMPLE_RATE:
        raise SampleRateError(f"sample rate {sample_rate}, expected {SAMPLE_RATE}")
    audio = np.asarray(audio)
    if audio.ndim != 1 or audio.size == 0:
        raise EmptyAudioError("audio must be a non-empty mono signal")
    mel = log_mel(audio)
    endpoint = np.zeros((mel.shape[0], 1))
    endpoint[-1] = 1.0
    return np.concatenate([mel, endpoint], axis=1).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    audio: Path
    phones: UnifiedPhoneSequence
    speaker: str
    locale: str


@dataclass
class Corpus:
    records: tuple[UtteranceRecord, ...]
    by_id: dict[str, UtteranceRecord] = field(init=False, repr=False)

    def __post_init__(self):
        self.records = tuple(self.records)
        self.by_id = {}
        for rec in self.records:
            if rec.utt_id in self.by_id:
                raise DuplicateIdError(f"duplicate utt_id {rec.utt_id!r}")
            self.by_id[rec.utt_id] = rec

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, utt_id: str) -> UtteranceRecord:
        return self.by_id[utt_id]

    @property
    def speakers(self) -> list[str]:
        return sorted({r.speaker for r in self.records})

    @property
    def locales(self) -> list[str]:
        return sorted({r.locale for r in self.records})

    def speaker_locale(self, speaker: str) -> str:
        return next(r.locale for r in self.records if r.speaker == speaker)

    def ids_by_speaker(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for r in self.records:
            out.setdefault(r.speaker, []).append(r.utt_id)
        return {k: sorted(v) for k, v in sorted(out.items())}


def load_manifest(path: str | Path, rules: RuleTable | None = None,
                  check_audio: bool = True) -> Corpus:
    """Read a JSON Lines manifest; audio paths are relative to the manifest."""
    path = Path(path)
    rules = rules or default_rule_table()
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                utt_id = row["utt_id"]
                audio = path.parent / row["audio_path"]
                speaker, locale, phones = row["speaker"], row["locale"], row["phones"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed manifest row ({exc})") from exc
            if utt_id in seen:
                raise DuplicateIdError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
            seen.add(utt_id)
            seq = parse_unified(phones, rules)
            report = validate_sequence(seq, rules)
            if report or len(seq) == 0:
                raise InvalidPhoneSequenceError(
                    f"{path}:{lineno}: invalid phones for {utt_id!r}: {report or 'empty'}"
                )
            if check_audio:
                if not audio.is_file():
                    raise MissingAudioError(f"{path}:{lineno}: missing audio {audio}")
                check_wav_header(audio)
            records.append(UtteranceRecord(utt_id, audio, seq, speaker, locale))
    return Corpus(tuple(records))


def write_manifest(path: str | Path, records: Sequence[UtteranceRecord]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            try:
                audio = r.audio.relative_to(path.parent)
            except ValueError:
                audio = r.audio
            row = {
                "utt_id": r.utt_id,
                "audio_path": str(audio),
                "speaker": r.speaker,
                "locale": r.locale,
                "phones": str(r.phones),
            }
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# training subsets


@dataclass(frozen=True)
class TrainingSubset:
    ids_by_speaker: Mapping[str, tuple[str, ...]]
    seed: int
    n_per_speaker: int

    @property
    def all_ids(self) -> list[str]:
        return sorted(i for ids in self.ids_by_speaker.values() for i in ids)

    def __len__(self) -> int:
        return sum(len(v) for v in self.ids_by_speaker.values())

    def ids_for(self, speaker: str) -> tuple[str, ...]:
        return self.ids_by_speaker[speaker]

    def save(self, path: str | Path) -> None:
        lines = [f"# seed={self.seed} n_per_speaker={self.n_per_speaker}"]
        lines += self.all_ids
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, corpus: Corpus) -> "TrainingSubset":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#"):
            raise CorpusError(f"{path}: missing subset header")
        header = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split())
        by_spk: dict[str, list[str]] = {}
        for utt_id in (l.strip() for l in lines[1:]):
            if not utt_id:
                continue
            if utt_id not in corpus.by_id:
                raise CorpusError(f"{path}: {utt_id!r} not in corpus")
            by_spk.setdefault(corpus[utt_id].speaker, []).append(utt_id)
        return cls(
            {k: tuple(sorted(v)) for k, v in sorted(by_spk.items())},
            int(header["seed"]),
            int(header["n_per_speaker"]),
        )


def _speaker_rng(seed: int, speaker: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(speaker.encode())]))


def select_training_subset(corpus: Corpus, n_per_speaker: int, seed: int) -> TrainingSubset:
    """Uniformly choose ``min(n, available)`` utterances per speaker.

    Each speaker draws from its own seeded stream, so the choice for one
    speaker does not depend on which other speakers are present.
    """
    if n_per_speaker < 1:
        raise ValueError("n_per_speaker must be >= 1")
    if len(corpus) == 0:
        raise EmptyCorpusError("corpus has no utterances")
    chosen = {}
    for spk, ids in corpus.ids_by_speaker().items():
        k = min(n_per_speaker, len(ids))
        pick = _speaker_rng(seed, spk).choice(len(ids), size=k, replace=False)
        chosen[spk] = tuple(sorted(ids[i] for i in pick))
    return TrainingSubset(chosen, seed, n_per_speaker)


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class Example:
    utt_id: str
    phone_ids: np.ndarray
    frames: np.ndarray
    speaker: str
    locale: str


@dataclass
class Batch:
    utt_ids: list[str]
    phone_ids: np.ndarray  # (B, N) int64, 0-padded
    phone_lengths: np.ndarray  # (B,)
    frames: np.ndarray  # (B, T, 81), T a multiple of the reduction factor
    frame_lengths: np.ndarray  # (B,) true lengths before grouping
    step_lengths: np.ndarray  # (B,) decoder steps
    speakers: list[str]
    locales: list[str]
    reduction: int = 2

    def __len__(self) -> int:
        return len(self.utt_ids)

    @property
    def frame_mask(self) -> np.ndarray:
        """True on real frames, including the silent frame added for grouping."""
        t = np.arange(self.frames.shape[1])
        return t[None, :] < (self.step_lengths * self.reduction)[:, None]


def silent_frame() -> np.ndarray:
    frame = np.full(FRAME_DIM, LOG_FLOOR_VALUE, dtype=np.float32)
    frame[-1] = 1.0
    return frame


def group_frames(frames: np.ndarray, reduction: int = 2) -> np.ndarray:
    """Pad with silent end frames so the length is a multiple of ``reduction``."""
    extra = (-len(frames)) % reduction
    if extra:
        frames = np.concatenate([frames, np.tile(silent_frame(), (extra, 1))])
    return frames


def collate(examples: Sequence[Example], reduction: int = 2) -> Batch:
    grouped = [group_frames(e.frames, reduction) for e in examples]
    n_max = max(len(e.phone_ids) for e in examples)
    t_max = max(len(g) for g in grouped)
    phone_ids = np.zeros((len(examples), n_max), dtype=np.int64)
    # padding past an utterance's end is silence with the endpoint raised
    frames = np.tile(silent_frame(), (len(examples), t_max, 1))
    for b, (e, g) in enumerate(zip(examples, grouped)):
        phone_ids[b, :len(e.phone_ids)] = e.phone_ids
        frames[b, :len(g)] = g
    return Batch(
        utt_ids=[e.utt_id for e in examples],
        phone_ids=phone_ids,
        phone_lengths=np.array([len(e.phone_ids) for e in examples], dtype=np.int64),
        frames=frames,
        frame_lengths=np.array([len(e.frames) for e in examples], dtype=np.int64),
        step_lengths=np.array([len(g) // reduction for g in grouped], dtype=np.int64),
        speakers=[e.speaker for e in examples],
        locales=[e.locale for e in examples],
        reduction=reduction,
    )


def make_batches(examples: Sequence[Example], batch_size: int, seed: int,
                 reduction: int = 2) -> Iterator[Batch]:
    """Yield padded batches in an order fixed by ``seed``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ordered = sorted(examples, key=lambda e: e.utt_id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    for start in range(0, len(ordered), batch_size):
        yield collate([ordered[i] for i in perm[start:start + batch_size]], reduction)


def build_examples(corpus: Corpus, utt_ids: Sequence[str], vocab: PhoneVocabulary,
                   frames: Mapping[str, np.ndarray]) -> list[Example]:
    out = []
    for utt_id in utt_ids:
        rec = corpus[utt_id]
        out.append(Example(
            utt_id=utt_id,
            phone_ids=np.asarray(vocab.encode(rec.phones), dtype=np.int64),
            frames=frames[utt_id],
            speaker=rec.speaker,
            locale=rec.locale,
        ))
    return out


def featurize(corpus: Corpus, out_dir: str | Path,
              utt_ids: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Compute frames for every utterance and store them as ``<utt_id>.npy``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feats = {}
    for utt_id in utt_ids if utt_ids is not None else [r.utt_id for r in corpus.records]:
        feats[utt_id] = compute_frames(read_wav(corpus[utt_id].audio))
        np.save(out_dir / f"{utt_id}.npy", feats[utt_id])
    return feats


def load_features(feature_dir: str | Path, utt_ids: Sequence[str]) -> dict[str, np.ndarray]:
    feature_dir = Path(feature_dir)
    out = {}
    for utt_id in utt_ids:
        path = feature_dir / f"{utt_id}.npy"
        if not path.is_file():
            raise MissingAudioError(f"no features for {utt_id!r} in {feature_dir}")
        out[utt_id] = np.load(path)
    return out

"""Autoregressive inference and a developer-listening waveform path."""

from __future__ import annotations

import struct
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .corpus import HOP_LENGTH, LOG_FLOOR, N_MELS, istft, mel_filterbank, stft
from .model import AcousticModel
from .phones import PhoneVocabulary, UnifiedPhoneSequence
from .speakers import MissingSpeakerError, SpeakerGaussian, inference_embedding
from .training import model_from_checkpoint

GRIFFIN_LIM_ITERS = 64
_MEL_HEADER = struct.Struct("<II")


class SynthesisError(ValueError):
    pass


class EmptyPhonesError(SynthesisError):
    pass


@dataclass(frozen=True)
class SynthesisRequest:
    phones: UnifiedPhoneSequence
    voice: str
    language_locale: str
    max_steps: int | None = None
    stop_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.stop_threshold < 1.0:
            raise SynthesisError("stop_threshold must lie in (0, 1)")
        if self.max_steps is not None and self.max_steps < 1:
            raise SynthesisError("max_steps must be positive")

    @property
    def step_limit(self) -> int:
        return self.max_steps if self.max_steps is not None else 40 * len(self.phones.tokens)


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    mel: np.ndarray  # (T, 80) after the post-net
    mel_before: np.ndarray  # (T, 80) decoder output
    endpoint: np.ndarray  # (T,) real-valued endpoint channel
    attention: np.ndarray  # (steps, n_tokens)
    stopped: bool  # False when the step limit was hit first
    steps: int

    @property
    def termination(self) -> str:
        return "stop_flag" if self.stopped else "max_steps"


class Synthesizer:
    """A read-only model plus the tables needed to condition it."""

    def __init__(self, model: AcousticModel, vocab: PhoneVocabulary, locales: Sequence[str],
                 speakers: Mapping[str, SpeakerGaussian]):
        self.model = model.eval()
        self.vocab = vocab
        self.locales = list(locales)
        self.speakers = dict(speakers)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Synthesizer":
        return cls(model_from_checkpoint(ckpt), PhoneVocabulary(ckpt.vocab), ckpt.locales,
                   ckpt.speakers)

    def conditioning(self, request: SynthesisRequest) -> dict:
        """Latent and speaker inputs: zeros for the resVAE latent, the Gaussian mean for SE."""
        cfg = self.model.config
        out = {"z": None, "se": None, "locale_id": None}
        if cfg.use_resvae:
            out["z"] = torch.zeros(1, cfg.resvae_latent_dim)
        if cfg.use_se_le:
            if request.voice not in self.speakers:
                raise MissingSpeakerError(f"no speaker Gaussian for voice {request.voice!r}")
            se = inference_embedding(self.speakers[request.voice])
            out["se"] = torch.from_numpy(se).float().unsqueeze(0)
            if request.language_locale not in self.locales:
                raise SynthesisError(f"locale {request.language_locale!r} unknown to the model")
            out["locale_id"] = torch.tensor([self.locales.index(request.language_locale)])
        return out

    @torch.no_grad()
    def __call__(self, request: SynthesisRequest,
                 observer: Callable[[dict], None] | None = None) -> SynthesisResult:
        if not request.phones.tokens:
            raise EmptyPhonesError("empty phone sequence")
        model = self.model
        cfg = model.config
        ids = torch.tensor([self.vocab.encode(request.phones)])
        cond = self.conditioning(request)
        memory = model.encode(ids, locale_ids=cond["locale_id"])
        processed = model.attention.memory(memory)
        gen = torch.Generator().manual_seed(request.seed)

        prev = memory.new_zeros((1, cfg.n_mels))
        state = model.initial_state(memory)
        frames, align = [], []
        stopped = False
        steps = 0
        for steps in range(1, request.step_limit + 1):
            if observer is not None:
                observer({"step": steps, "z": cond["z"], "se": cond["se"]})
            out, _, state = model.decoder_step(prev, state, memory, processed, z=cond["z"],
                                               se=cond["se"], generator=gen)
            align.append(state.attention.weights[0])
            step_frames = out[0]
            done = (step_frames[:, -1] > request.stop_threshold).nonzero()
            if len(done):
                frames.append(step_frames[:int(done[0]) + 1])
                stopped = True
                break
            frames.append(step_frames)
            prev = step_frames[-1:, :cfg.n_mels]

        before = torch.cat(frames)
        mel_after = model.postnet(before[None, :, :cfg.n_mels])[0]
        return SynthesisResult(
            mel=mel_after.numpy().astype(np.float32),
            mel_before=before[:, :cfg.n_mels].numpy().astype(np.float32),
            endpoint=before[:, -1].numpy().astype(np.float32),
            attention=torch.stack(align).numpy(),
            stopped=stopped,
            steps=steps,
        )


def synthesize_mel(source: Checkpoint | Synthesizer, request: SynthesisRequest,
                   observer: Callable[[dict], None] | None = None) -> SynthesisResult:
    synth = source if isinstance(source, Synthesizer) else Synthesizer.from_checkpoint(source)
    return synth(request, observer)


# -- waveform ----------------------------------------------------------------


def mel_to_waveform(mel: np.ndarray, n_iter: int = GRIFFIN_LIM_ITERS, seed: int = 0) -> np.ndarray:
    """Log-mel (T, 80) to 24 kHz audio via pseudo-inverse and Griffin-Lim."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise SynthesisError(f"expected (frames, {N_MELS}) mel, got {mel.shape}")
    # energies at the log floor only say "at most the floor"; read them as silence
    energy = np.maximum(np.exp(mel) - LOG_FLOOR, 0.0)
    power = np.maximum(energy @ np.linalg.pinv(mel_filterbank()).T, 0.0)
    magnitude = np.sqrt(power)
    length = HOP_LENGTH * (len(mel) - 1)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    audio = istft(magnitude * phase, length=length)
    for _ in range(n_iter):
        spec = stft(audio)
        phase = np.exp(1j * np.angle(spec))
        audio = istft(magnitude * phase, length=length)
    return audio


# -- files -------------------------------------------------------------------


def write_mel(path: str | Path, mel: np.ndarray) -> None:
    """Little-endian u32 frame count, u32 dim, then float32 frames row by row."""
    mel = np.ascontiguousarray(mel, dtype="<f4")
    if mel.ndim != 2:
        raise SynthesisError("mel must be 2-D")
    Path(path).write_bytes(_MEL_HEADER.pack(*mel.shape) + mel.tobytes())


def read_mel(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _MEL_HEADER.size:
        raise SynthesisError(f"{path}: too short for a mel header")
    frames, dim = _MEL_HEADER.unpack_from(data)
    body = data[_MEL_HEADER.size:]
    if len(body) != 4 * frames * dim:
        raise SynthesisError(f"{path}: expected {frames}x{dim} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(frames, dim).copy()


def write_attention(path: str | Path, attention: np.ndarray) -> None:
    np.save(path, np.asarray(attention, dtype=np.float32))


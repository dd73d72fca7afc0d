"""Sequence-to-sequence phone -> mel acoustic model.

Three variants share one implementation and are selected by
:class:`ModelVariantConfig`:

* ``baseline``: encoder, stepwise monotonic attention, decoder, post-net.
* ``resvae``: adds a residual VAE whose latent is concatenated to the
  decoder input during training and replaced by zeros at inference.
* ``resvae_se_le``: additionally conditions on a speaker embedding (decoder
  input) and a locale embedding (concatenated to the encoder states).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import LOG_FLOOR_VALUE

__all__ = [
    "ModelVariantConfig",
    "InvalidConfigError",
    "AcousticModel",
    "AttentionState",
    "DecoderState",
    "LatentPosterior",
    "ModelOutputs",
    "LossBreakdown",
    "build_model",
    "attention_step",
    "kl_divergence",
    "reparameterize",
    "compute_losses",
    "count_parameters",
]

# fixed affine between log-mel [log floor, 0] and the decoder's working range [-1, 1];
# without it the output layer needs ~1e4 Adam steps just to reach the floor
MEL_CENTER = 0.5 * LOG_FLOOR_VALUE
MEL_SCALE = -0.5 * LOG_FLOOR_VALUE

VARIANTS = ("baseline", "resvae", "resvae_se_le")


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelVariantConfig:
    phone_embed_dim: int = 512
    encoder_conv_layers: int = 3
    encoder_kernel_size: int = 5
    encoder_bilstm_dim: int = 512  # both directions together
    encoder_dropout: float = 0.5
    attention: str = "stepwise_monotonic"
    attention_dim: int = 128
    attention_noise_std: float = 2.0
    attention_bias_init: float = 1.5
    prenet_layers: int = 2
    prenet_dim: int = 256
    prenet_dropout: float = 0.5
    decoder_lstm_layers: int = 2
    decoder_lstm_dim: int = 1024
    postnet_conv_layers: int = 5
    postnet_dim: int = 512
    postnet_kernel_size: int = 5
    postnet_dropout: float = 0.5
    postnet_zero_init: bool = True
    reduction_factor: int = 2
    use_resvae: bool = False
    resvae_latent_dim: int = 16
    resvae_channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    resvae_gru_dim: int = 128
    resvae_ff_dim: int = 128
    use_se_le: bool = False
    se_dim: int = 128
    le_dim: int = 32
    n_mels: int = 80
    output_dim: int = 81
    scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "resvae_channels", tuple(self.resvae_channels))

    @property
    def variant(self) -> str:
        if self.use_se_le:
            return "resvae_se_le"
        return "resvae" if self.use_resvae else "baseline"

    @property
    def memory_dim(self) -> int:
        return self.encoder_bilstm_dim + (self.le_dim if self.use_se_le else 0)

    @property
    def decoder_input_dim(self) -> int:
        dim = self.prenet_dim + self.memory_dim
        if self.use_se_le:
            dim += self.se_dim
        if self.use_resvae:
            dim += self.resvae_latent_dim
        return dim

    def validate(self) -> "ModelVariantConfig":
        if self.n_mels != 80 or self.output_dim != 81:
            raise InvalidConfigError("frames are 80 mel bins + 1 endpoint flag (output_dim 81)")
        if self.use_se_le and not self.use_resvae:
            raise InvalidConfigError("speaker/locale embeddings require the resVAE")
        if self.attention != "stepwise_monotonic":
            raise InvalidConfigError(f"unsupported attention {self.attention!r}")
        if self.encoder_bilstm_dim % 2:
            raise InvalidConfigError("encoder_bilstm_dim must be even")
        if self.encoder_kernel_size % 2 == 0 or self.postnet_kernel_size % 2 == 0:
            raise InvalidConfigError("convolution kernels must have odd width")
        if self.postnet_conv_layers < 2 or self.decoder_lstm_layers < 1 or self.prenet_layers < 1:
            raise InvalidConfigError("too few layers")
        if not self.resvae_channels:
            raise InvalidConfigError("resvae_channels must not be empty")
        ints = [f.name for f in dataclasses.fields(self) if f.type in ("int", int)]
        if any(getattr(self, n) < 1 for n in ints):
            raise InvalidConfigError("all dimensions must be positive")
        return self

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelVariantConfig":
        if variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        flags = {
            "baseline": dict(use_resvae=False, use_se_le=False),
            "resvae": dict(use_resvae=True, use_se_le=False),
            "resvae_se_le": dict(use_resvae=True, use_se_le=True),
        }[variant]
        return cls(**{**flags, **overrides})

    def scaled(self, divisor: int) -> "ModelVariantConfig":
        """Shrink internal widths by ``divisor``.

        Interface sizes fixed by the data (mel bins, latent, speaker and
        locale embedding sizes) are kept.
        """
        def d(x):
            return max(1, x // divisor)

        return dataclasses.replace(
            self,
            phone_embed_dim=d(self.phone_embed_dim),
            encoder_bilstm_dim=2 * max(1, self.encoder_bilstm_dim // (2 * divisor)),
            attention_dim=d(self.attention_dim),
            prenet_dim=d(self.prenet_dim),
            decoder_lstm_dim=d(self.decoder_lstm_dim),
            postnet_dim=d(self.postnet_dim),
            resvae_channels=tuple(d(c) for c in self.resvae_channels),
            resvae_gru_dim=d(self.resvae_gru_dim),
            resvae_ff_dim=d(self.resvae_ff_dim),
            scale=self.scale * divisor,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["resvae_channels"] = list(self.resvae_channels)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelVariantConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# state containers


class AttentionState(NamedTuple):
    weights: Tensor  # (B, N), sums to 1
    context: Tensor  # (B, memory_dim)


class DecoderState(NamedTuple):
    lstm: tuple[tuple[Tensor, Tensor], ...]
    attention: AttentionState


class LatentPosterior(NamedTuple):
    mu: Tensor
    logvar: Tensor


@dataclass
class ModelOutputs:
    mel_before: Tensor  # (B, T, n_mels)
    endpoint: Tensor  # (B, T) real-valued endpoint channel
    mel_after: Tensor  # (B, T, n_mels)
    alignments: Tensor  # (B, steps, N)
    posterior: LatentPosterior | None = None
    z: Tensor | None = None

    @property
    def frames_before(self) -> Tensor:
        """Pre-post-net 81-dim output: mel and endpoint."""
        return torch.cat([self.mel_before, self.endpoint.unsqueeze(-1)], dim=-1)


@dataclass
class LossBreakdown:
    l1_decoder: Tensor
    l2_postnet: Tensor
    kld: Tensor
    total: Tensor
    beta: float = 1.0

    def as_floats(self) -> dict[str, float]:
        return {
            "l1_decoder": float(self.l1_decoder.detach()),
            "l2_postnet": float(self.l2_postnet.detach()),
            "kld": float(self.kld.detach()),
            "total": float(self.total.detach()),
        }


# ---------------------------------------------------------------------------
# functional pieces


def attention_step(weights: Tensor, stay_probs: Tensor,
                   lengths: Tensor | None = None) -> Tensor:
    """One step of the stepwise monotonic recurrence.

    ``a'(j) = a(j) p(j) + a(j-1) (1 - p(j-1))``. Mass leaving the last valid
    position stays there, so the weights keep summing to one.
    """
    n = weights.shape[-1]
    if lengths is None:
        last = torch.full(weights.shape[:-1], n - 1, dtype=torch.long, device=weights.device)
    else:
        last = lengths - 1
    pos = torch.arange(n, device=weights.device)
    at_or_past_end = pos.unsqueeze(0) >= last.unsqueeze(-1)
    p = torch.where(at_or_past_end, torch.ones_like(stay_probs), stay_probs)
    move = weights * (1.0 - p)
    return weights * p + F.pad(move[..., :-1], (1, 0))


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)) per row."""
    # expm1 keeps e^lv - 1 - lv >= 0 in floating point for tiny lv
    return 0.5 * (mu.pow(2) + (torch.expm1(logvar) - logvar)).sum(dim=-1)


def reparameterize(mu: Tensor, logvar: Tensor, eps: Tensor | None = None) -> Tensor:
    if eps is None:
        eps = torch.randn_like(mu)
    return mu + torch.exp(0.5 * logvar) * eps


def _masked_mean(values: Tensor, mask: Tensor) -> Tensor:
    m = mask.to(values.dtype).unsqueeze(-1)
    return (values * m).sum() / (m.sum() * values.shape[-1])


def compute_losses(outputs: ModelOutputs, targets: Tensor, mask: Tensor,
                   posterior: LatentPosterior | None = None, beta: float = 1.0,
                   endpoint_mask: Tensor | None = None) -> LossBreakdown:
    """L1 on decoder output (mel + endpoint), L2 on post-net mel, weighted KLD.

    ``mask`` marks the frames whose mel is supervised. ``endpoint_mask``
    (default: ``mask``) marks the frames whose endpoint is; training passes
    the whole padded batch so the flag is also learned past the end.
    """
    pred = outputs.frames_before
    if endpoint_mask is None:
        endpoint_mask = mask
    if (pred.shape != targets.shape or mask.shape != targets.shape[:2]
            or endpoint_mask.shape != mask.shape):
        raise ValueError(
            f"shape mismatch: outputs {tuple(pred.shape)}, targets {tuple(targets.shape)}, "
            f"mask {tuple(mask.shape)}, endpoint mask {tuple(endpoint_mask.shape)}"
        )
    n_mels = outputs.mel_after.shape[-1]
    diff = (pred - targets).abs()
    m = mask.to(diff.dtype)
    e = endpoint_mask.to(diff.dtype)
    l1 = (((diff[..., :n_mels] * m.unsqueeze(-1)).sum() + (diff[..., n_mels] * e).sum())
          / (m.sum() * n_mels + e.sum()))
    l2 = _masked_mean((outputs.mel_after - targets[..., :n_mels]).pow(2), mask)
    if posterior is None:
        kld = torch.zeros((), dtype=l1.dtype, device=l1.device)
    else:
        kld = kl_divergence(posterior.mu, posterior.logvar).mean()
    return LossBreakdown(l1, l2, kld, l1 + l2 + beta * kld, beta)


def _dropout(x: Tensor, p: float, generator: torch.Generator | None = None) -> Tensor:
    # the pre-net keeps dropout on at inference, so it cannot follow module.training
    if p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


# ---------------------------------------------------------------------------
# modules


class Encoder(nn.Module):
    """Phone look-up table, conv stack and bi-LSTM."""

    def __init__(self, cfg: ModelVariantConfig, inventory_size: int):
        super().__init__()
        e = cfg.phone_embed_dim
        self.embedding = nn.Embedding(inventory_size, e)
        self.convs = nn.ModuleList(
            nn.Conv1d(e, e, cfg.encoder_kernel_size, padding=cfg.encoder_kernel_size // 2)
            for _ in range(cfg.encoder_conv_layers)
        )
        self.norms = nn.ModuleList(nn.BatchNorm1d(e) for _ in range(cfg.encoder_conv_layers))
        self.lstm = nn.LSTM(e, cfg.encoder_bilstm_dim // 2, batch_first=True, bidirectional=True)
        self.dropout = cfg.encoder_dropout

    def forward(self, phone_ids: Tensor, lengths: Tensor) -> Tensor:
        x = self.embedding(phone_ids).transpose(1, 2)
        for conv, norm in zip(self.convs, self.norms):
            x = F.dropout(F.relu(norm(conv(x))), self.dropout, self.training)
        packed = pack_padded_sequence(x.transpose(1, 2), lengths.cpu(), batch_first=True,
                                      enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=phone_ids.shape[1])
        return out


class StepwiseMonotonicAttention(nn.Module):
    def __init__(self, query_dim: int, memory_dim: int, attention_dim: int, bias_init: float):
        super().__init__()
        self.query = nn.Linear(query_dim, attention_dim, bias=False)
        self.memory = nn.Linear(memory_dim, attention_dim, bias=True)
        self.v = nn.Linear(attention_dim, 1, bias=False)
        self.r = nn.Parameter(torch.tensor(float(bias_init)))

    def stay_probs(self, query: Tensor, processed_memory: Tensor, noise_std: float = 0.0) -> Tensor:
        energy = self.v(torch.tanh(self.query(query).unsqueeze(1) + processed_memory)).squeeze(-1)
        energy = energy + self.r
        if noise_std > 0.0:
            energy = energy + noise_std * torch.randn_like(energy)
        return torch.sigmoid(energy)


class ResidualVAE(nn.Module):
    """2D conv stack with batch norm, GRU, shared FF layer, mean and log-variance heads."""

    def __init__(self, cfg: ModelVariantConfig):
        super().__init__()
        chans = (1,) + cfg.resvae_channels
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(len(cfg.resvae_channels))
        )
        self.norms = nn.ModuleList(nn.BatchNorm2d(c) for c in cfg.resvae_channels)
        freq = cfg.n_mels
        for _ in cfg.resvae_channels:
            freq = (freq + 1) // 2
        self.gru = nn.GRU(chans[-1] * freq, cfg.resvae_gru_dim, batch_first=True)
        self.shared = nn.Linear(cfg.resvae_gru_dim, cfg.resvae_ff_dim)
        self.mean = nn.Linear(cfg.resvae_ff_dim, cfg.resvae_latent_dim)
        self.logvar = nn.Linear(cfg.resvae_ff_dim, cfg.resvae_latent_dim)

    def forward(self, mel: Tensor, lengths: Tensor) -> LatentPosterior:
        x = mel.unsqueeze(1)  # (B, 1, T, n_mels)
        for conv, norm in zip(self.convs, self.norms):
            x = F.relu(norm(conv(x)))
            lengths = (lengths + 1) // 2
        b, c, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        packed = pack_padded_sequence(x, lengths.clamp(min=1).cpu(), batch_first=True,
                                      enforce_sorted=False)
        _, h = self.gru(packed)
        shared = torch.tanh(self.shared(h[-1]))
        return LatentPosterior(self.mean(shared), self.logvar(shared))


class Postnet(nn.Module):
    def __init__(self, cfg: ModelVariantConfig):
        super().__init__()
        k = cfg.postnet_kernel_size
        dims = [cfg.n_mels] + [cfg.postnet_dim] * (cfg.postnet_conv_layers - 1) + [cfg.n_mels]
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], k, padding=k // 2) for i in range(len(dims) - 1)
        )
        self.norms = nn.ModuleList(nn.BatchNorm1d(d) for d in dims[1:-1])
        self.dropout = cfg.postnet_dropout
        if cfg.postnet_zero_init:
            nn.init.zeros_(self.convs[-1].weight)
            nn.init.zeros_(self.convs[-1].bias)

    def forward(self, mel: Tensor) -> Tensor:
        """Refine (B, T, n_mels); the residual is added to the input."""
        x = mel.transpose(1, 2)
        for conv, norm in zip(self.convs[:-1], self.norms):
            x = F.dropout(torch.tanh(norm(conv(x))), self.dropout, self.training)
        x = self.convs[-1](x)
        return mel + x.transpose(1, 2)


class AcousticModel(nn.Module):
    def __init__(self, cfg: ModelVariantConfig, inventory_size: int, locale_count: int):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.inventory_size = inventory_size
        self.locale_count = locale_count
        self.encoder = Encoder(cfg, inventory_size)
        if cfg.use_se_le:
            self.locale_embedding = nn.Linear(locale_count, cfg.le_dim, bias=False)
        if cfg.use_resvae:
            self.resvae = ResidualVAE(cfg)

        pdims = [cfg.n_mels] + [cfg.prenet_dim] * cfg.prenet_layers
        self.prenet = nn.ModuleList(nn.Linear(pdims[i], pdims[i + 1]) for i in range(cfg.prenet_layers))
        h = cfg.decoder_lstm_dim
        cells = [nn.LSTMCell(cfg.decoder_input_dim, h)]
        cells += [nn.LSTMCell(h + cfg.memory_dim, h) for _ in range(cfg.decoder_lstm_layers - 1)]
        self.decoder_cells = nn.ModuleList(cells)
        self.attention = StepwiseMonotonicAttention(h, cfg.memory_dim, cfg.attention_dim,
                                                    cfg.attention_bias_init)
        self.mel_proj = nn.Linear(h + cfg.memory_dim, cfg.n_mels * cfg.reduction_factor)
        self.endpoint_proj = nn.Linear(h + cfg.memory_dim, cfg.reduction_factor)
        self.postnet = Postnet(cfg)

    # -- encoder side -------------------------------------------------------

    def encode(self, phone_ids: Tensor, lengths: Tensor | None = None,
               locale_ids: Tensor | None = None) -> Tensor:
        """Per-phone states (B, N, memory_dim); LE is appended when configured."""
        if phone_ids.dim() == 1:
            phone_ids = phone_ids.unsqueeze(0)
        if phone_ids.shape[1] == 0:
            raise ValueError("empty phone sequence")
        if int(phone_ids.min()) < 0 or int(phone_ids.max()) >= self.inventory_size:
            raise ValueError("phone id out of range")
        if lengths is None:
            lengths = torch.full((phone_ids.shape[0],), phone_ids.shape[1], dtype=torch.long)
        out = self.encoder(phone_ids, lengths)
        if self.config.use_se_le:
            if locale_ids is None:
                raise ValueError("this model variant needs locale ids")
            if locale_ids.dim() == 0:
                locale_ids = locale_ids.expand(phone_ids.shape[0])
            onehot = F.one_hot(locale_ids, self.locale_count).to(out.dtype)
            le = self.locale_embedding(onehot)
            out = torch.cat([out, le.unsqueeze(1).expand(-1, out.shape[1], -1)], dim=-1)
        return out

    def resvae_encode(self, mel: Tensor, lengths: Tensor, sample: bool = True,
                      eps: Tensor | None = None) -> tuple[LatentPosterior, Tensor]:
        """Posterior over the residual latent and a reparameterised draw.

        With ``sample=False`` the module is bypassed and ``z`` is all zeros.
        """
        cfg = self.config
        if not cfg.use_resvae:
            raise InvalidConfigError("model has no resVAE")
        if not sample:
            z = mel.new_zeros((mel.shape[0], cfg.resvae_latent_dim))
            return None, z
        post = self.resvae(mel, lengths)
        return post, reparameterize(post.mu, post.logvar, eps)

    # -- decoder side -------------------------------------------------------

    def initial_state(self, memory: Tensor) -> DecoderState:
        b = memory.shape[0]
        h = self.config.decoder_lstm_dim
        zeros = memory.new_zeros((b, h))
        weights = memory.new_zeros(memory.shape[:2])
        weights[:, 0] = 1.0
        return DecoderState(
            tuple((zeros, zeros) for _ in self.decoder_cells),
            AttentionState(weights, memory[:, 0]),
        )

    def run_prenet(self, frame: Tensor, generator: torch.Generator | None = None) -> Tensor:
        x = (frame - MEL_CENTER) / MEL_SCALE
        for layer in self.prenet:
            x = _dropout(F.relu(layer(x)), self.config.prenet_dropout, generator)
        return x

    def decoder_step(
        self,
        prev_frame: Tensor,
        state: DecoderState,
        memory: Tensor,
        processed_memory: Tensor,
        memory_lengths: Tensor | None = None,
        z: Tensor | None = None,
        se: Tensor | None = None,
        attention_noise: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor, DecoderState]:
        """Emit ``reduction_factor`` frames.

        Returns frames (B, r, 81) with the endpoint score in the last
        channel, the endpoint scores again as (B, r), and the new state.
        """
        cfg = self.config
        parts = [self.run_prenet(prev_frame, generator), state.attention.context]
        if cfg.use_se_le:
            if se is None or se.shape[-1] != cfg.se_dim:
                raise ValueError(f"expected speaker embedding of dim {cfg.se_dim}")
            parts.append(se)
        if cfg.use_resvae:
            if z is None or z.shape[-1] != cfg.resvae_latent_dim:
                raise ValueError(f"expected latent of dim {cfg.resvae_latent_dim}")
            parts.append(z)
        x = torch.cat(parts, dim=-1)
        if x.shape[-1] != cfg.decoder_input_dim:
            raise ValueError(f"decoder input dim {x.shape[-1]} != {cfg.decoder_input_dim}")

        h, c = self.decoder_cells[0](x, state.lstm[0])
        new_lstm = [(h, c)]
        p = self.attention.stay_probs(h, processed_memory, attention_noise)
        weights = attention_step(state.attention.weights, p, memory_lengths)
        context = torch.bmm(weights.unsqueeze(1), memory).squeeze(1)
        out = h
        for cell, hc in zip(self.decoder_cells[1:], state.lstm[1:]):
            h, c = cell(torch.cat([out, context], dim=-1), hc)
            new_lstm.append((h, c))
            out = h
        feats = torch.cat([out, context], dim=-1)
        mel = MEL_CENTER + MEL_SCALE * self.mel_proj(feats).view(-1, cfg.reduction_factor,
                                                                  cfg.n_mels)
        # linear, not sigmoid: L1 through a saturated sigmoid cannot learn the rare 1s
        stop = self.endpoint_proj(feats)
        frames = torch.cat([mel, stop.unsqueeze(-1)], dim=-1)
        return frames, stop, DecoderState(tuple(new_lstm), AttentionState(weights, context))

    def forward(
        self,
        phone_ids: Tensor,
        phone_lengths: Tensor,
        frames: Tensor,
        frame_mask: Tensor | None = None,
        locale_ids: Tensor | None = None,
        speaker_embedding: Tensor | None = None,
        z: Tensor | None = None,
        eps: Tensor | None = None,
        attention_noise: float | None = None,
    ) -> ModelOutputs:
        """Teacher-forced pass over (B, T, 81) target frames."""
        cfg = self.config
        r = cfg.reduction_factor
        if frames.shape[1] % r:
            raise ValueError("frame count must be a multiple of the reduction factor")
        if attention_noise is None:
            attention_noise = cfg.attention_noise_std if self.training else 0.0
        if frame_mask is None:
            frame_mask = torch.ones(frames.shape[:2], dtype=torch.bool, device=frames.device)

        memory = self.encode(phone_ids, phone_lengths, locale_ids)
        processed = self.attention.memory(memory)

        posterior = None
        if cfg.use_resvae and z is None:
            mel_in = frames[..., :cfg.n_mels] * frame_mask.unsqueeze(-1).to(frames.dtype)
            posterior, z = self.resvae_encode(mel_in, frame_mask.sum(1), eps=eps)

        steps = frames.shape[1] // r
        go = frames.new_zeros((frames.shape[0], 1, cfg.n_mels))
        prev = torch.cat([go, frames[:, r - 1:-1:r, :cfg.n_mels]], dim=1)
        state = self.initial_state(memory)
        out_frames, out_stop, align = [], [], []
        for t in range(steps):
            f, lg, state = self.decoder_step(prev[:, t], state, memory, processed, phone_lengths,
                                             z=z, se=speaker_embedding,
                                             attention_noise=attention_noise)
            out_frames.append(f)
            out_stop.append(lg)
            align.append(state.attention.weights)

        b = frames.shape[0]
        before = torch.stack(out_frames, 1).reshape(b, steps * r, cfg.output_dim)
        stop = torch.stack(out_stop, 1).reshape(b, steps * r)
        mel_before = before[..., :cfg.n_mels]
        masked = mel_before * frame_mask.unsqueeze(-1).to(mel_before.dtype)
        mel_after = self.postnet(masked)
        return ModelOutputs(mel_before, stop, mel_after, torch.stack(align, 1), posterior, z)


def build_model(config: ModelVariantConfig, inventory_size: int, locale_count: int,
                rng_seed: int) -> AcousticModel:
    """Construct a model whose initial parameters depend only on the arguments."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng_seed)
        return AcousticModel(config, inventory_size, locale_count)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

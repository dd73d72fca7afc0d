"""Independent oracles shared by the test modules."""

import contextlib
import math

import numpy as np
import torch

from polyglot_tts.model import ModelVariantConfig, build_model, compute_losses

LOSS_NAMES = ("l1_decoder", "l2_postnet", "kld")


def tiny_config(variant="resvae_se_le"):
    """All internal widths <= 16, no stochastic layers."""
    return ModelVariantConfig.for_variant(
        variant,
        phone_embed_dim=8,
        encoder_bilstm_dim=8,
        encoder_dropout=0.0,
        attention_dim=8,
        attention_noise_std=0.0,
        prenet_dim=8,
        prenet_dropout=0.0,
        decoder_lstm_dim=8,
        postnet_dim=8,
        postnet_dropout=0.0,
        postnet_zero_init=False,
        resvae_channels=(2, 2, 4, 4, 4, 4),
        resvae_gru_dim=8,
        resvae_ff_dim=8,
        resvae_latent_dim=4,
        se_dim=8,
        le_dim=4,
    )


class TinyProblem:
    """A fixed double-precision batch and a tiny model (sequence length <= 6)."""

    def __init__(self, seed=0, variant="resvae_se_le"):
        torch.manual_seed(seed)
        self.cfg = tiny_config(variant)
        self.model = build_model(self.cfg, inventory_size=10, locale_count=3, rng_seed=seed).double()
        self.model.train()
        g = torch.Generator().manual_seed(seed + 1)
        b, n, t = 2, 5, 6
        self.phone_ids = torch.randint(1, 10, (b, n), generator=g)
        self.phone_lengths = torch.tensor([5, 4])
        self.frames = torch.randn(b, t, 81, generator=g, dtype=torch.float64)
        self.frames[..., 80] = torch.tensor([[0, 0, 0, 0, 0, 1], [0, 0, 0, 1, 0, 0]])
        self.mask = torch.tensor([[True] * 6, [True] * 4 + [False] * 2])
        self.locale_ids = torch.tensor([0, 2])
        self.se = torch.randn(b, self.cfg.se_dim, generator=g, dtype=torch.float64)
        self.eps = torch.randn(b, self.cfg.resvae_latent_dim, generator=g, dtype=torch.float64)
        # move every parameter off its initial value so no gradient is structurally zero
        with torch.no_grad():
            for p in self.model.parameters():
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))

    def losses(self):
        out = self.model(
            self.phone_ids, self.phone_lengths, self.frames, self.mask,
            locale_ids=self.locale_ids,
            speaker_embedding=self.se if self.cfg.use_se_le else None,
            eps=self.eps if self.cfg.use_resvae else None,
            attention_noise=0.0,
        )
        return compute_losses(out, self.frames, self.mask, out.posterior)


def relative_error(a, b, floor=1e-6):
    # conv biases feeding batch norm have an exact zero gradient; the floor
    # keeps finite-difference noise on those from reading as relative error
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(problem, h=1e-4, n_directions=2, top_coords=2, seed=0):
    """Compare autograd gradients with central differences.

    Each parameter tensor is probed along random unit directions and at
    the coordinates with the largest analytic gradient. Returns the worst
    relative error per loss component.
    """
    model = problem.model
    params = [(n, p) for n, p in model.named_parameters()]
    analytic = {}
    for name in LOSS_NAMES:
        model.zero_grad()
        loss = getattr(problem.losses(), name)
        if loss.requires_grad:
            loss.backward()
        analytic[name] = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
                          for n, p in params}

    def evaluate():
        with torch.no_grad():
            res = problem.losses()
        return {k: float(getattr(res, k)) for k in LOSS_NAMES}

    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in LOSS_NAMES}
    probes = 0
    for name, p in params:
        directions = []
        for _ in range(n_directions):
            v = torch.from_numpy(rng.standard_normal(p.shape)).to(p.dtype)
            directions.append(v / v.norm())
        for loss_name in LOSS_NAMES:
            flat = analytic[loss_name][name].abs().flatten()
            for idx in torch.topk(flat, min(top_coords, flat.numel())).indices.tolist():
                e = torch.zeros(flat.numel(), dtype=p.dtype)
                e[idx] = 1.0
                directions.append(e.view(p.shape))
        for v in directions:
            with torch.no_grad():
                p.add_(h * v)
            plus = evaluate()
            with torch.no_grad():
                p.sub_(2 * h * v)
            minus = evaluate()
            with torch.no_grad():
                p.add_(h * v)
            probes += 1
            for k in LOSS_NAMES:
                numeric = (plus[k] - minus[k]) / (2 * h)
                exact = float((analytic[k][name] * v).sum())
                worst[k] = max(worst[k], relative_error(exact, numeric))
    return worst, probes


def monte_carlo_kl(mu, logvar, n, rng):
    """Sample estimate of KL(N(mu, diag e^logvar) || N(0, I))."""
    std = np.exp(0.5 * logvar)
    x = mu + std * rng.standard_normal((n, len(mu)))
    log_q = -0.5 * np.sum(((x - mu) / std) ** 2 + logvar + math.log(2 * math.pi), axis=1)
    log_p = -0.5 * np.sum(x ** 2 + math.log(2 * math.pi), axis=1)
    return float(np.mean(log_q - log_p))


def brute_force_avg_phone_dist(probs, speaker_phones, table):
    """Double loop: sum_t P(t) * min_s (1 - cos(e_t, e_s)).

    Sums are exactly rounded, so any implementation that also rounds its
    dot products exactly must agree to the last bit.
    """
    terms = []
    for t in sorted(probs):
        et = table[t]
        best = None
        for s in sorted(speaker_phones):
            es = table[s]
            dot = math.fsum(float(a) * float(b) for a, b in zip(et, es))
            nt = math.fsum(float(a) * float(a) for a in et)
            ns = math.fsum(float(b) * float(b) for b in es)
            if s == t:
                d = 0.0
            else:
                d = min(2.0, max(0.0, 1.0 - dot / (math.sqrt(nt) * math.sqrt(ns))))
            if best is None or d < best:
                best = d
        terms.append(probs[t] * best)
    return math.fsum(terms)


ACCEPTANCE_LINES = {}


@contextlib.contextmanager
def record_criterion(number, title):
    """Record a PASS/FAIL line for one acceptance criterion; yields a note setter."""
    notes = []
    try:
        yield notes.append
    except BaseException as exc:
        detail = "; ".join(notes + [f"{type(exc).__name__}: {exc}".splitlines()[0][:160]])
        ACCEPTANCE_LINES[number] = f"criterion {number:2d} FAIL  {title} [{detail}]"
        raise
    detail = f" [{'; '.join(notes)}]" if notes else ""
    ACCEPTANCE_LINES[number] = f"criterion {number:2d} PASS  {title}{detail}"

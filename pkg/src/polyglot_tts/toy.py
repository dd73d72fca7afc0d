"""Deterministic synthetic corpus for exercising the whole pipeline.

Every unified phone is rendered as a short bundle of sinusoids whose
frequencies come from a hash of the symbol, so the phone-to-spectrum map
is fixed and learnable. Each speaker scales all frequencies by its own
factor. Stressed vowels are longer and louder.
"""

from __future__ import annotations

import json
import shutil
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import SAMPLE_RATE, write_wav
from .phones import PhoneKind, RuleTable, default_rule_table, normalize_utterance
from .speakers import save_embeddings, synthetic_dvectors

# raw (pre-normalization) phone pools; complex phones exercise the splitting rules
LOCALE_POOLS = {
    "en-US": {
        "onsets": ["p", "b", "t", "d", "k", "g", "f", "s", "m", "n", "l", "r", "w", "h", "tS", "dZ"],
        "vowels": ["i", "I", "E", "{", "A", "u", "V", "@", "ej", "ow", "aI"],
    },
    "es-ES": {
        "onsets": ["p", "b", "t", "d", "k", "g", "f", "s", "m", "n", "l", "r", "rr", "tS", "jj"],
        "vowels": ["a", "e", "i", "o", "u", "ai", "au"],
    },
}
SPEAKERS = {
    "en_a": ("en-US", 1.00),
    "en_b": ("en-US", 1.18),
    "es_a": ("es-ES", 0.92),
    "es_b": ("es-ES", 1.08),
}
DURATIONS = {PhoneKind.VOWEL: 0.09, PhoneKind.CONSONANT: 0.055,
             PhoneKind.CLOSURE_NO_RELEASE: 0.04, PhoneKind.PUNCTUATION: 0.08}
MAX_SECONDS = 2.0


@dataclass(frozen=True)
class ToyCorpus:
    root: Path
    manifest: Path
    raw_manifest: Path
    embeddings: Path
    rules: Path
    n_utterances: int


def _phone_partials(symbol: str) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(symbol.encode()))
    return np.sort(rng.uniform(250.0, 5500.0, size=3))


def render_phones(tokens, stress, rules: RuleTable, pitch: float) -> np.ndarray:
    """Concatenate per-phone tone bundles with 5 ms raised-cosine edges."""
    pieces = []
    fade = int(0.005 * SAMPLE_RATE)
    for i, sym in enumerate(tokens):
        kind = rules.kind_of(sym)
        dur = DURATIONS.get(kind, 0.05) * (1.4 if i in stress else 1.0)
        n = int(round(dur * SAMPLE_RATE))
        if kind is PhoneKind.PUNCTUATION:
            pieces.append(np.zeros(n))
            continue
        t = np.arange(n) / SAMPLE_RATE
        amp = {PhoneKind.VOWEL: 0.12, PhoneKind.CLOSURE_NO_RELEASE: 0.02}.get(kind, 0.06)
        amp *= 1.5 if i in stress else 1.0
        seg = sum(amp * np.sin(2 * np.pi * min(f * pitch, 11000.0) * t)
                  for f in _phone_partials(sym))
        env = np.ones(n)
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, fade))
        env[:fade] = ramp
        env[-fade:] = ramp[::-1]
        pieces.append(seg * env)
    return np.concatenate(pieces)


def _raw_utterance(rng: np.random.Generator, locale: str) -> str:
    pool = LOCALE_POOLS[locale]
    n_syl = int(rng.integers(2, 5))
    stressed = int(rng.integers(n_syl))
    tokens = []
    for k in range(n_syl):
        tokens.append(pool["onsets"][rng.integers(len(pool["onsets"]))])
        vowel = pool["vowels"][rng.integers(len(pool["vowels"]))]
        tokens.append(('"' + vowel) if k == stressed else vowel)
    if rng.random() < 0.3:
        tokens.append(".")
    return " ".join(tokens)


def make_toy_corpus(out_dir: str | Path, n_utterances: int = 40, seed: int = 0,
                    rules: RuleTable | None = None) -> ToyCorpus:
    """Write wavs, a raw and a unified manifest, d-vectors and the rule table.

    Utterances are spread evenly over two locales with two speakers each.
    """
    if n_utterances < len(SPEAKERS):
        raise ValueError(f"need at least {len(SPEAKERS)} utterances, one per speaker")
    rules = rules or default_rule_table()
    root = Path(out_dir)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    rules_path = root / "rules.tsv"
    with resources.as_file(resources.files("polyglot_tts").joinpath("data/default_rules.tsv")) as src:
        shutil.copyfile(src, rules_path)

    raw_rows, rows, speaker_of = [], [], {}
    names = sorted(SPEAKERS)
    for i in range(n_utterances):
        spk = names[i % len(names)]
        locale, pitch = SPEAKERS[spk]
        utt_id = f"{spk}_{i // len(names):03d}"
        rng = np.random.default_rng([seed, zlib.crc32(utt_id.encode())])
        while True:
            raw = _raw_utterance(rng, locale)
            seq = normalize_utterance(raw, locale, rules)
            audio = render_phones(seq.symbols, seq.stress_indices, rules, pitch)
            if len(audio) <= MAX_SECONDS * SAMPLE_RATE:
                break
        wav = root / "wavs" / f"{utt_id}.wav"
        write_wav(wav, audio)
        base = {"utt_id": utt_id, "audio_path": f"wavs/{wav.name}", "speaker": spk,
                "locale": locale}
        raw_rows.append({**base, "phones": raw})
        rows.append({**base, "phones": str(seq)})
        speaker_of[utt_id] = spk

    manifest = root / "manifest.jsonl"
    raw_manifest = root / "raw.jsonl"
    for path, data in ((manifest, rows), (raw_manifest, raw_rows)):
        path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in data),
                        encoding="utf-8")
    emb_path = root / "dvectors.csv"
    save_embeddings(emb_path, synthetic_dvectors(speaker_of, seed=seed))
    return ToyCorpus(root, manifest, raw_manifest, emb_path, rules_path, n_utterances)

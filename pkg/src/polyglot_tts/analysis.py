"""Phonetic distance between test material and a voice's data, and MOS statistics."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import stats

from .phones import PAD, STRESS, PhoneKind, RuleTable, UnifiedPhoneSequence

ALPHA = 0.05


class AnalysisError(ValueError):
    pass


class MissingEmbeddingError(AnalysisError):
    pass


class InsufficientDataError(AnalysisError):
    pass


# ---------------------------------------------------------------------------
# phonetic distance


def _counted(symbol: str, rules: RuleTable | None) -> bool:
    if symbol in (STRESS, PAD):
        return False
    return rules is None or rules.kind_of(symbol) is not PhoneKind.PUNCTUATION


def phone_distribution(sequences: Iterable[UnifiedPhoneSequence], rules: RuleTable | None = None,
                       uniform: bool = False) -> dict[str, float]:
    """P(t|T) over the test utterances: token relative frequency, or uniform over unique phones.

    Punctuation is skipped when ``rules`` is given.
    """
    counts = Counter(s for seq in sequences for s in seq.symbols if _counted(s, rules))
    if not counts:
        raise AnalysisError("test material contains no phones")
    if uniform:
        return {s: 1.0 / len(counts) for s in sorted(counts)}
    total = sum(counts.values())
    return {s: counts[s] / total for s in sorted(counts)}


def speaker_phone_set(sequences: Iterable[UnifiedPhoneSequence],
                      rules: RuleTable | None = None) -> frozenset[str]:
    phones = frozenset(s for seq in sequences for s in seq.symbols if _counted(s, rules))
    if not phones:
        raise AnalysisError("speaker data contains no phones")
    return phones


def _dot(u: np.ndarray, v: np.ndarray) -> float:
    # exactly rounded sums make the result independent of summation order
    return math.fsum((u * v).tolist())


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v), clamped to [0, 2]."""
    nu, nv = _dot(u, u), _dot(v, v)
    if nu == 0.0 or nv == 0.0:
        raise AnalysisError("cosine distance is undefined for a zero vector")
    return min(2.0, max(0.0, 1.0 - _dot(u, v) / (math.sqrt(nu) * math.sqrt(nv))))


def avg_phone_dist(probs: Mapping[str, float], speaker_phones: Iterable[str],
                   table: Mapping[str, np.ndarray]) -> float:
    """sum_t P(t) * min_s d(e_t, e_s); a phone the speaker has contributes 0."""
    speaker_phones = sorted(set(speaker_phones))
    if not speaker_phones:
        raise AnalysisError("speaker phone set is empty")
    missing = sorted((set(probs) | set(speaker_phones)) - set(table))
    if missing:
        raise MissingEmbeddingError(f"no embedding for {missing}")
    vecs = {s: np.asarray(table[s], dtype=np.float64) for s in set(probs) | set(speaker_phones)}
    terms = []
    for t in sorted(probs):
        best = min(0.0 if s == t else cosine_distance(vecs[t], vecs[s]) for s in speaker_phones)
        terms.append(probs[t] * best)
    return math.fsum(terms)


def embedding_table_from_checkpoint(ckpt) -> dict[str, np.ndarray]:
    """Rows of the phone look-up table keyed by symbol (padding and stress excluded)."""
    weights = ckpt.parameters["encoder.embedding.weight"].double().numpy()
    return {sym: weights[i].copy() for i, sym in enumerate(ckpt.vocab) if sym not in (PAD, STRESS)}


def load_embedding_table(path: str | Path) -> dict[str, np.ndarray]:
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                table[row[0]] = np.array([float(x) for x in row[1:]])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise AnalysisError(f"{path}:{lineno}: non-numeric embedding value") from None
    dims = {len(v) for v in table.values()}
    if len(dims) > 1:
        raise AnalysisError(f"{path}: embeddings have mixed dimensions {sorted(dims)}")
    return table


def save_embedding_table(path: str | Path, table: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for sym in sorted(table):
            writer.writerow([sym, *(repr(float(x)) for x in table[sym])])


# ---------------------------------------------------------------------------
# MOS statistics


@dataclass(frozen=True)
class RatingRecord:
    subject: str
    item: str
    system: str
    voice: str
    score: int
    z: float | None = None

    def __post_init__(self):
        if isinstance(self.score, bool) or self.score not in (1, 2, 3, 4, 5):
            raise AnalysisError(f"score must be an integer 1-5, got {self.score!r}")


def load_ratings(path: str | Path) -> list[RatingRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["subject", "item", "system", "voice", "score"]
        if reader.fieldnames != expected:
            raise AnalysisError(f"{path}: header must be {','.join(expected)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                score = int(row["score"])
            except ValueError:
                raise AnalysisError(f"{path}:{lineno}: bad score {row['score']!r}") from None
            out.append(RatingRecord(row["subject"], row["item"], row["system"], row["voice"],
                                    score))
    return out


def save_ratings(path: str | Path, records: Iterable[RatingRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "item", "system", "voice", "score"])
        for r in records:
            writer.writerow([r.subject, r.item, r.system, r.voice, r.score])


def zscore_by_subject(records: Sequence[RatingRecord]) -> list[RatingRecord]:
    """Per-subject z-scores (sample std); subjects without score variance get z = 0."""
    by_subject: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        by_subject[r.subject].append(i)
    z = np.zeros(len(records))
    for idx in by_subject.values():
        scores = np.array([records[i].score for i in idx], dtype=np.float64)
        sd = scores.std(ddof=1) if len(scores) > 1 else 0.0
        if sd > 0:
            z[idx] = (scores - scores.mean()) / sd
    return [replace(r, z=float(v)) for r, v in zip(records, z)]


@dataclass(frozen=True)
class Contrast:
    a: str
    b: str
    mean_diff: float  # mean z of a minus mean z of b
    t: float
    p_raw: float
    p_adjusted: float
    n_a: int
    n_b: int

    @property
    def significant(self) -> bool:
        return self.p_adjusted < ALPHA


def bonferroni(p: float, m: int) -> float:
    return min(1.0, p * m)


def welch_test(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Welch t statistic and two-sided p; degenerate zero-variance cases are resolved by the means."""
    if x.var(ddof=1) == 0 and y.var(ddof=1) == 0:
        if x.mean() == y.mean():
            return 0.0, 1.0
        return math.copysign(math.inf, x.mean() - y.mean()), 0.0
    res = stats.ttest_ind(x, y, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def _values(records: Sequence[RatingRecord]) -> np.ndarray:
    if any(r.z is None for r in records):
        raise AnalysisError("contrasts need z-scored records (run zscore_by_subject first)")
    return np.array([r.z for r in records])


def pairwise_contrasts(records: Sequence[RatingRecord], grouping: str = "system") -> list[Contrast]:
    """Welch t-test for every pair of groups, Bonferroni-adjusted over all pairs."""
    if grouping not in ("system", "voice"):
        raise AnalysisError(f"grouping must be 'system' or 'voice', got {grouping!r}")
    groups: dict[str, list[RatingRecord]] = defaultdict(list)
    for r in records:
        groups[getattr(r, grouping)].append(r)
    if len(groups) < 2:
        raise InsufficientDataError(f"need at least two {grouping} groups, got {len(groups)}")
    small = sorted(g for g, rs in groups.items() if len(rs) < 2)
    if small:
        raise InsufficientDataError(f"groups with fewer than two ratings: {small}")
    values = {g: _values(rs) for g, rs in groups.items()}
    pairs = list(combinations(sorted(groups), 2))
    out = []
    for a, b in pairs:
        t, p = welch_test(values[a], values[b])
        out.append(Contrast(a, b, float(values[a].mean() - values[b].mean()), t, p,
                            bonferroni(p, len(pairs)), len(values[a]), len(values[b])))
    return out


def contrasts_by_voice(records: Sequence[RatingRecord]) -> dict[str, list[Contrast]]:
    """System contrasts computed separately within each voice."""
    by_voice: dict[str, list[RatingRecord]] = defaultdict(list)
    for r in records:
        by_voice[r.voice].append(r)
    return {v: pairwise_contrasts(rs, "system") for v, rs in sorted(by_voice.items())}


@dataclass(frozen=True)
class SignificanceSummary:
    reference: str
    systems: tuple[str, ...]
    counts: Mapping[str, Mapping[str, int]]  # system -> {better, equal, worse}
    per_voice: Mapping[str, Mapping[str, str]]  # voice -> system -> better/equal/worse

    def table(self) -> str:
        """Three rows (better / equal / worse), one column per system."""
        width = max([8] + [len(s) for s in self.systems]) + 2
        lines = [f"{'vs ' + self.reference:<12}" + "".join(f"{s:>{width}}" for s in self.systems)]
        for outcome in ("better", "equal", "worse"):
            lines.append(f"{outcome:<12}" + "".join(f"{self.counts[s][outcome]:>{width}}"
                                                    for s in self.systems))
        return "\n".join(lines)

    def voice_table(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["voice", *self.systems])
        for voice, row in self.per_voice.items():
            writer.writerow([voice, *(row[s] for s in self.systems)])
        return buf.getvalue()


def significance_summary(per_voice: Mapping[str, Sequence[Contrast]],
                         reference: str) -> SignificanceSummary:
    """Count voices where each system is significantly better, not different, or worse than the reference."""
    seen = {name for cs in per_voice.values() for c in cs for name in (c.a, c.b)}
    systems = sorted(seen - {reference})
    counts = {s: {"better": 0, "equal": 0, "worse": 0} for s in systems}
    rows: dict[str, dict[str, str]] = {}
    for voice, contrasts in sorted(per_voice.items()):
        rows[voice] = {}
        for c in contrasts:
            if reference not in (c.a, c.b):
                continue
            other, diff = (c.b, -c.mean_diff) if c.a == reference else (c.a, c.mean_diff)
            outcome = "equal" if not c.significant else ("better" if diff > 0 else "worse")
            rows[voice][other] = outcome
            counts[other][outcome] += 1
        for s in systems:
            rows[voice].setdefault(s, "n/a")
    return SignificanceSummary(reference, tuple(systems), counts, rows)


def shift_mos_for_plot(groups: Mapping[str, Sequence[float]],
                       target_mean: float | None = None) -> dict[str, np.ndarray]:
    """Add one constant per group so every group's mean equals the target (default: mean of group means)."""
    arrays = {g: np.asarray(v, dtype=np.float64) for g, v in groups.items()}
    if any(len(v) == 0 for v in arrays.values()):
        raise AnalysisError("cannot shift an empty group")
    means = {g: float(v.mean()) for g, v in arrays.items()}
    if target_mean is None:
        target_mean = float(np.mean(list(means.values())))
    return {g: v + (target_mean - means[g]) for g, v in arrays.items()}


# ---------------------------------------------------------------------------
# reports


def mean_scores(records: Iterable[RatingRecord], rows: str = "voice",
                cols: str = "system") -> dict[str, dict[str, float]]:
    cells: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        cells[getattr(r, rows)][getattr(r, cols)].append(r.score)
    return {k: {c: float(np.mean(v)) for c, v in sorted(row.items())}
            for k, row in sorted(cells.items())}


def write_contrasts_csv(path: str | Path, contrasts: Mapping[str, Sequence[Contrast]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["voice", "a", "b", "mean_diff", "t", "p_raw", "p_adjusted",
                         "significant", "n_a", "n_b"])
        for voice, cs in contrasts.items():
            for c in cs:
                writer.writerow([voice, c.a, c.b, repr(c.mean_diff), repr(c.t), repr(c.p_raw),
                                 repr(c.p_adjusted), int(c.significant), c.n_a, c.n_b])


def write_scatter_csv(path: str | Path, rows: Iterable[tuple[str, float, float]]) -> None:
    """Voice, average phonetic distance, shifted MOS."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["voice", "avg_phone_dist", "shifted_mos"])
        for voice, dist, mos in rows:
            writer.writerow([voice, repr(float(dist)), repr(float(mos))])

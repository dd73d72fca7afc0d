"""Unified XSAMPA phone set and transcription normalisation.

Locale transcriptions are mapped onto one language-agnostic inventory.
Complex phones (diphthongs, affricates, syllabic consonants and nasalised
vowels) are split into primitive sequences, and primary stress is carried as
a property of the vowel it sits on.

The rules live in a TSV table (see ``data/default_rules.tsv``) so that a new
locale is a data addition::

    >>> rules = default_rule_table()
    >>> seq = normalize_utterance('"aI tS', None, rules)
    >>> str(seq)
    '"a I t} S'
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

STRESS = '"'
PAD = "<pad>"

__all__ = [
    "STRESS",
    "PhoneKind",
    "Phone",
    "RuleTable",
    "UnifiedPhoneSequence",
    "Violation",
    "PhoneError",
    "RuleTableParseError",
    "RecursiveRuleError",
    "UnknownSymbolError",
    "UnmappableTokenError",
    "StressPlacementError",
    "load_rule_table",
    "parse_rule_table",
    "default_rule_table",
    "split_complex_phone",
    "normalize_utterance",
    "parse_unified",
    "validate_sequence",
    "PhoneVocabulary",
]


class PhoneKind(str, enum.Enum):
    VOWEL = "vowel"
    CONSONANT = "consonant"
    CLOSURE_NO_RELEASE = "closure_no_release"
    STRESS_MARK = "stress_mark"
    PUNCTUATION = "punctuation"


_INVENTORY_KINDS = {k.value: k for k in PhoneKind if k is not PhoneKind.STRESS_MARK}


class PhoneError(ValueError):
    """Base class for phone-set errors."""


class RuleTableParseError(PhoneError):
    def __init__(self, message: str, line: int | None = None, source: str = "<rules>"):
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


class RecursiveRuleError(RuleTableParseError):
    pass


class UnknownSymbolError(PhoneError):
    def __init__(self, symbol: str, line: int | None = None, source: str | None = None):
        self.symbol = symbol
        self.line = line
        msg = f"unknown symbol {symbol!r}"
        if line is not None:
            msg = f"{source or '<rules>'}:{line}: {msg}"
        super().__init__(msg)


class UnmappableTokenError(PhoneError):
    def __init__(self, token: str, position: int, locale: str | None):
        self.token = token
        self.position = position
        self.locale = locale
        super().__init__(
            f"token {token!r} at position {position} has no mapping for locale {locale!r}"
        )


class StressPlacementError(PhoneError):
    pass


@dataclass(frozen=True)
class Phone:
    symbol: str
    kind: PhoneKind | None  # None only for symbols outside the inventory

    def __post_init__(self):
        if not self.symbol or any(c.isspace() for c in self.symbol):
            raise PhoneError(f"invalid phone symbol {self.symbol!r}")


@dataclass(frozen=True)
class RuleTable:
    complex_splits: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    locale_maps: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    inventory: frozenset[str] = frozenset()
    kinds: Mapping[str, PhoneKind] = field(default_factory=dict)

    def kind_of(self, symbol: str) -> PhoneKind | None:
        if symbol == STRESS:
            return PhoneKind.STRESS_MARK
        if symbol in self.kinds:
            return self.kinds[symbol]
        expansion = self.complex_splits.get(symbol)
        if expansion is not None:
            if any(self.kinds.get(s) is PhoneKind.VOWEL for s in expansion):
                return PhoneKind.VOWEL
            return PhoneKind.CONSONANT
        return None

    def is_vowel(self, symbol: str) -> bool:
        return self.kinds.get(symbol) is PhoneKind.VOWEL

    @property
    def locales(self) -> list[str]:
        return sorted(self.locale_maps)

    @property
    def punctuation(self) -> frozenset[str]:
        return frozenset(s for s, k in self.kinds.items() if k is PhoneKind.PUNCTUATION)


@dataclass(frozen=True)
class UnifiedPhoneSequence:
    tokens: tuple[Phone, ...]
    stress_indices: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "stress_indices", frozenset(self.stress_indices))
        for i in self.stress_indices:
            if not 0 <= i < len(self.tokens):
                raise StressPlacementError(f"stress index {i} out of range")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def symbols(self) -> list[str]:
        return [p.symbol for p in self.tokens]

    def model_tokens(self) -> list[str]:
        """Symbols in model-input order, with a stress token before each stressed vowel."""
        out = []
        for i, p in enumerate(self.tokens):
            if i in self.stress_indices:
                out.append(STRESS)
            out.append(p.symbol)
        return out

    def __str__(self) -> str:
        return " ".join(
            (STRESS + p.symbol) if i in self.stress_indices else p.symbol
            for i, p in enumerate(self.tokens)
        )


@dataclass(frozen=True)
class Violation:
    position: int
    symbol: str
    reason: str


# ---------------------------------------------------------------------------
# Rule table loading


def parse_rule_table(text: str, source: str = "<rules>") -> RuleTable:
    kinds: dict[str, PhoneKind] = {}
    splits: dict[str, tuple[str, ...]] = {}
    split_lines: dict[str, int] = {}
    locale_maps: dict[str, dict[str, str]] = {}
    locale_lines: dict[tuple[str, str], int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = raw.rstrip("\r\n").split("\t")
        cols = [c.strip() for c in cols]
        if len(cols) != 3 or not all(cols):
            raise RuleTableParseError(
                f"expected 3 tab-separated columns, got {len(cols)}", lineno, source
            )
        scope, src, target = cols
        rhs = target.split()
        if scope == "inventory":
            if src not in _INVENTORY_KINDS:
                raise RuleTableParseError(f"unknown phone kind {src!r}", lineno, source)
            for sym in rhs:
                if sym == STRESS:
                    raise RuleTableParseError("stress mark is reserved", lineno, source)
                if sym in kinds and kinds[sym] is not _INVENTORY_KINDS[src]:
                    raise RuleTableParseError(
                        f"symbol {sym!r} registered with two kinds", lineno, source
                    )
                kinds[sym] = _INVENTORY_KINDS[src]
        elif scope == "global":
            if src in splits:
                raise RuleTableParseError(f"duplicate split rule for {src!r}", lineno, source)
            if len(rhs) < 2:
                raise RuleTableParseError(
                    f"split of {src!r} must have at least two phones", lineno, source
                )
            splits[src] = tuple(rhs)
            split_lines[src] = lineno
        else:
            if len(rhs) != 1:
                raise RuleTableParseError(
                    f"locale map for {src!r} must name exactly one symbol", lineno, source
                )
            table = locale_maps.setdefault(scope, {})
            if src in table:
                raise RuleTableParseError(
                    f"duplicate mapping for {src!r} in {scope}", lineno, source
                )
            table[src] = rhs[0]
            locale_lines[(scope, src)] = lineno

    inventory = frozenset(kinds)
    for src, rhs in splits.items():
        lineno = split_lines[src]
        if src in inventory or src in rhs:
            raise RecursiveRuleError(
                f"complex phone {src!r} is itself an inventory symbol", lineno, source
            )
        for sym in rhs:
            if sym not in inventory:
                raise UnknownSymbolError(sym, lineno, source)
    for (scope, src), lineno in locale_lines.items():
        target = locale_maps[scope][src]
        if target not in inventory and target not in splits:
            raise UnknownSymbolError(target, lineno, source)

    return RuleTable(
        complex_splits=splits,
        locale_maps={k: dict(v) for k, v in locale_maps.items()},
        inventory=inventory,
        kinds=kinds,
    )


def load_rule_table(path: str | Path) -> RuleTable:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise RuleTableParseError(f"not valid UTF-8: {exc}", source=str(path)) from exc
    return parse_rule_table(text, source=str(path))


def default_rule_table() -> RuleTable:
    text = resources.files("polyglot_tts").joinpath("data/default_rules.tsv").read_text("utf-8")
    return parse_rule_table(text, source="default_rules.tsv")


# ---------------------------------------------------------------------------
# Normalisation


def split_complex_phone(phone: str, rules: RuleTable) -> list[str]:
    if phone in rules.complex_splits:
        return list(rules.complex_splits[phone])
    if phone in rules.inventory:
        return [phone]
    raise UnknownSymbolError(phone)


def _expand(symbol: str, stressed: bool, rules: RuleTable, position: int):
    parts = split_complex_phone(symbol, rules)
    stress_at = None
    if stressed:
        vowels = [k for k, s in enumerate(parts) if rules.is_vowel(s)]
        if not vowels:
            raise StressPlacementError(
                f"stress on {symbol!r} at position {position}, which contains no vowel"
            )
        stress_at = vowels[0]
    return parts, stress_at


def normalize_utterance(
    raw: str | UnifiedPhoneSequence, locale: str | None, rules: RuleTable
) -> UnifiedPhoneSequence:
    """Map a transcription onto the unified phone set.

    ``raw`` is a whitespace-separated transcription with ``"`` prefixed to
    stressed vowels. With ``locale=None`` (or a ``UnifiedPhoneSequence``) the
    input is taken to be unified already and only the splitting rules apply,
    which makes the operation idempotent.
    """
    if isinstance(raw, UnifiedPhoneSequence):
        items = [(p.symbol, i in raw.stress_indices) for i, p in enumerate(raw.tokens)]
        locale = None
    else:
        items = []
        for tok in raw.split():
            stressed = tok.startswith(STRESS)
            if stressed:
                tok = tok[len(STRESS):]
            if not tok:
                raise PhoneError("dangling stress mark")
            items.append((tok, stressed))

    lmap = {} if locale is None else rules.locale_maps.get(locale)
    if lmap is None:
        raise PhoneError(f"unknown locale {locale!r}")

    tokens: list[Phone] = []
    stress: set[int] = set()
    for position, (tok, stressed) in enumerate(items):
        unified = lmap.get(tok, tok)
        if unified not in rules.inventory and unified not in rules.complex_splits:
            raise UnmappableTokenError(tok, position, locale)
        parts, stress_at = _expand(unified, stressed, rules, position)
        if stress_at is not None:
            stress.add(len(tokens) + stress_at)
        tokens.extend(Phone(s, rules.kinds[s]) for s in parts)
    return UnifiedPhoneSequence(tuple(tokens), frozenset(stress))


def parse_unified(text: str, rules: RuleTable) -> UnifiedPhoneSequence:
    """Read a unified transcription as-is, without splitting or mapping.

    Unknown or complex symbols are kept so :func:`validate_sequence` can
    report them.
    """
    tokens = []
    stress = set()
    for i, tok in enumerate(text.split()):
        if tok.startswith(STRESS) and len(tok) > len(STRESS):
            tok = tok[len(STRESS):]
            stress.add(i)
        tokens.append(Phone(tok, rules.kind_of(tok)))
    return UnifiedPhoneSequence(tuple(tokens), frozenset(stress))


def validate_sequence(seq: UnifiedPhoneSequence, rules: RuleTable) -> list[Violation]:
    report = []
    for i, p in enumerate(seq.tokens):
        if p.symbol in rules.complex_splits:
            report.append(Violation(i, p.symbol, "unsplit complex phone"))
        elif p.symbol not in rules.inventory:
            report.append(Violation(i, p.symbol, "not in inventory"))
    for i in sorted(seq.stress_indices):
        sym = seq.tokens[i].symbol
        if not rules.is_vowel(sym) and sym not in rules.complex_splits:
            report.append(Violation(i, sym, "stress mark not on a vowel"))
    return report


class PhoneVocabulary:
    """Symbol <-> integer id mapping for model input.

    Id 0 is padding; the stress token and every inventory symbol follow in
    a fixed sorted order so the mapping depends only on the rule table.
    """

    def __init__(self, symbols: Iterable[str]):
        syms = [s for s in symbols if s != PAD]
        if len(set(syms)) != len(syms):
            raise PhoneError("duplicate vocabulary symbol")
        self.symbols = [PAD] + syms
        self._index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def from_rules(cls, rules: RuleTable) -> "PhoneVocabulary":
        return cls([STRESS] + sorted(rules.inventory))

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def encode(self, seq: UnifiedPhoneSequence) -> list[int]:
        try:
            return [self._index[s] for s in seq.model_tokens()]
        except KeyError as exc:
            raise UnknownSymbolError(exc.args[0]) from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

"""Text frontend: raw text to articulatory feature units.

Phonemes are represented by phonological feature activations rather than by
identity, so symbols shared between languages share their input vectors.
Word boundaries, pauses and sentence marks become their own units, each with a
reserved one-hot dimension appended after the phonological features.
"""

from __future__ import annotations

import difflib
import hashlib
import re
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

WORD_BOUNDARY_SYMBOL = "#"
PAUSE_ROW = "<pause>"
SENTENCE_MARKS = frozenset(".?!")
PAUSE_MARKS = frozenset({",", "—", "-"})
# stripped before phonemization; everything else must be handled by g2p
IGNORABLE = frozenset("\"'“”‘’«»()[]{};:")


class FrontendError(ValueError):
    pass


class ConfigurationError(FrontendError):
    pass


class UnknownSymbolError(FrontendError, KeyError):
    def __init__(self, symbol: str, suggestions: Sequence[str]):
        self.symbol = symbol
        self.suggestions = list(suggestions)
        super().__init__(
            f"symbol {symbol!r} is not in the feature inventory; nearest entries: {', '.join(self.suggestions)}"
        )

    def __str__(self) -> str:  # KeyError would repr() the message
        return self.args[0]


class G2PError(FrontendError):
    def __init__(self, token: str, language_id: int, reason: str = "no pronunciation"):
        self.token = token
        self.language_id = language_id
        super().__init__(f"g2p failed on token {token!r} (language {language_id}): {reason}")


class SequenceParseError(FrontendError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class UnitKind(str, Enum):
    PHONEME = "phoneme"
    WORD_BOUNDARY = "word_boundary"
    PAUSE = "pause"
    SENTENCE_MARK = "sentence_mark"


_KIND_CODES = {
    UnitKind.PHONEME: "P",
    UnitKind.WORD_BOUNDARY: "W",
    UnitKind.PAUSE: "B",
    UnitKind.SENTENCE_MARK: "S",
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class FeatureInventory:
    """Phonological feature table loaded from a tab-separated file.

    The header names the feature columns; each further row gives one symbol's
    activations in {-1, 0, +1}. Rows for ``#`` (word boundary), ``<pause>``
    and the sentence marks hold the reserved non-phoneme vectors.
    """

    def __init__(self, names: Sequence[str], table: Mapping[str, np.ndarray], digest: str):
        self.feature_names = tuple(names)
        self._table = dict(table)
        self.digest = digest
        for arr in self._table.values():
            arr.setflags(write=False)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "FeatureInventory":
        if path is None:
            raw = resources.files("laml_tts.resources").joinpath("features.tsv").read_bytes()
        else:
            raw = Path(path).read_bytes()
        return cls.from_text(raw.decode("utf-8"), hashlib.sha256(raw).hexdigest())

    @classmethod
    def from_text(cls, text: str, digest: str | None = None) -> "FeatureInventory":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FrontendError("empty feature inventory")
        header = lines[0].split("\t")
        names = header[1:]
        table: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(lines[1:], start=2):
            cells = line.split("\t")
            if len(cells) != len(header):
                raise FrontendError(f"inventory line {lineno}: expected {len(header)} columns, got {len(cells)}")
            values = np.array([float(c) for c in cells[1:]], dtype=np.float32)
            if not np.isin(values, (-1.0, 0.0, 1.0)).all():
                raise FrontendError(f"inventory line {lineno}: values must be in {{-1, 0, 1}}")
            table[unicodedata.normalize("NFC", cells[0])] = values
        for required in (WORD_BOUNDARY_SYMBOL, PAUSE_ROW, *SENTENCE_MARKS):
            if required not in table:
                raise FrontendError(f"inventory lacks reserved row {required!r}")
        if digest is None:
            digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return cls(names, table, digest)

    @property
    def dim(self) -> int:
        return len(self.feature_names)

    @property
    def phonemes(self) -> list[str]:
        reserved = {WORD_BOUNDARY_SYMBOL, PAUSE_ROW, *SENTENCE_MARKS}
        return [s for s in self._table if s not in reserved]

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._table and symbol != PAUSE_ROW

    def featurize(self, symbol: str) -> np.ndarray:
        """Feature vector of a phoneme symbol (read-only array)."""
        symbol = unicodedata.normalize("NFC", symbol)
        if symbol not in self or symbol == WORD_BOUNDARY_SYMBOL or symbol in SENTENCE_MARKS:
            close = difflib.get_close_matches(symbol, self.phonemes, n=5, cutoff=0.0)
            raise UnknownSymbolError(symbol, close)
        return self._table[symbol]

    def unit_vector(self, kind: UnitKind, symbol: str) -> np.ndarray:
        if kind is UnitKind.PHONEME:
            return self.featurize(symbol)
        if kind is UnitKind.WORD_BOUNDARY:
            return self._table[WORD_BOUNDARY_SYMBOL]
        if kind is UnitKind.PAUSE:
            return self._table[PAUSE_ROW]
        return self._table[symbol]

    def split_symbols(self, ipa: str) -> list[str]:
        """Greedy longest-match segmentation of an IPA string into inventory symbols."""
        ipa = unicodedata.normalize("NFC", ipa)
        longest = max(len(s) for s in self._table)
        out, i = [], 0
        while i < len(ipa):
            if ipa[i].isspace():
                i += 1
                continue
            for n in range(min(longest, len(ipa) - i), 0, -1):
                chunk = ipa[i : i + n]
                if chunk in self and chunk != WORD_BOUNDARY_SYMBOL:
                    out.append(chunk)
                    i += n
                    break
            else:
                raise UnknownSymbolError(ipa[i], difflib.get_close_matches(ipa[i], self.phonemes, n=5, cutoff=0.0))
        return out


_DEFAULT_INVENTORY: FeatureInventory | None = None


def default_inventory() -> FeatureInventory:
    global _DEFAULT_INVENTORY
    if _DEFAULT_INVENTORY is None:
        _DEFAULT_INVENTORY = FeatureInventory.load()
    return _DEFAULT_INVENTORY


def featurize(symbol: str, inventory: FeatureInventory | None = None) -> np.ndarray:
    return (inventory or default_inventory()).featurize(symbol)


@dataclass(frozen=True, eq=False)
class TextUnit:
    kind: UnitKind
    symbol: str
    features: np.ndarray = field(repr=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TextUnit):
            return NotImplemented
        return (
            self.kind is other.kind
            and self.symbol == other.symbol
            and np.array_equal(self.features, other.features)
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.symbol))


@dataclass(frozen=True)
class PhoneSequence:
    units: tuple[TextUnit, ...]
    language_id: int
    boundary_indexes: frozenset[int] = None  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        actual = frozenset(i for i, u in enumerate(self.units) if u.kind is UnitKind.WORD_BOUNDARY)
        if self.boundary_indexes is None:
            object.__setattr__(self, "boundary_indexes", actual)
        elif frozenset(self.boundary_indexes) != actual:
            raise FrontendError(
                f"boundary_indexes {sorted(self.boundary_indexes)} disagree with unit kinds {sorted(actual)}"
            )
        else:
            object.__setattr__(self, "boundary_indexes", frozenset(self.boundary_indexes))
        _check_invariants(self.units)

    def __len__(self) -> int:
        return len(self.units)

    @property
    def symbols(self) -> list[str]:
        return [u.symbol for u in self.units]

    def feature_matrix(self) -> np.ndarray:
        return np.stack([u.features for u in self.units]).astype(np.float32)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.units), dtype=bool)
        mask[list(self.boundary_indexes)] = True
        return mask

    def without_boundaries(self) -> list[TextUnit]:
        return [u for u in self.units if u.kind is not UnitKind.WORD_BOUNDARY]

    def count(self, kind: UnitKind) -> int:
        return sum(u.kind is kind for u in self.units)


def _check_invariants(units: Sequence[TextUnit]) -> None:
    if not units:
        raise FrontendError("a phone sequence needs at least one unit")
    if units[0].kind is UnitKind.WORD_BOUNDARY or units[-1].kind is UnitKind.WORD_BOUNDARY:
        raise FrontendError("a phone sequence may not start or end with a word boundary")
    for a, b in zip(units, units[1:]):
        if a.kind is UnitKind.WORD_BOUNDARY and b.kind is UnitKind.WORD_BOUNDARY:
            raise FrontendError("adjacent word boundaries")
    for u in units:
        if u.kind is UnitKind.SENTENCE_MARK and u.symbol not in SENTENCE_MARKS:
            raise FrontendError(f"{u.symbol!r} is not a sentence mark")
        if u.kind is UnitKind.PAUSE and u.symbol not in PAUSE_MARKS:
            raise FrontendError(f"{u.symbol!r} is not a pause trigger")


# ---------------------------------------------------------------------------
# grapheme-to-phoneme backends

G2P = Callable[[str, int], Sequence[str]]


class LexiconG2P:
    """Dictionary lookup per language; raises on out-of-vocabulary words.

    Lexicon files are UTF-8 lines of ``word<TAB>phoneme phoneme ...``.
    """

    def __init__(self, lexicons: Mapping[int, Mapping[str, Sequence[str]]]):
        self.lexicons = {lang: {w.lower(): list(p) for w, p in lex.items()} for lang, lex in lexicons.items()}

    @staticmethod
    def read_lexicon(path: str | Path) -> dict[str, list[str]]:
        lex: dict[str, list[str]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                try:
                    word, phones = line.split("\t")
                except ValueError:
                    raise FrontendError(f"{path}:{lineno}: expected 'word<TAB>phonemes'") from None
                lex[unicodedata.normalize("NFC", word).lower()] = phones.split()
        return lex

    @classmethod
    def from_files(cls, paths: Mapping[int, str | Path]) -> "LexiconG2P":
        return cls({lang: cls.read_lexicon(p) for lang, p in paths.items()})

    def __call__(self, word: str, language_id: int) -> list[str]:
        lex = self.lexicons.get(language_id)
        if lex is None:
            raise G2PError(word, language_id, "no lexicon for language")
        key = word.lower()
        if key in lex:
            return list(lex[key])
        if "-" in key:
            # hyphenated compound: join the parts' pronunciations, no boundary inside
            parts = [p for p in key.split("-") if p]
            if parts and all(p in lex for p in parts):
                return [ph for p in parts for ph in lex[p]]
        raise G2PError(word, language_id)


class PhonemizerG2P:
    """Adapter around the ``phonemizer`` package (optional dependency)."""

    def __init__(self, voices: Mapping[int, str], inventory: FeatureInventory | None = None, backend: str = "espeak"):
        try:
            from phonemizer.backend import BACKENDS  # noqa: F401
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ConfigurationError("PhonemizerG2P needs the optional 'phonemizer' package") from exc
        self.voices = dict(voices)
        self.backend = backend
        self.inventory = inventory or default_inventory()

    def __call__(self, word: str, language_id: int) -> list[str]:  # pragma: no cover - needs espeak
        from phonemizer import phonemize

        try:
            ipa = phonemize(word, language=self.voices[language_id], backend=self.backend, strip=True)
        except Exception as exc:
            raise G2PError(word, language_id, str(exc)) from exc
        return self.inventory.split_symbols(ipa)


# ---------------------------------------------------------------------------
# text to units


class LanguageRegistry:
    """Maps integer language ids to names."""

    def __init__(self, names: Mapping[int, str] | Iterable[str] = ()):
        if isinstance(names, Mapping):
            self._names = {int(k): v for k, v in names.items()}
        else:
            self._names = dict(enumerate(names))

    def __contains__(self, language_id: int) -> bool:
        return language_id in self._names

    def __len__(self) -> int:
        return len(self._names)

    def ids(self) -> list[int]:
        return sorted(self._names)

    def name(self, language_id: int) -> str:
        return self._names[language_id]

    def lookup(self, key: int | str) -> int:
        if isinstance(key, int) or (isinstance(key, str) and key.isdigit()):
            lid = int(key)
            if lid in self._names:
                return lid
        for lid, name in self._names.items():
            if name == key:
                return lid
        raise ConfigurationError(f"unknown language {key!r}; registered: {self._names}")

    def register(self, name: str, language_id: int | None = None) -> int:
        if language_id is None:
            language_id = max(self._names, default=-1) + 1
        if language_id in self._names:
            raise ConfigurationError(f"language id {language_id} already registered as {self._names[language_id]!r}")
        self._names[language_id] = name
        return language_id

    def to_dict(self) -> dict[str, str]:
        return {str(k): v for k, v in sorted(self._names.items())}


_TOKEN_RE = re.compile(r"\s+")


def _tokenize(text: str) -> list[tuple[str, str]]:
    """Split text into ('word', w), ('pause', c) and ('mark', c) events."""
    events: list[tuple[str, str]] = []
    for token in _TOKEN_RE.split(text):
        if not token:
            continue
        token = "".join(ch for ch in token if ch not in IGNORABLE)
        if not token:
            continue
        if set(token) <= {"-"}:
            # a hyphen standing alone between spaces is a dash
            events.append(("pause", "-"))
            continue
        # em-dashes always separate; intra-word hyphens stay in the word
        for piece_idx, piece in enumerate(token.split("—")):
            if piece_idx > 0:
                events.append(("pause", "—"))
            if not piece:
                continue
            lead = len(piece) - len(piece.lstrip(".?!,-"))
            core = piece[lead:]
            trail_start = len(core.rstrip(".?!,-"))
            for ch in piece[:lead]:
                if ch in SENTENCE_MARKS:
                    events.append(("mark", ch))
                elif ch == ",":
                    events.append(("pause", ch))
            word = core[:trail_start]
            if word:
                events.append(("word", word))
            for ch in core[trail_start:]:
                if ch in SENTENCE_MARKS:
                    events.append(("mark", ch))
                elif ch in (",", "-"):
                    events.append(("pause", ch))
    return events


def text_to_units(
    text: str,
    language_id: int,
    g2p: G2P,
    *,
    languages: LanguageRegistry | None = None,
    inventory: FeatureInventory | None = None,
) -> PhoneSequence:
    """Phonemize ``text`` and insert word-boundary, pause and sentence-mark units.

    A word boundary goes into every gap between two words unless a sentence
    mark sits in that gap. Commas and dashes add a pause unit but keep the
    boundary, since the words are still separate on the surface.
    """
    inventory = inventory or default_inventory()
    if languages is not None and language_id not in languages:
        raise ConfigurationError(f"language id {language_id} is not registered")
    text = unicodedata.normalize("NFC", " ".join(text.split()))
    if not text:
        raise FrontendError("text is empty after whitespace normalization")

    units: list[TextUnit] = []
    pending_gap = False  # a word was emitted and no sentence mark followed yet
    for kind, value in _tokenize(text):
        if kind == "word":
            phones = list(g2p(value, language_id))
            if not phones:
                raise G2PError(value, language_id, "empty pronunciation")
            if pending_gap:
                units.append(TextUnit(UnitKind.WORD_BOUNDARY, WORD_BOUNDARY_SYMBOL,
                                      inventory.unit_vector(UnitKind.WORD_BOUNDARY, WORD_BOUNDARY_SYMBOL)))
            for ph in phones:
                try:
                    vec = inventory.featurize(ph)
                except UnknownSymbolError as exc:
                    raise G2PError(value, language_id, str(exc)) from exc
                units.append(TextUnit(UnitKind.PHONEME, unicodedata.normalize("NFC", ph), vec))
            pending_gap = True
        elif kind == "pause":
            units.append(TextUnit(UnitKind.PAUSE, value, inventory.unit_vector(UnitKind.PAUSE, value)))
        else:
            units.append(TextUnit(UnitKind.SENTENCE_MARK, value, inventory.unit_vector(UnitKind.SENTENCE_MARK, value)))
            pending_gap = False
    if not units:
        raise FrontendError(f"text {text!r} produced no units")
    return PhoneSequence(tuple(units), language_id)


# ---------------------------------------------------------------------------
# canonical record form: "<language_id>|<code>:<symbol> ...|<boundary,...>"


def serialize_sequence(seq: PhoneSequence) -> str:
    if not seq.units:
        raise FrontendError("cannot serialize an empty sequence")
    body = " ".join(f"{_KIND_CODES[u.kind]}:{u.symbol}" for u in seq.units)
    bounds = ",".join(str(i) for i in sorted(seq.boundary_indexes))
    return f"{seq.language_id}|{body}|{bounds}"


def parse_sequence(record: str, inventory: FeatureInventory | None = None) -> PhoneSequence:
    inventory = inventory or default_inventory()
    parts = record.rstrip("\n").split("|")
    if len(parts) != 3:
        raise SequenceParseError("expected three '|'-separated fields", len(record))
    lang_s, body, bounds_s = parts
    try:
        language_id = int(lang_s)
    except ValueError:
        raise SequenceParseError(f"bad language id {lang_s!r}", 0) from None
    offset = len(lang_s) + 1
    if not body:
        raise SequenceParseError("empty unit list", offset)
    units: list[TextUnit] = []
    pos = offset
    for token in body.split(" "):
        code, sep, symbol = token.partition(":")
        if not sep or code not in _CODE_KINDS or not symbol:
            raise SequenceParseError(f"malformed unit {token!r}", pos)
        kind = _CODE_KINDS[code]
        try:
            vec = inventory.unit_vector(kind, symbol)
        except (UnknownSymbolError, KeyError):
            raise SequenceParseError(f"unknown symbol {symbol!r}", pos) from None
        units.append(TextUnit(kind, symbol, vec))
        pos += len(token) + 1
    bounds_pos = offset + len(body) + 1
    try:
        bounds = frozenset(int(b) for b in bounds_s.split(",")) if bounds_s else frozenset()
    except ValueError:
        raise SequenceParseError(f"bad boundary list {bounds_s!r}", bounds_pos) from None
    try:
        return PhoneSequence(tuple(units), language_id, bounds)
    except FrontendError as exc:
        raise SequenceParseError(str(exc), bounds_pos) from None

"""Unit inventories, toy G2P and edit-distance error rates (PER / CER / WER)."""
import logging
import os
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Literal, Mapping, Optional, Sequence

import numpy as np

from src.errors import EmptyReferenceError, G2PError, InventoryError

logger = logging.getLogger(__name__)

SILENCE = "<sil>"
BLANK = "<blk>"


# ============================================================================
# Inventory and sequences
# ============================================================================

class UnitInventory:
    """
    Closed symbol set.

    Layout: id 0 is silence, ids 1..V-1 are the units in sorted order, id V is the CTC blank.
    "Surface" ids (0..V-1) are the only ones allowed in transcripts.
    """

    def __init__(self, units: Iterable[str], kind: Literal["phoneme", "grapheme"] = "phoneme"):
        units = list(units)
        if len(set(units)) != len(units):
            raise InventoryError("Duplicate symbols in inventory")
        for reserved in (SILENCE, BLANK):
            if reserved in units:
                raise InventoryError(f"Reserved symbol {reserved} cannot be a unit")
        if not units:
            raise InventoryError("Inventory needs at least one unit")
        if kind not in ("phoneme", "grapheme"):
            raise InventoryError(f"Unknown inventory kind: {kind}")
        self.kind = kind
        self.symbols: tuple[str, ...] = (SILENCE, *sorted(units), BLANK)
        self._ids = {s: i for i, s in enumerate(self.symbols)}

    @property
    def silence_id(self) -> int:
        return 0

    @property
    def blank_id(self) -> int:
        return len(self.symbols) - 1

    @property
    def n_surface(self) -> int:
        """V: surface symbols (units + silence)."""
        return len(self.symbols) - 1

    @property
    def units(self) -> tuple[str, ...]:
        return self.symbols[1:-1]

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, UnitInventory) and other.symbols == self.symbols and other.kind == self.kind

    def __hash__(self) -> int:
        return hash((self.symbols, self.kind))

    def id_of(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise InventoryError(f"Unknown symbol: {symbol!r}") from None

    def symbol_of(self, unit_id: int) -> str:
        if not 0 <= unit_id < len(self.symbols):
            raise InventoryError(f"Unknown id: {unit_id}")
        return self.symbols[unit_id]

    def encode(self, symbols: Sequence[str]) -> "UnitSequence":
        return UnitSequence(tuple(self.id_of(s) for s in symbols), self)

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"#kind\t{self.kind}\n")
            for i, s in enumerate(self.symbols):
                f.write(f"{s}\t{i}\n")

    @classmethod
    def load(cls, path: str) -> "UnitInventory":
        kind = "phoneme"
        pairs: list[tuple[str, int]] = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                key, value = line.split("\t")
                if key == "#kind":
                    kind = value
                else:
                    pairs.append((key, int(value)))
        pairs.sort(key=lambda p: p[1])
        if [i for _, i in pairs] != list(range(len(pairs))):
            raise InventoryError(f"Inventory ids in {path} are not contiguous")
        symbols = [s for s, _ in pairs]
        if symbols.count(SILENCE) != 1 or symbols.count(BLANK) != 1:
            raise InventoryError(f"{path}: silence and blank must appear exactly once")
        inventory = cls([s for s in symbols if s not in (SILENCE, BLANK)], kind=kind)
        if list(inventory.symbols) != symbols:
            raise InventoryError(f"{path}: ids do not follow the silence/sorted/blank layout")
        return inventory


@dataclass(frozen=True)
class UnitSequence:
    """Surface unit ids over an inventory (blank never appears)."""
    ids: tuple[int, ...]
    inventory: UnitInventory = field(compare=False)

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        bad = [i for i in ids if not 0 <= i < self.inventory.n_surface]
        if bad:
            raise InventoryError(f"Ids not valid in a surface transcript: {bad[:5]}")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)

    def symbols(self) -> list[str]:
        return [self.inventory.symbols[i] for i in self.ids]

    def to_text(self) -> str:
        return " ".join(self.symbols())

    def words(self) -> list[tuple[str, ...]]:
        """Silence-delimited words; each word is the tuple of its unit symbols."""
        result: list[tuple[str, ...]] = []
        current: list[str] = []
        for i in self.ids:
            if i == self.inventory.silence_id:
                if current:
                    result.append(tuple(current))
                current = []
            else:
                current.append(self.inventory.symbols[i])
        if current:
            result.append(tuple(current))
        return result

    def strip_silence(self) -> "UnitSequence":
        ids = list(self.ids)
        sil = self.inventory.silence_id
        while ids and ids[0] == sil:
            ids.pop(0)
        while ids and ids[-1] == sil:
            ids.pop()
        return UnitSequence(tuple(ids), self.inventory)

    @classmethod
    def from_text(cls, text: str, inventory: UnitInventory) -> "UnitSequence":
        return inventory.encode(text.split())


def segment_graphemes(text: str, graphemes: Iterable[str]) -> list[str]:
    """Greedy longest-match tokenization of a string into (possibly multi-character) graphemes."""
    table = sorted(set(graphemes), key=lambda g: (-len(g), g))
    out: list[str] = []
    pos = 0
    while pos < len(text):
        for g in table:
            if g and text.startswith(g, pos):
                out.append(g)
                pos += len(g)
                break
        else:
            raise G2PError(f"Cannot tokenize {text!r} at position {pos}: {text[pos]!r} is not covered")
    return out


# ============================================================================
# Lexicon and G2P
# ============================================================================

class Lexicon:
    """
    Pronunciation dictionary plus per-grapheme fallback rules.

    Fields:
        entries: word -> phone symbols
        fallback: grapheme -> phone symbols (applied by greedy longest match)
        inventory: phoneme inventory of the phones

    When `graphemes` is given, every one of them must be spellable through the fallback alone.
    """

    def __init__(self, entries: Mapping[str, Sequence[str]], fallback: Mapping[str, Sequence[str]],
                 inventory: UnitInventory, graphemes: Optional[Iterable[str]] = None):
        self.inventory = inventory
        self.entries = {w: tuple(p) for w, p in entries.items()}
        self.fallback = {g: tuple(p) for g, p in fallback.items()}
        for word, phones in self.entries.items():
            if not phones:
                raise G2PError(f"Empty lexicon entry for {word!r}")
            for p in phones:
                inventory.id_of(p)
        for g, phones in self.fallback.items():
            if not g or not phones:
                raise G2PError(f"Invalid fallback rule {g!r} -> {phones!r}")
            for p in phones:
                inventory.id_of(p)
        if graphemes is not None:
            uncovered = self.uncovered(graphemes)
            if uncovered:
                raise G2PError(f"Fallback rules do not cover graphemes {uncovered}: "
                               "out-of-lexicon words could not be pronounced")

    def uncovered(self, graphemes: Iterable[str]) -> list[str]:
        """Graphemes the fallback cannot spell on their own."""
        missing = []
        for g in sorted(set(graphemes)):
            try:
                segment_graphemes(g, self.fallback)
            except G2PError:
                missing.append(g)
        return missing

    def __len__(self) -> int:
        return len(self.entries)

    def pronounce(self, word: str) -> tuple[str, ...]:
        phones = self.entries.get(word)
        if phones is not None:
            return phones
        out: list[str] = []
        for g in segment_graphemes(word, self.fallback):
            out.extend(self.fallback[g])
        return tuple(out)

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for word in sorted(self.entries):
                f.write(f"{word}\t{' '.join(self.entries[word])}\n")
            for g in sorted(self.fallback):
                f.write(f"@{g}\t{' '.join(self.fallback[g])}\n")

    @classmethod
    def load(cls, path: str, inventory: UnitInventory) -> "Lexicon":
        entries: dict[str, list[str]] = {}
        fallback: dict[str, list[str]] = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                key, phones = line.split("\t")
                if key.startswith("@"):
                    fallback[key[1:]] = phones.split()
                else:
                    entries[key] = phones.split()
        return cls(entries, fallback, inventory)


def g2p_convert(text: Sequence[str], lex: Lexicon) -> UnitSequence:
    """Per word: lexicon lookup, else greedy per-grapheme fallback; words separated by silence."""
    ids: list[int] = []
    for n, word in enumerate(text):
        if n:
            ids.append(lex.inventory.silence_id)
        ids.extend(lex.inventory.id_of(p) for p in lex.pronounce(word))
    return UnitSequence(tuple(ids), lex.inventory)


# ============================================================================
# Edit distance and error rates
# ============================================================================

@dataclass(frozen=True)
class EditResult:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> EditResult:
    """Levenshtein distance transforming a into b, with op counts from one optimal alignment.

    Backtrace preference: substitution/match, then insertion, then deletion.
    """
    n, m = len(a), len(b)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i, j - 1] + 1, d[i - 1, j] + 1)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if a[i - 1] == b[j - 1] else 1
            if d[i, j] == d[i - 1, j - 1] + cost:
                subs += cost
                i, j = i - 1, j - 1
                continue
        if j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return EditResult(int(d[n, m]), subs, ins, dels)


def error_rate(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> float:
    """edit distance / len(ref); tokenization (phones, characters, words) is up to the caller."""
    if len(ref) == 0:
        raise EmptyReferenceError("Reference is empty")
    return edit_distance(ref, hyp).distance / len(ref)


def corpus_error_rate(pairs: Iterable[tuple[Sequence[Hashable], Sequence[Hashable]]]) -> float:
    """Pooled rate: sum of distances over sum of reference lengths."""
    errors = 0
    total = 0
    for hyp, ref in pairs:
        errors += edit_distance(ref, hyp).distance
        total += len(ref)
    if total == 0:
        raise EmptyReferenceError("All references are empty")
    return errors / total


def unit_error_rate(pairs: Iterable[tuple[UnitSequence, UnitSequence]]) -> float:
    """PER/CER over unit sequences (silence counts as a token, like a space in CER)."""
    return corpus_error_rate((h.ids, r.ids) for h, r in pairs)


def word_error_rate(pairs: Iterable[tuple[UnitSequence, UnitSequence]]) -> float:
    return corpus_error_rate((h.words(), r.words()) for h, r in pairs)


# ============================================================================
# Unit bigram LM
# ============================================================================

def estimate_bigram_lm(sequences: Iterable[Sequence[int]], n_units: int, smoothing: float = 0.1) -> np.ndarray:
    """Add-k bigram over surface ids with a boundary symbol.

    Returns a (V+1) x (V+1) row-stochastic matrix: row V is the sentence begin, column V the end.
    The begin -> end transition (empty sentence) is excluded.
    """
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    counts = np.zeros((n_units + 1, n_units + 1))
    boundary = n_units
    for seq in sequences:
        prev = boundary
        for unit in seq:
            counts[prev, unit] += 1
            prev = unit
        counts[prev, boundary] += 1
    counts += smoothing
    counts[boundary, boundary] = 0.0
    return counts / counts.sum(axis=1, keepdims=True)

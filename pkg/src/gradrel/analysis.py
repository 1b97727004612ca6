"""Audio/text annotation-characteristic features and their correlation table.

Audio side: Shannon entropy of sound-event detector probabilities averaged
over time (``e_class``) or over classes (``e_time``).  Text side: word,
content-word and frequent-word tallies.  Targets are human ratings (HR),
machine ratings (MR), their disagreement and average play time (APT).
"""

from __future__ import annotations

import csv
import logging
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DataError
from .metrics import pearson

log = logging.getLogger(__name__)

TARGETS = ("HR", "MR", "D(H,M)", "APT")
OPTIONAL_TARGETS = ("APT", "SD_HR")
FEATURE_ORDER = (
    "e_time", "e_class", "duration",
    "perplexity", "n_words", "n_c_words", "n_nouns", "n_adjectives",
    "n_fr_words", "n_fr_c_words", "n_fr_nouns",
)


@dataclass(frozen=True)
class ProbabilityMatrix:
    """Frame-by-class detector outputs in [0, 1]; rows need not sum to 1."""

    values: np.ndarray
    audio_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DataError(f"{self.audio_id or 'matrix'}: expected a non-empty T x C matrix, got {v.shape}")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise DataError(f"{self.audio_id or 'matrix'}: probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", v)


def entropy(p) -> float:
    """Shannon entropy in bits of a non-negative vector after normalization."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("entropy needs finite non-negative entries")
    total = p.sum()
    if total <= 0:
        raise ValueError("entropy of an all-zero vector is undefined")
    support = p[p > 0]
    if np.all(support == support[0]):
        # equal masses: avoids summing k rounded terms
        return float(np.log2(len(support)))
    q = support / total
    q = q[q > 0]
    return float(max(-(q * np.log2(q)).sum(), 0.0))


def e_class(m: ProbabilityMatrix) -> float:
    """Entropy across classes of the time-averaged probabilities."""
    return entropy(m.values.mean(axis=0))


def e_time(m: ProbabilityMatrix) -> float:
    """Entropy across frames of the class-averaged probabilities."""
    return entropy(m.values.mean(axis=1))


# --------------------------------------------------------------------------- text

_PUNCT = re.compile(r"[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class TextCounts:
    n_words: int
    n_c_words: int
    n_fr_words: int
    n_fr_c_words: int


def text_counts(tokens: Sequence[str], freq: Iterable[str], content_lexicon: Iterable[str]) -> TextCounts:
    """Tally words, content words, frequent words and frequent content words (multiset)."""
    freq = set(freq)
    content = set(content_lexicon)
    return TextCounts(
        n_words=len(tokens),
        n_c_words=sum(t in content for t in tokens),
        n_fr_words=sum(t in freq for t in tokens),
        n_fr_c_words=sum(t in freq and t in content for t in tokens),
    )


def load_lexicon(path, cutoff: int | None = None) -> list[str]:
    """One word per line; blank lines skipped, order kept, truncated to ``cutoff``."""
    words, seen = [], set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        w = line.strip().lower()
        if w and w not in seen:
            seen.add(w)
            words.append(w)
    return words[:cutoff] if cutoff is not None else words


# --------------------------------------------------------------------------- table


def zscore(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd == 0.0:
        raise ValueError("z-score of a constant vector is undefined")
    return (x - x.mean()) / sd


def disagreement(hr, mr) -> np.ndarray:
    """Per-pair ``|z(hr) - z(mr)|``, putting both rating scales on one footing."""
    hr = np.asarray(hr, dtype=np.float64)
    mr = np.asarray(mr, dtype=np.float64)
    if hr.shape != mr.shape:
        raise ValueError(f"hr and mr lengths differ: {hr.shape} vs {mr.shape}")
    return np.abs(zscore(hr) - zscore(mr))


@dataclass
class AnalysisTable:
    """Columns keyed by name, one row per pair id."""

    pair_ids: list[str]
    columns: dict[str, np.ndarray] = field(default_factory=dict)
    text: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.pair_ids)
        if len(set(self.pair_ids)) != n:
            raise DataError("duplicate pair_id in analysis table")
        for name, col in list(self.columns.items()):
            col = np.asarray(col, dtype=np.float64)
            if col.shape != (n,):
                raise DataError(f"column {name!r} has {col.shape[0]} rows, expected {n}")
            self.columns[name] = col
        if "HR" in self.columns and np.any((self.columns["HR"] < 0) | (self.columns["HR"] > 100)):
            raise DataError("column 'HR' must lie in [0, 100]")
        if "MR" in self.columns and np.any(np.abs(self.columns["MR"]) > 1):
            raise DataError("column 'MR' must lie in [-1, 1]")

    def __len__(self):
        return len(self.pair_ids)

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise DataError(f"analysis table has no column {name!r}")
        col = self.columns[name]
        if np.any(np.isnan(col)):
            raise DataError(f"column {name!r} has missing values")
        return col


def load_analysis_table(path) -> AnalysisTable:
    """CSV with a mandatory ``pair_id`` column.

    Numeric columns become float columns (empty cells as NaN); columns with
    any non-numeric cell are kept as text (e.g. ``audio_id``, ``caption``).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "pair_id" not in reader.fieldnames:
            raise DataError(f"{path}: header must include 'pair_id'")
        names = [n for n in reader.fieldnames if n != "pair_id"]
        rows = list(reader)
    for lineno, row in enumerate(rows, start=2):
        if None in row or any(v is None for v in row.values()):
            raise DataError(f"{path}:{lineno}: wrong number of fields")
    pair_ids = [r["pair_id"] for r in rows]
    numeric, text = {}, {}
    for name in names:
        cells = [r[name].strip() for r in rows]
        try:
            numeric[name] = np.array([float(c) if c else np.nan for c in cells])
        except ValueError:
            text[name] = [r[name] for r in rows]
    try:
        return AnalysisTable(pair_ids, numeric, text)
    except DataError as err:
        raise DataError(f"{path}: {err}") from None


def load_probability_matrix(path) -> ProbabilityMatrix:
    """Headerless CSV, rows = frames, columns = classes; id from the file stem."""
    path = Path(path)
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as err:
        raise DataError(f"{path}: malformed probability matrix ({err})") from None
    try:
        return ProbabilityMatrix(values, path.stem)
    except DataError as err:
        raise DataError(f"{path}: {err}") from None


def add_audio_features(table: AnalysisTable, matrix_dir, frame_hop: float | None = None) -> None:
    """Fill ``e_class``/``e_time`` (and ``duration`` from ``frame_hop``) via ``audio_id``."""
    if "audio_id" not in table.text:
        raise DataError("analysis table needs an 'audio_id' column to attach probability matrices")
    cache: dict[str, ProbabilityMatrix] = {}
    ec, et, dur = [], [], []
    for audio_id in table.text["audio_id"]:
        if audio_id not in cache:
            cache[audio_id] = load_probability_matrix(Path(matrix_dir) / f"{audio_id}.csv")
        m = cache[audio_id]
        ec.append(e_class(m))
        et.append(e_time(m))
        dur.append(m.values.shape[0] * frame_hop if frame_hop else np.nan)
    table.columns["e_class"] = np.array(ec)
    table.columns["e_time"] = np.array(et)
    if frame_hop and "duration" not in table.columns:
        table.columns["duration"] = np.array(dur)


def add_text_features(table: AnalysisTable, freq: Sequence[str], content: Iterable[str]) -> None:
    """Fill word-count columns from the ``caption`` text column."""
    if "caption" not in table.text:
        raise DataError("analysis table needs a 'caption' column for text features")
    counts = [text_counts(tokenize(c), freq, content) for c in table.text["caption"]]
    for name in ("n_words", "n_c_words", "n_fr_words", "n_fr_c_words"):
        table.columns[name] = np.array([getattr(c, name) for c in counts], dtype=np.float64)


# --------------------------------------------------------------------------- correlation


@dataclass(frozen=True)
class Cell:
    r: float
    p: float

    @property
    def marker(self) -> str:
        if self.p < 0.01:
            return "**"
        if self.p < 0.05:
            return "*"
        return "n.s."

    def __str__(self):
        return f"{self.r:.6g};{self.marker}"


@dataclass
class CorrelationTable:
    features: list[str]
    targets: list[str]
    cells: list[list[Cell]]

    def cell(self, feature: str, target: str) -> Cell:
        return self.cells[self.features.index(feature)][self.targets.index(target)]


def with_disagreement(table: AnalysisTable) -> AnalysisTable:
    """Add the ``D(H,M)`` column when HR and MR are both present."""
    if "HR" in table.columns and "MR" in table.columns and "D(H,M)" not in table.columns:
        table.columns["D(H,M)"] = disagreement(table.column("HR"), table.column("MR"))
    return table


def correlation_table(table: AnalysisTable, targets: Sequence[str], features: Sequence[str]) -> CorrelationTable:
    """Pearson r and two-sided p per (feature, target); one row per feature."""
    cols = {name: table.column(name) for name in [*features, *targets]}
    cells = []
    for f in features:
        row = []
        for t in targets:
            res = pearson(cols[f], cols[t])
            row.append(Cell(res.coefficient, res.p_value))
        cells.append(row)
    return CorrelationTable(list(features), list(targets), cells)


def default_layout(table: AnalysisTable) -> tuple[list[str], list[str]]:
    """Targets and features present in ``table``, in the reference layout order.

    Missing optional targets are skipped with a warning; extra numeric
    columns not named as targets are appended as features.
    """
    targets = []
    for t in (*TARGETS, "SD_HR"):
        if t in table.columns:
            targets.append(t)
        elif t in OPTIONAL_TARGETS and t != "SD_HR":
            log.warning("target column %r absent; skipped", t)
    for t in ("HR", "MR"):
        if t not in table.columns:
            raise DataError(f"analysis table has no column {t!r}")
    known = [f for f in FEATURE_ORDER if f in table.columns]
    extra = [c for c in table.columns if c not in known and c not in targets and c not in TARGETS]
    return targets, known + extra


def write_correlation_table(path, ct: CorrelationTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["feature", *ct.targets])
        for f, row in zip(ct.features, ct.cells):
            writer.writerow([f, *(str(c) for c in row)])

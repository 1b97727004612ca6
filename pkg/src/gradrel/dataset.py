"""Ratings, binary pairs, feature tables and the synthetic generator.

File formats (UTF-8 CSV, one header row):

* ratings  -- ``caption_id,audio_id,rating`` with ``0 <= rating <= 100``
* pairs    -- ``caption_id,audio_id`` (one positive audio per caption)
* features -- ``id,f0,f1,...,f{d-1}``
* splits   -- ``caption_id,split`` with split in development/validation/evaluation
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLIT_NAMES = ("development", "validation", "evaluation")


class DataError(ValueError):
    """Input violating a type invariant; the message names the offending record."""


@dataclass(frozen=True)
class RelevanceList:
    """One caption's ratings over ``N >= 2`` candidate audio items."""

    caption_id: str
    audio_ids: tuple[str, ...]
    ratings: np.ndarray

    def __post_init__(self):
        ratings = np.asarray(self.ratings, dtype=np.float64)
        object.__setattr__(self, "ratings", ratings)
        object.__setattr__(self, "audio_ids", tuple(self.audio_ids))
        if ratings.ndim != 1 or ratings.shape[0] != len(self.audio_ids):
            raise DataError(f"caption {self.caption_id!r}: ratings/audio_ids length mismatch")
        if len(self.audio_ids) < 2:
            raise DataError(f"caption {self.caption_id!r}: list needs at least 2 items")
        if not np.all((ratings >= 0.0) & (ratings <= 100.0)):
            raise DataError(f"caption {self.caption_id!r}: rating outside [0, 100]")
        if not np.any(ratings > 0.0):
            raise DataError(f"caption {self.caption_id!r}: all ratings are zero")
        if len(set(self.audio_ids)) != len(self.audio_ids):
            raise DataError(f"caption {self.caption_id!r}: duplicate audio id in list")

    def __len__(self):
        return len(self.audio_ids)

    def __eq__(self, other):
        if not isinstance(other, RelevanceList):
            return NotImplemented
        return (
            self.caption_id == other.caption_id
            and self.audio_ids == other.audio_ids
            and np.array_equal(self.ratings, other.ratings)
        )

    __hash__ = None


class PairSet(Mapping):
    """Binary positives: maps each caption id to its single positive audio id."""

    def __init__(self, pairs: Iterable[tuple[str, str]] = ()):
        self._pos: dict[str, str] = {}
        for caption_id, audio_id in pairs:
            if caption_id in self._pos:
                raise DataError(f"caption {caption_id!r} has more than one positive audio")
            self._pos[caption_id] = audio_id

    def __getitem__(self, caption_id):
        return self._pos[caption_id]

    def __iter__(self):
        return iter(self._pos)

    def __len__(self):
        return len(self._pos)

    def __contains__(self, item):
        if isinstance(item, tuple):
            caption_id, audio_id = item
            return self._pos.get(caption_id) == audio_id
        return item in self._pos

    def __repr__(self):
        return f"PairSet({len(self)} pairs)"

    def subset(self, caption_ids: Iterable[str]) -> PairSet:
        keep = set(caption_ids)
        return PairSet((c, a) for c, a in self._pos.items() if c in keep)


@dataclass
class FeatureTable:
    """Dense feature vectors indexed by id; all rows have length ``dimension``."""

    dimension: int
    ids: list[str] = field(default_factory=list)
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.dimension < 1:
            raise DataError(f"feature dimension must be positive, got {self.dimension}")
        if self.matrix is None:
            self.matrix = np.zeros((0, self.dimension))
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (len(self.ids), self.dimension):
            raise DataError(
                f"feature matrix shape {self.matrix.shape} does not match "
                f"{len(self.ids)} ids x {self.dimension}"
            )
        if not np.all(np.isfinite(self.matrix)):
            bad = np.argwhere(~np.isfinite(self.matrix))[0]
            raise DataError(f"non-finite feature for id {self.ids[bad[0]]!r}, column f{bad[1]}")
        self._index = {}
        for i, key in enumerate(self.ids):
            if key in self._index:
                raise DataError(f"duplicate feature id {key!r}")
            self._index[key] = i

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self._index

    def index(self, keys: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self._index[k] for k in keys], dtype=np.intp)
        except KeyError as err:
            raise DataError(f"no features for id {err.args[0]!r}") from None

    def rows(self, keys: Iterable[str]) -> np.ndarray:
        return self.matrix[self.index(keys)]


@dataclass(frozen=True)
class SplitSpec:
    development: frozenset[str]
    validation: frozenset[str]
    evaluation: frozenset[str]

    def __post_init__(self):
        for name in SPLIT_NAMES:
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        a, b, c = self.development, self.validation, self.evaluation
        overlap = (a & b) | (a & c) | (b & c)
        if overlap:
            raise DataError(f"caption {sorted(overlap)[0]!r} appears in more than one split")

    def __getitem__(self, name: str) -> frozenset[str]:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)


# --------------------------------------------------------------------------- ratings


def _read_rows(path, header: Sequence[str] | None):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        head = [h.strip() for h in head]
        if header is not None and head != list(header):
            raise DataError(f"{path}: expected header {','.join(header)!r}, got {','.join(head)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            yield head, lineno, row


def _parse_rating(path, lineno, text):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: non-numeric rating {text!r}") from None
    if not (0.0 <= value <= 100.0):
        raise DataError(f"{path}:{lineno}: rating {text!r} outside [0, 100]")
    return value


def load_ratings(path) -> tuple[list[RelevanceList], int]:
    """Read a ratings CSV and group records into one list per caption.

    Captions keep their first-appearance order and items keep file order.
    Lists whose ratings are all zero are dropped; their number is returned
    alongside the lists.
    """
    grouped: dict[str, list[tuple[str, float]]] = {}
    seen = set()
    for _, lineno, row in _read_rows(path, ("caption_id", "audio_id", "rating")):
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        caption_id, audio_id, text = row
        if (caption_id, audio_id) in seen:
            raise DataError(f"{path}:{lineno}: duplicate pair ({caption_id!r}, {audio_id!r})")
        seen.add((caption_id, audio_id))
        grouped.setdefault(caption_id, []).append((audio_id, _parse_rating(path, lineno, text)))

    lists, dropped = [], 0
    for caption_id, items in grouped.items():
        ratings = np.array([r for _, r in items], dtype=np.float64)
        if not np.any(ratings > 0.0):
            dropped += 1
            continue
        if len(items) < 2:
            raise DataError(f"{path}: caption {caption_id!r} has a single rated item")
        lists.append(RelevanceList(caption_id, tuple(a for a, _ in items), ratings))
    if dropped:
        log.warning("%s: dropped %d all-zero relevance list(s)", path, dropped)
    return lists, dropped


def write_ratings(path, lists: Iterable[RelevanceList]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["caption_id", "audio_id", "rating"])
        for rl in lists:
            for audio_id, rating in zip(rl.audio_ids, rl.ratings):
                writer.writerow([rl.caption_id, audio_id, repr(float(rating))])


def binarize_ratings(lists: Iterable[RelevanceList], pairs: PairSet) -> list[RelevanceList]:
    """Replace each rating by 100 for the caption's positive audio and 0 otherwise."""
    out = []
    for rl in lists:
        if rl.caption_id not in pairs:
            raise DataError(f"caption {rl.caption_id!r} has no positive pair")
        positive = pairs[rl.caption_id]
        ratings = np.array([100.0 if a == positive else 0.0 for a in rl.audio_ids])
        if not ratings.any():
            raise DataError(
                f"caption {rl.caption_id!r}: positive audio {positive!r} is not in its list"
            )
        out.append(RelevanceList(rl.caption_id, rl.audio_ids, ratings))
    return out


# --------------------------------------------------------------------------- pairs


def load_pairs(path) -> PairSet:
    records = []
    for _, lineno, row in _read_rows(path, ("caption_id", "audio_id")):
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        records.append((row[0], row[1]))
    try:
        return PairSet(records)
    except DataError as err:
        raise DataError(f"{path}: {err}") from None


def write_pairs(path, pairs: PairSet) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["caption_id", "audio_id"])
        for caption_id, audio_id in pairs.items():
            writer.writerow([caption_id, audio_id])


# --------------------------------------------------------------------------- features


def load_features(path) -> FeatureTable:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            head = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        expected = ["id"] + [f"f{i}" for i in range(len(head) - 1)]
        if len(head) < 2 or head != expected:
            raise DataError(f"{path}: header must be id,f0,...,f{{d-1}}, got {','.join(head)!r}")
        d = len(head) - 1
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise DataError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            values = []
            for col, text in enumerate(row[1:]):
                try:
                    v = float(text)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column f{col}: non-numeric {text!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: column f{col}: non-finite value {text!r}")
                values.append(v)
            ids.append(row[0])
            rows.append(values)
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    try:
        return FeatureTable(d, ids, matrix)
    except DataError as err:
        raise DataError(f"{path}: {err}") from None


def write_features(path, table: FeatureTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"f{i}" for i in range(table.dimension)])
        for key, row in zip(table.ids, table.matrix):
            writer.writerow([key] + [repr(float(v)) for v in row])


# --------------------------------------------------------------------------- splits


def load_splits(path) -> SplitSpec:
    groups = {name: set() for name in SPLIT_NAMES}
    for _, lineno, row in _read_rows(path, ("caption_id", "split")):
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        if row[1] not in groups:
            raise DataError(f"{path}:{lineno}: unknown split {row[1]!r}")
        groups[row[1]].add(row[0])
    try:
        return SplitSpec(**groups)
    except DataError as err:
        raise DataError(f"{path}: {err}") from None


def write_splits(path, splits: SplitSpec) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["caption_id", "split"])
        for name in SPLIT_NAMES:
            for caption_id in sorted(splits[name]):
                writer.writerow([caption_id, name])


def split_captions(caption_ids: Sequence[str], seed: int, fractions=(1 / 3, 1 / 3, 1 / 3)) -> SplitSpec:
    """Seeded random partition of captions into development/validation/evaluation."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(caption_ids))
    n = len(caption_ids)
    n_dev = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    ids = [caption_ids[i] for i in order]
    return SplitSpec(ids[:n_dev], ids[n_dev:n_dev + n_val], ids[n_dev + n_val:])


# --------------------------------------------------------------------------- synthetic


@dataclass
class SyntheticData:
    audio: FeatureTable
    captions: FeatureTable
    pairs: PairSet
    lists: list[RelevanceList]
    audio_latents: np.ndarray
    caption_latents: np.ndarray

    def true_rating(self, caption_id: str, audio_id: str) -> float:
        c = self.caption_latents[self.captions.index([caption_id])[0]]
        a = self.audio_latents[self.audio.index([audio_id])[0]]
        return latent_rating(c, a)


def latent_rating(u, v) -> float:
    """Ground-truth synthetic rating ``50 * (1 + cos(u, v))`` clipped to [0, 100]."""
    cos = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.clip(50.0 * (1.0 + cos), 0.0, 100.0))


def generate_synthetic(
    seed: int,
    n_captions: int,
    n_audio: int,
    d: int,
    list_size: int,
    noise: float,
    latent_dim: int = 8,
) -> SyntheticData:
    """Draw a desk-scale graded-relevance dataset.

    Every audio item gets a latent unit vector; caption ``i`` copies the
    latent of its (distinct) positive audio.  Observed features are each
    modality's own fixed random linear map of the latent plus isotropic
    Gaussian noise of scale ``noise``.  A caption's list holds its positive
    plus ``list_size - 1`` distractors drawn uniformly without replacement,
    in shuffled order, rated by :func:`latent_rating`.
    """
    if n_captions < 1 or n_audio < 2 or d < 1 or latent_dim < 1:
        raise ValueError("n_captions >= 1, n_audio >= 2, d >= 1 and latent_dim >= 1 are required")
    if not 2 <= list_size <= n_audio:
        raise ValueError(f"list_size must be in [2, n_audio={n_audio}], got {list_size}")
    if n_captions > n_audio:
        raise ValueError(f"n_captions ({n_captions}) cannot exceed n_audio ({n_audio})")
    if not (noise >= 0.0 and math.isfinite(noise)):
        raise ValueError(f"noise must be finite and >= 0, got {noise}")

    rng = np.random.default_rng(seed)
    latents = rng.standard_normal((n_audio, latent_dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    audio_map = rng.standard_normal((latent_dim, d)) / math.sqrt(latent_dim)
    text_map = rng.standard_normal((latent_dim, d)) / math.sqrt(latent_dim)

    positives = rng.choice(n_audio, size=n_captions, replace=False)
    caption_latents = latents[positives]

    audio_x = latents @ audio_map + noise * rng.standard_normal((n_audio, d))
    caption_x = caption_latents @ text_map + noise * rng.standard_normal((n_captions, d))

    width = max(len(str(n_audio - 1)), len(str(n_captions - 1)), 4)
    audio_ids = [f"a{i:0{width}d}" for i in range(n_audio)]
    caption_ids = [f"c{i:0{width}d}" for i in range(n_captions)]

    cos = caption_latents @ latents.T
    ratings_all = np.clip(50.0 * (1.0 + cos), 0.0, 100.0)
    ratings_all[np.arange(n_captions), positives] = 100.0

    lists = []
    for ci, pos in enumerate(positives):
        others = rng.choice(n_audio - 1, size=list_size - 1, replace=False)
        others = others + (others >= pos)
        members = rng.permutation(np.concatenate([[pos], others]))
        lists.append(
            RelevanceList(
                caption_ids[ci],
                tuple(audio_ids[j] for j in members),
                ratings_all[ci, members],
            )
        )

    return SyntheticData(
        audio=FeatureTable(d, audio_ids, audio_x),
        captions=FeatureTable(d, caption_ids, caption_x),
        pairs=PairSet((caption_ids[ci], audio_ids[p]) for ci, p in enumerate(positives)),
        lists=lists,
        audio_latents=latents,
        caption_latents=caption_latents,
    )

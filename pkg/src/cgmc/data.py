"""Rating datasets: ingestion, split management, scaling, and RMSE."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DomainError, ParseError, ShapeError

__all__ = [
    "SPLIT_TRAIN",
    "SPLIT_VALID",
    "SPLIT_TEST",
    "RatingSet",
    "RatingScale",
    "load_movielens",
    "load_split_files",
    "save_ratings",
    "rmse",
    "scale_ratings",
]

SPLIT_TRAIN = 0
SPLIT_VALID = 1
SPLIT_TEST = 2

_SPLIT_NAMES = {SPLIT_TRAIN: "train", SPLIT_VALID: "valid", SPLIT_TEST: "test"}
_LEVEL_TOL = 1e-9


@dataclass(frozen=True)
class RatingSet:
    """Observed (user, item, rating) triples with split tags.

    ``levels`` is the ordered tuple of legal rating values; every stored
    rating must match one of them.  A (user, item) pair may appear at most
    once across all splits.
    """

    m: int
    n: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    split: np.ndarray
    levels: tuple

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        ratings = np.asarray(self.ratings, dtype=np.float64)
        split = np.asarray(self.split, dtype=np.int8)
        if not (users.shape == items.shape == ratings.shape == split.shape):
            raise ShapeError("rating arrays must share one length")
        if users.size:
            if users.min() < 0 or users.max() >= self.m:
                raise ShapeError(f"user index out of range for m={self.m}")
            if items.min() < 0 or items.max() >= self.n:
                raise ShapeError(f"item index out of range for n={self.n}")
        levels = tuple(float(v) for v in self.levels)
        if not levels:
            raise DomainError("rating levels must be nonempty")
        if list(levels) != sorted(levels):
            raise DomainError("rating levels must be ascending")
        lv = np.asarray(levels)
        if ratings.size:
            nearest = lv[np.argmin(np.abs(ratings[:, None] - lv[None, :]), axis=1)]
            bad = np.abs(ratings - nearest) > _LEVEL_TOL
            if np.any(bad):
                raise DomainError(
                    f"rating {ratings[bad][0]} not among declared levels {levels}"
                )
        keys = users * self.n + items
        if np.unique(keys).size != keys.size:
            raise DomainError("duplicate (user, item) pair in rating set")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)
        object.__setattr__(self, "split", split)
        object.__setattr__(self, "levels", levels)

    @property
    def size(self):
        return self.users.size

    def split_mask(self, split_code):
        return self.split == split_code

    def count(self, split_code):
        return int(np.count_nonzero(self.split == split_code))

    def triples(self, split_code=None):
        """Return (users, items, ratings) arrays, optionally for one split."""
        if split_code is None:
            return self.users, self.items, self.ratings
        m = self.split_mask(split_code)
        return self.users[m], self.items[m], self.ratings[m]


@dataclass(frozen=True)
class RatingScale:
    """Affine map between original rating units and the training scale.

    Scaled value is ``(r - offset) / divisor``; predictions invert it.
    """

    mode: str = "none"
    offset: float = 0.0
    divisor: float = 1.0

    def __post_init__(self):
        if self.divisor <= 0:
            raise DomainError("scale divisor must be positive")

    def scale(self, r):
        return (np.asarray(r, dtype=np.float64) - self.offset) / self.divisor

    def unscale(self, r_scaled):
        return np.asarray(r_scaled, dtype=np.float64) * self.divisor + self.offset


def scale_ratings(rs: RatingSet, mode="none"):
    """Map ratings into the training scale; returns (scaled set, scale).

    Modes: ``none`` (identity), ``divide_max`` (divide by the largest legal
    level, putting e.g. a 1..100 scale into (0, 1]), ``center_divide``
    (subtract the mean level first).  The returned metadata inverts the map
    exactly.
    """
    if mode == "none":
        scale = RatingScale()
    elif mode == "divide_max":
        scale = RatingScale(mode=mode, offset=0.0, divisor=max(rs.levels))
    elif mode == "center_divide":
        scale = RatingScale(
            mode=mode, offset=float(np.mean(rs.levels)), divisor=max(rs.levels)
        )
    else:
        raise DomainError(f"unknown scaling mode {mode!r}")
    scaled = replace(
        rs,
        ratings=scale.scale(rs.ratings),
        levels=tuple(scale.scale(np.asarray(rs.levels)).tolist()),
    )
    return scaled, scale


def rmse(predictions, actuals):
    """Root mean squared error, in whatever units the inputs share."""
    predictions = np.asarray(predictions, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    if predictions.shape != actuals.shape:
        raise ShapeError("prediction and actual vectors must have equal length")
    if predictions.size == 0:
        raise DomainError("cannot compute RMSE of zero entries")
    return float(np.sqrt(np.mean((predictions - actuals) ** 2)))


def _parse_rating_lines(path, sep, expect_fields=(3, 4)):
    """Yield (line_number, user_raw, item_raw, rating) from a rating file."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(sep)
            if len(parts) not in expect_fields:
                raise ParseError(
                    f"expected {' or '.join(map(str, expect_fields))} fields "
                    f"separated by {sep!r}, got {len(parts)}",
                    line=lineno, path=str(path),
                )
            try:
                u = int(parts[0])
                i = int(parts[1])
                r = float(parts[2])
            except ValueError:
                raise ParseError(
                    f"non-numeric rating fields in {line!r}",
                    line=lineno, path=str(path),
                ) from None
            out.append((lineno, u, i, r))
    return out


_FORMAT_SEP = {"ml100k": "\t", "ml1m": "::"}
_DEFAULT_LEVELS = (1.0, 2.0, 3.0, 4.0, 5.0)


def load_movielens(path, format="ml100k", levels=_DEFAULT_LEVELS) -> RatingSet:
    """Load a single rating file; all triples are tagged as training data.

    ``ml100k`` lines are ``user<TAB>item<TAB>rating<TAB>timestamp``; ``ml1m``
    uses ``user::item::rating::timestamp``.  Raw ids are remapped to dense
    0-based indices in ascending raw-id order.
    """
    return load_split_files(train=path, format=format, levels=levels)


def load_split_files(train, test=None, valid=None, format="ml100k",
                     levels=_DEFAULT_LEVELS, remap=True, m=None, n=None) -> RatingSet:
    """Load provided train/test(/valid) partitions with one shared id map.

    With ``remap=False`` ids are taken as already dense and 0-based (the form
    this package writes); ``m``/``n`` may then pin the matrix dimensions, for
    example to match a trained model.
    """
    if format not in _FORMAT_SEP:
        raise DomainError(f"unknown rating file format {format!r}")
    sep = _FORMAT_SEP[format]
    parts = [(train, SPLIT_TRAIN)]
    if valid is not None:
        parts.append((valid, SPLIT_VALID))
    if test is not None:
        parts.append((test, SPLIT_TEST))
    raw_u, raw_i, vals, tags = [], [], [], []
    for path, tag in parts:
        rows = _parse_rating_lines(path, sep)
        for _, u, i, r in rows:
            raw_u.append(u)
            raw_i.append(i)
            vals.append(r)
            tags.append(tag)
    raw_u = np.asarray(raw_u, dtype=np.int64)
    raw_i = np.asarray(raw_i, dtype=np.int64)
    if remap:
        u_ids = np.unique(raw_u)
        i_ids = np.unique(raw_i)
        users = np.searchsorted(u_ids, raw_u)
        items = np.searchsorted(i_ids, raw_i)
        m = int(u_ids.size)
        n = int(i_ids.size)
    else:
        users, items = raw_u, raw_i
        m = int(raw_u.max()) + 1 if m is None else m
        n = int(raw_i.max()) + 1 if n is None else n
    return RatingSet(
        m=m,
        n=n,
        users=users,
        items=items,
        ratings=np.asarray(vals, dtype=np.float64),
        split=np.asarray(tags, dtype=np.int8),
        levels=levels,
    )


def save_ratings(rs: RatingSet, path, split_code, format="ml100k"):
    """Write one split back out in the rating-line format (timestamp 0)."""
    sep = _FORMAT_SEP[format]
    u, i, r = rs.triples(split_code)
    with open(path, "w", encoding="utf-8") as fh:
        for uu, ii, rr in zip(u, i, r):
            rr_txt = f"{rr:.17g}"
            fh.write(f"{uu}{sep}{ii}{sep}{rr_txt}{sep}0\n")


def split_name(code):
    return _SPLIT_NAMES[code]

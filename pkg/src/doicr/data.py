"""Dataset loading, standardization, partitioning, and synthetic data."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from doicr.errors import ContractError

log = logging.getLogger(__name__)

MISSING_TOKENS = {"", "na", "nan", "null", "none", "?"}

# train / validation / calibration / test shares, in twentieths
SCHEMES = {
    "icp_family": (8, 4, 4, 4),
    "qd_soft": (12, 4, 0, 4),
    "image_icp_family": (10, 0, 5, 5),
    "image_qd_soft": (15, 0, 0, 5),
}
PARTS = ("train", "validation", "calibration", "test")


@dataclass(frozen=True)
class Standardizer:
    """Per-column affine map fitted on the training partition."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float

    @classmethod
    def fit(cls, X, y) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        x_scale = X.std(axis=0)
        x_scale = np.where(x_scale > 0, x_scale, 1.0)
        y_scale = float(y.std())
        return cls(X.mean(axis=0), x_scale, float(y.mean()), y_scale if y_scale > 0 else 1.0)

    def transform_x(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_scale

    def transform_y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_scale

    def inverse_x(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.x_scale + self.x_mean

    def inverse_y(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.y_scale + self.y_mean

    def width_to_raw(self, width):
        """Interval widths are translation free, so only the scale applies."""
        return np.asarray(width, dtype=np.float64) * self.y_scale


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: list[str]
    dropped_rows: int = 0
    standardization: Standardizer | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).ravel()
        if self.features.ndim != 2 or self.features.shape[0] != self.targets.size:
            raise ContractError("features must be n x v with one target per row")

    @property
    def n(self) -> int:
        return self.targets.size

    @property
    def v(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.features[idx], self.targets[idx]


def _parse(cell: str) -> float | None:
    token = cell.strip()
    if token.lower() in MISSING_TOKENS:
        return None
    try:
        value = float(token)
    except ValueError:
        return math.nan
    return value if math.isfinite(value) else None


def load_csv(path, target_column: str) -> Dataset:
    """Read a headed, comma-separated numeric table.

    Rows with a missing or unparseable cell are dropped with a warning.  A
    column in which no cell parses as a number is rejected outright.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ContractError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise ContractError(
            f"{path}: no target column {target_column!r}; available columns: {', '.join(header)}"
        )
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise ContractError(f"{path}: no data rows")

    parsed = []
    bad_cells = np.zeros(len(header), dtype=np.int64)
    seen_cells = np.zeros(len(header), dtype=np.int64)
    for r in body:
        cells = r + [""] * (len(header) - len(r))
        vals = [_parse(c) for c in cells[: len(header)]]
        for j, v in enumerate(vals):
            if v is not None:
                seen_cells[j] += 1
                if math.isnan(v):
                    bad_cells[j] += 1
        parsed.append(vals if len(r) <= len(header) else None)

    non_numeric = [h for h, bad, seen in zip(header, bad_cells, seen_cells) if seen and bad == seen]
    if non_numeric:
        raise ContractError(f"{path}: non-numeric columns: {', '.join(non_numeric)}")

    keep, dropped = [], 0
    for vals in parsed:
        if vals is None or any(v is None or math.isnan(v) for v in vals):
            dropped += 1
            continue
        keep.append(vals)
    if dropped:
        log.warning("%s: dropped %d row(s) with missing or malformed cells", path, dropped)
    if not keep:
        raise ContractError(f"{path}: every row was dropped")
    table = np.array(keep, dtype=np.float64)
    t = header.index(target_column)
    feature_cols = [j for j in range(len(header)) if j != t]
    return Dataset(
        features=table[:, feature_cols],
        targets=table[:, t],
        feature_names=[header[j] for j in feature_cols],
        dropped_rows=dropped,
    )


@dataclass
class DataSplits:
    train: np.ndarray
    validation: np.ndarray
    calibration: np.ndarray
    test: np.ndarray
    scheme: str
    seed: int
    n: int = field(default=0)

    def __getitem__(self, part: str) -> np.ndarray:
        if part not in PARTS:
            raise KeyError(part)
        return getattr(self, part)

    def sizes(self) -> tuple[int, int, int, int]:
        return tuple(len(self[p]) for p in PARTS)

    def to_json(self) -> str:
        doc = {"scheme": self.scheme, "seed": self.seed, "n": self.n}
        doc.update({p: [int(i) for i in self[p]] for p in PARTS})
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DataSplits":
        doc = json.loads(text)
        return cls(
            **{p: np.array(doc[p], dtype=np.int64) for p in PARTS},
            scheme=doc["scheme"],
            seed=doc["seed"],
            n=doc["n"],
        )


def make_splits(n: int, scheme: str, seed: int) -> DataSplits:
    """Shuffle ``range(n)`` and slice it at the scheme's proportions.

    Rounding remainders go to the training partition.
    """
    if scheme not in SCHEMES:
        raise ContractError(f"unknown split scheme {scheme!r}; choose from {sorted(SCHEMES)}")
    shares = SCHEMES[scheme]
    sizes = [n * s // 20 for s in shares]
    if any(size == 0 and share > 0 for size, share in zip(sizes, shares)):
        raise ContractError(f"n={n} is too small for scheme {scheme!r}")
    sizes[0] += n - sum(sizes)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0, *sizes])
    parts = [np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    return DataSplits(*parts, scheme=scheme, seed=seed, n=n)


def standardize(dataset: Dataset, train_idx) -> Dataset:
    """Return a copy scaled with statistics from ``train_idx`` rows only."""
    X, y = dataset.subset(train_idx)
    st = Standardizer.fit(X, y)
    return Dataset(
        features=st.transform_x(dataset.features),
        targets=st.transform_y(dataset.targets),
        feature_names=list(dataset.feature_names),
        dropped_rows=dataset.dropped_rows,
        standardization=st,
    )


NOISE_FLOOR = 0.2


def noise_scale(x2):
    return NOISE_FLOOR + np.abs(x2)


def synth_heteroscedastic(n: int, dims: int = 2, noise_seed: int = 0) -> Dataset:
    """``y = sin(pi x1) + (0.2 + |x2|) z`` with ``x ~ U[-1, 1]^dims``."""
    if n < 1 or dims < 2:
        raise ContractError("need n >= 1 and dims >= 2")
    rng = np.random.default_rng(noise_seed)
    X = rng.uniform(-1.0, 1.0, size=(n, dims))
    z = rng.standard_normal(n)
    y = np.sin(np.pi * X[:, 0]) + noise_scale(X[:, 1]) * z
    return Dataset(X, y, [f"x{i + 1}" for i in range(dims)])

"""Ingestion, rescaling and mirror reflection of region time series.

Every downstream estimator treats a length-T series as living on a circle of
circumference 2: the samples occupy [0, 1] on the grid ``t_j = j / (T - 1)``
and their mirror image fills (1, 2].
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from heatdfc.errors import ConfigError, DegenerateSignal

ZYGOSITIES = ("MZ", "DZ")


@dataclass(frozen=True)
class RoiMatrix:
    """One subject's ``T x p`` matrix of region-averaged signals.

    Parameters
    ----------
    values : ndarray of shape (T, p)
        Rows are time points (units of TR), columns are regions.
    subject_id : str
    tr_seconds : float
        Sampling interval, carried as metadata only.
    """

    values: np.ndarray
    subject_id: str = "subject"
    tr_seconds: float = 2.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"RoiMatrix needs a 2-D array, got shape {values.shape}")
        n_time, n_regions = values.shape
        if n_time < 4:
            raise ValueError(f"need at least 4 time points, got {n_time}")
        if n_regions < 2:
            raise ValueError(f"need at least 2 regions, got {n_regions}")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"subject {self.subject_id}: non-finite values in input")
        if not self.tr_seconds > 0:
            raise ValueError("tr_seconds must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def n_regions(self) -> int:
        return self.values.shape[1]

    def rescaled(self) -> "RoiMatrix":
        """Return a copy with every column mapped onto [0, 1]."""
        cols = []
        for r in range(self.n_regions):
            try:
                cols.append(rescale_unit(self.values[:, r]))
            except DegenerateSignal as exc:
                raise DegenerateSignal(
                    f"subject {self.subject_id}, region {r}: {exc}"
                ) from None
        return RoiMatrix(np.column_stack(cols), self.subject_id, self.tr_seconds)


@dataclass(frozen=True)
class CircularSeries:
    """A series of ``2T`` samples, mirror symmetric about its midpoint."""

    values: np.ndarray
    origin_length: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (2 * self.origin_length,):
            raise ValueError(
                f"circular series must have length {2 * self.origin_length}, "
                f"got {values.shape}"
            )
        if not np.array_equal(values, values[::-1]):
            raise ValueError("circular series is not mirror symmetric")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    @property
    def original(self) -> np.ndarray:
        return self.values[: self.origin_length]


def time_grid(n_time: int) -> np.ndarray:
    """Sample positions ``j / (T - 1)`` of the original series on [0, 1]."""
    if n_time < 2:
        raise ValueError("time grid needs at least 2 points")
    return np.arange(n_time) / (n_time - 1)


def rescale_unit(column) -> np.ndarray:
    """Affinely map a vector onto [0, 1].

    Raises
    ------
    DegenerateSignal
        If the vector is constant.
    """
    x = np.asarray(column, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("rescale_unit expects a 1-D vector of length >= 2")
    if not np.all(np.isfinite(x)):
        raise ValueError("rescale_unit received non-finite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        raise DegenerateSignal("constant signal cannot be rescaled")
    out = (x - lo) / (hi - lo)
    # pin the extremes exactly, rounding can leave 1 - eps
    out[x == lo] = 0.0
    out[x == hi] = 1.0
    return out


def mirror_reflect(x) -> CircularSeries:
    """Append the reversed series so that ``out[j] == out[2T - 1 - j]``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("mirror_reflect needs a 1-D series with at least 2 samples")
    return CircularSeries(np.concatenate([x, x[::-1]]), x.size)


def mirror_reflect_matrix(values: np.ndarray) -> np.ndarray:
    """Column-wise mirror reflection of a ``T x p`` array to ``2T x p``."""
    values = np.asarray(values, dtype=float)
    return np.concatenate([values, values[::-1]], axis=0)


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------

def read_roi_csv(path, subject_id=None, tr_seconds=2.0) -> RoiMatrix:
    """Read a ``t,roi_1,...,roi_p`` CSV file."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "t" or len(header) < 3:
            raise ValueError(f"{path}: header must be 't,roi_1,...,roi_p'")
        rows = [row for row in reader if row]
    data = np.array([[float(v) for v in row] for row in rows], dtype=float)
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    return RoiMatrix(data[:, 1:], subject_id or path.stem, tr_seconds)


def write_roi_csv(path, roi: RoiMatrix):
    path = Path(path)
    header = ["t"] + [f"roi_{r + 1}" for r in range(roi.n_regions)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for j, row in enumerate(roi.values):
            writer.writerow([j] + [format(v, ".17g") for v in row])


@dataclass(frozen=True)
class SubjectEntry:
    subject_id: str
    path: Path
    zygosity: str | None = None
    pair_id: str | None = None
    twin: int | None = None


@dataclass
class Manifest:
    """List of subjects with their files and twin metadata."""

    subjects: list[SubjectEntry]
    tr_seconds: float = 2.0
    extra: dict = field(default_factory=dict)

    def twin_pairs(self, zygosity):
        """Complete ``(twin1, twin2)`` subject-id pairs of one zygosity.

        Subjects without a partner are skipped; they still take part in
        state estimation.
        """
        groups: dict[str, dict[int, str]] = {}
        for s in self.subjects:
            if s.zygosity == zygosity and s.pair_id is not None:
                groups.setdefault(s.pair_id, {})[s.twin] = s.subject_id
        pairs = []
        for pair_id in sorted(groups):
            members = groups[pair_id]
            if 1 in members and 2 in members:
                pairs.append((members[1], members[2]))
        return pairs


def load_manifest(path, check_files=True) -> Manifest:
    """Load and validate a subject manifest.

    Paths are resolved relative to the manifest's directory. With
    ``check_files`` every referenced file must exist, so a broken manifest is
    rejected before any computation starts.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    with path.open() as fh:
        raw = json.load(fh)
    base = path.parent
    entries = []
    seen = set()
    for item in raw.get("subjects", []):
        sid = str(item["id"])
        if sid in seen:
            raise ConfigError(f"duplicate subject id {sid!r} in manifest")
        seen.add(sid)
        zyg = item.get("zygosity")
        if zyg is not None and zyg not in ZYGOSITIES:
            raise ConfigError(f"subject {sid}: unknown zygosity {zyg!r}")
        fpath = base / item["path"]
        if check_files and not fpath.is_file():
            raise ConfigError(f"subject {sid}: file not found: {fpath}")
        twin = item.get("twin")
        entries.append(
            SubjectEntry(
                sid,
                fpath,
                zyg,
                None if item.get("pair") is None else str(item["pair"]),
                None if twin is None else int(twin),
            )
        )
    if not entries:
        raise ConfigError(f"manifest {path} lists no subjects")
    extra = {k: v for k, v in raw.items() if k not in ("subjects", "tr_seconds")}
    return Manifest(entries, float(raw.get("tr_seconds", 2.0)), extra)


def write_manifest(path, manifest: Manifest):
    path = Path(path)
    base = path.parent
    subjects = []
    for s in manifest.subjects:
        try:
            rel = Path(s.path).relative_to(base)
        except ValueError:
            rel = Path(s.path)
        subjects.append(
            {
                "id": s.subject_id,
                "path": rel.as_posix(),
                "zygosity": s.zygosity,
                "pair": s.pair_id,
                "twin": s.twin,
            }
        )
    payload = {"tr_seconds": manifest.tr_seconds, **manifest.extra, "subjects": subjects}
    with path.open("w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")

"""FRED-MD vintage ingestion: fetch, parse, transform-code application,
ragged-edge extrapolation, standardization, and information-set windowing.

Vintage CSVs carry a header row of mnemonics, a second row of transform codes
(1..7), then monthly rows with the date in the first column. Dates accept both
M/D/YYYY and ISO forms. Missing cells map to NaN, never zero.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("densecast.fredmd")

__all__ = [
    "VintageTable",
    "PanelMatrix",
    "TargetSeries",
    "InformationSet",
    "SequenceSet",
    "FetchError",
    "ParseError",
    "DomainError",
    "DataError",
    "InsufficientDataError",
    "ConfigurationError",
    "WindowingError",
    "DFM_MNEMONICS",
    "CACHE_ENV",
    "month_serial",
    "serial_month",
    "parse_month",
    "format_month",
    "fetch_vintage",
    "parse_vintage",
    "apply_tcode",
    "tcode_order",
    "transform_aligned",
    "standardize",
    "extrapolate_ragged_edge",
    "build_information_set",
    "dfm_feature_subset",
    "write_panel_snapshot",
    "read_panel_snapshot",
]

CACHE_ENV = "DENSECAST_CACHE"
FREDMD_BASE_URL = "https://files.stlouisfed.org/files/htdocs/fred-md/monthly"

# Restricted panel used for the factor extraction step, in documented order.
DFM_MNEMONICS = ("IPMANSICS", "W875RX1", "CMRMTSPL", "PAYEMS")

_TCODE_ORDERS = {1: 0, 2: 1, 3: 2, 4: 0, 5: 1, 6: 2, 7: 2}


class FetchError(RuntimeError):
    def __init__(self, msg, retryable=False):
        super().__init__(msg)
        self.retryable = retryable


class ParseError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DataError(ValueError):
    pass


class InsufficientDataError(DataError):
    pass


class ConfigurationError(ValueError):
    pass


class WindowingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Calendar helpers ("YYYY-MM" strings, integer month serials)
# ---------------------------------------------------------------------------

_MDY = re.compile(r"^(\d{1,2})/(\d{1,2})/(\d{4})$")
_ISO = re.compile(r"^(\d{4})-(\d{1,2})(?:-(\d{1,2}))?$")


def parse_month(text: str) -> tuple[int, int]:
    """Parse M/D/YYYY or ISO date text to (year, month)."""
    text = text.strip()
    m = _MDY.match(text)
    if m:
        return int(m.group(3)), int(m.group(1))
    m = _ISO.match(text)
    if m:
        return int(m.group(1)), int(m.group(2))
    raise ParseError(f"unrecognized date {text!r}")


def month_serial(year: int, month: int) -> int:
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range: {month}")
    return year * 12 + (month - 1)


def serial_month(serial: int) -> tuple[int, int]:
    return serial // 12, serial % 12 + 1


def format_month(year: int, month: int) -> str:
    return f"{year:04d}-{month:02d}"


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VintageTable:
    """One dated FRED-MD release: raw monthly series plus transform codes."""

    release_tag: str
    dates: tuple            # "YYYY-MM" strings, strictly increasing monthly
    mnemonics: tuple
    tcodes: np.ndarray
    values: np.ndarray      # months x series, NaN = missing

    def __post_init__(self):
        object.__setattr__(self, "tcodes", np.asarray(self.tcodes, dtype=int))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if len(self.tcodes) != len(self.mnemonics):
            raise ValueError("tcodes length must equal mnemonics length")
        if self.values.shape != (len(self.dates), len(self.mnemonics)):
            raise ValueError("values shape inconsistent with dates/mnemonics")
        serials = [month_serial(*parse_month(d)) for d in self.dates]
        if any(b - a != 1 for a, b in zip(serials, serials[1:])):
            raise ValueError("dates must increase in strictly monthly steps")
        counts = np.sum(~np.isnan(self.values), axis=0)
        if np.any(counts < 2):
            bad = [self.mnemonics[j] for j in np.flatnonzero(counts < 2)]
            raise ValueError(f"columns with <2 observations: {bad}")

    def column(self, mnemonic: str) -> np.ndarray:
        return self.values[:, self.mnemonics.index(mnemonic)]


@dataclass(frozen=True)
class PanelMatrix:
    """Transformed, standardized monthly feature panel.

    After ragged-edge extrapolation a panel has no missing values at all;
    filter-based consumers may keep trailing NaN per column. Interior gaps are
    always rejected.
    """

    dates: tuple
    values: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.shape[0] != len(self.dates):
            raise ValueError("values rows must match dates")
        for j in range(self.values.shape[1]):
            missing = np.isnan(self.values[:, j])
            if missing.any():
                first = int(np.argmax(missing))
                if not missing[first:].all():
                    raise DataError(f"column {j} has interior missing values")

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values).any()

    def require_complete(self) -> "PanelMatrix":
        if not self.complete:
            raise DataError("panel still has missing values after extrapolation")
        return self


@dataclass(frozen=True)
class TargetSeries:
    """Quarterly GDP growth on the panel's quarter grid; month of quarter q is 3q."""

    growth: np.ndarray      # growth[i] belongs to quarter i+1
    first_quarter: int = 1

    def __post_init__(self):
        g = np.asarray(self.growth, dtype=float)
        if not np.all(np.isfinite(g)):
            raise ValueError("growth must be finite")
        object.__setattr__(self, "growth", g)

    @property
    def quarters(self) -> np.ndarray:
        return np.arange(self.first_quarter, self.first_quarter + self.growth.size)

    @property
    def monthly_index(self) -> np.ndarray:
        return 3 * self.quarters

    def value(self, q: int) -> float:
        i = q - self.first_quarter
        if not 0 <= i < self.growth.size:
            raise KeyError(f"quarter {q} outside target range")
        return float(self.growth[i])

    def has(self, q: int) -> bool:
        return 0 <= q - self.first_quarter < self.growth.size

    def to_monthly(self, total_months: int) -> np.ndarray:
        """Monthly grid with growth at rows 3q-1 (0-based) and NaN elsewhere."""
        out = np.full(total_months, np.nan)
        for q, g in zip(self.quarters, self.growth):
            row = 3 * q - 1
            if 0 <= row < total_months:
                out[row] = g
        return out


@dataclass(frozen=True)
class InformationSet:
    """Intra-quarterly information set m1/m2/m3: data through month 3(q-1)+k."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("m1", "m2", "m3"):
            raise ValueError(f"kind must be m1, m2, or m3, got {self.kind!r}")

    @property
    def k(self) -> int:
        return int(self.kind[1])

    def cutoff_month(self, q: int) -> int:
        return 3 * (q - 1) + self.k


@dataclass(frozen=True)
class Sequence:
    X: np.ndarray
    y: float
    q: int


@dataclass(frozen=True)
class SequenceSet:
    """Per-quarter input sequences (X ends at the info-set cutoff month)."""

    sequences: tuple
    seq_len: int
    kind: str

    def __post_init__(self):
        for s in self.sequences:
            if s.X.shape[0] != self.seq_len:
                raise ValueError("all sequences must have seq_len rows")

    def __len__(self):
        return len(self.sequences)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        X = np.stack([s.X for s in self.sequences])
        y = np.array([s.y for s in self.sequences])
        q = np.array([s.q for s in self.sequences])
        return X, y, q


# ---------------------------------------------------------------------------
# Fetch and parse
# ---------------------------------------------------------------------------

_TAG = re.compile(r"^\d{4}-\d{2}$")


def _validate_tag(tag: str) -> None:
    if tag == "current":
        return
    if not _TAG.match(tag):
        raise ValueError(f"release tag must be YYYY-MM or 'current', got {tag!r}")
    serial = month_serial(*parse_month(tag))
    if not month_serial(2012, 1) <= serial <= month_serial(2022, 12):
        raise ValueError(f"release tag {tag} outside the 2012-01..2022-12 archive range")


def fetch_vintage(release_tag: str, source_url: str = FREDMD_BASE_URL,
                  cache_dir: str = ".densecast_cache", session=None) -> VintageTable:
    """Download (or read from cache) one vintage CSV and parse it.

    The cache directory may be overridden with the DENSECAST_CACHE environment
    variable. Writes are serialized through an exclusive file lock so parallel
    fetchers cannot corrupt the cache. A cache hit performs no network calls.
    """
    from filelock import FileLock

    _validate_tag(release_tag)
    cache_dir = os.environ.get(CACHE_ENV, cache_dir)
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"{release_tag}.csv")
    if os.path.exists(path):
        with open(path, "rb") as fh:
            return parse_vintage(fh.read(), release_tag)

    url = f"{source_url.rstrip('/')}/{release_tag}.csv"
    if session is None:
        import requests
        session = requests
    try:
        resp = session.get(url, timeout=60)
    except Exception as exc:
        raise FetchError(f"network failure fetching vintage {release_tag}: {exc}",
                         retryable=True) from exc
    if getattr(resp, "status_code", 0) != 200:
        raise FetchError(
            f"vintage {release_tag} not available at {url} "
            f"(HTTP {getattr(resp, 'status_code', '?')})")
    data = resp.content
    table = parse_vintage(data, release_tag)  # validate before caching
    with FileLock(path + ".lock"):
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    return table


def _cell_to_float(cell: str) -> float:
    cell = cell.strip()
    if cell in ("", "NA", "NaN", "nan", "."):
        return np.nan
    return float(cell)


def parse_vintage(csv_bytes: bytes, release_tag: str = "") -> VintageTable:
    """Parse raw vintage CSV bytes into a VintageTable."""
    text = csv_bytes.decode("utf-8-sig") if isinstance(csv_bytes, bytes) else csv_bytes
    rows = [r for r in csv.reader(io.StringIO(text))]
    while rows and all(not c.strip() for c in rows[-1]):
        rows.pop()
    if len(rows) < 4:
        raise ParseError("vintage CSV needs header, tcode row, and >= 2 data rows")
    header = rows[0]
    mnemonics = tuple(c.strip() for c in header[1:])
    width = len(header)

    tcode_row = rows[1]
    if len(tcode_row) != width:
        raise ParseError(f"line 2: expected {width} cells, got {len(tcode_row)}")
    tcodes = []
    for j, cell in enumerate(tcode_row[1:]):
        try:
            code = int(float(cell))
        except ValueError as exc:
            raise ParseError(f"line 2: transform code {cell!r} is not numeric") from exc
        if not 1 <= code <= 7:
            raise ParseError(
                f"line 2: transform code {code} for {mnemonics[j]} outside 1..7")
        tcodes.append(code)

    dates = []
    values = []
    for i, row in enumerate(rows[2:], start=3):
        if all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise ParseError(f"line {i}: expected {width} cells, got {len(row)}")
        y, m = parse_month(row[0])
        dates.append(format_month(y, m))
        try:
            values.append([_cell_to_float(c) for c in row[1:]])
        except ValueError as exc:
            raise ParseError(f"line {i}: {exc}") from exc

    return VintageTable(release_tag=release_tag, dates=tuple(dates),
                        mnemonics=mnemonics, tcodes=np.array(tcodes),
                        values=np.array(values, dtype=float))


# ---------------------------------------------------------------------------
# Transform codes
# ---------------------------------------------------------------------------

def tcode_order(code: int) -> int:
    """How many leading observations the transform consumes."""
    try:
        return _TCODE_ORDERS[int(code)]
    except KeyError:
        raise ValueError(f"transform code {code} outside 1..7") from None


def apply_tcode(series, code: int) -> np.ndarray:
    """Apply one of the seven standard transforms; output shrinks by its order.

    1 none, 2 first diff, 3 second diff, 4 log, 5 diff log, 6 second diff log,
    7 diff of the exact percent change. Codes 4..7 require strictly positive
    observed values.
    """
    x = np.asarray(series, dtype=float)
    code = int(code)
    if code not in _TCODE_ORDERS:
        raise ValueError(f"transform code {code} outside 1..7")
    if code >= 4:
        bad = np.flatnonzero(~np.isnan(x) & (x <= 0.0))
        if bad.size:
            raise DomainError(
                f"non-positive value {x[bad[0]]} at index {bad[0]} under log transform")
    if code == 1:
        return x.copy()
    if code == 2:
        return np.diff(x)
    if code == 3:
        return np.diff(x, 2)
    if code == 4:
        return np.log(x)
    if code == 5:
        return np.diff(np.log(x))
    if code == 6:
        return np.diff(np.log(x), 2)
    # code 7: growth-rate change
    growth = x[1:] / x[:-1] - 1.0
    return np.diff(growth)


def transform_aligned(vintage: VintageTable) -> np.ndarray:
    """Transform every column, left-padding with NaN to keep date alignment.

    Row t of the output is the transformed value dated vintage.dates[t]; the
    first `order` rows of each column are NaN by construction.
    """
    Tn, N = vintage.values.shape
    out = np.full((Tn, N), np.nan)
    for j in range(N):
        code = int(vintage.tcodes[j])
        transformed = apply_tcode(vintage.values[:, j], code)
        out[tcode_order(code):, j] = transformed
    return out


def standardize(values, fit_rows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-score columns using mean/std (ddof=1) measured on `fit_rows` only.

    The fitting window must be fully observed; zero-spread columns are
    rejected. Constants are returned for reuse on later slices so validation
    and test windows never leak into them.
    """
    values = np.asarray(values, dtype=float)
    fit = values[fit_rows]
    if np.isnan(fit).any():
        raise DataError("standardization window contains missing values")
    means = fit.mean(axis=0)
    stds = fit.std(axis=0, ddof=1)
    if np.any(stds <= 0.0):
        bad = np.flatnonzero(stds <= 0.0)
        raise DataError(f"zero-variance columns in the fitting window: {bad.tolist()}")
    return (values - means) / stds, means, stds


def extrapolate_ragged_edge(values, cutoff_row: int | None = None) -> np.ndarray:
    """Fill trailing missing values by iterating per-column AR(1) forecasts.

    Each column's (alpha, beta) comes from OLS with intercept on its own
    consecutive observed pairs: xhat_{t+1} = alpha + beta x_t. Interior gaps
    are data errors; columns with fewer than 8 observations are rejected.
    Deterministic: identical inputs yield bit-identical fills.
    """
    values = np.asarray(values, dtype=float)
    if cutoff_row is None:
        cutoff_row = values.shape[0] - 1
    if not 0 <= cutoff_row < values.shape[0]:
        raise ValueError("cutoff_row outside the panel")
    out = values[: cutoff_row + 1].copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        missing = np.isnan(col)
        if not missing.any():
            continue
        first = int(np.argmax(missing))
        if not missing[first:].all():
            raise DataError(f"column {j} has an interior gap")
        n_obs = first
        if n_obs < 8:
            raise InsufficientDataError(
                f"column {j} has only {n_obs} observations; need >= 8")
        x0, x1 = col[: n_obs - 1], col[1:n_obs]
        beta = np.cov(x0, x1, ddof=1)[0, 1] / np.var(x0, ddof=1)
        alpha = x1.mean() - beta * x0.mean()
        for t in range(first, cutoff_row + 1):
            col[t] = alpha + beta * col[t - 1]
    return out


def build_information_set(panel_values, target: TargetSeries, kind: str,
                          seq_len: int, quarters=None) -> SequenceSet:
    """One (X, y, q) sequence per quarter whose l-month window fits the sample.

    X covers months m-l+1 .. m with m = 3(q-1)+k; quarters without enough
    history or without an observed target are excluded.
    """
    panel_values = np.asarray(panel_values, dtype=float)
    info = InformationSet(kind)
    if quarters is None:
        quarters = target.quarters
    seqs = []
    for q in quarters:
        q = int(q)
        if not target.has(q):
            continue
        m = info.cutoff_month(q)
        lo, hi = m - seq_len, m  # 0-based rows for months m-l+1 .. m
        if lo < 0 or hi > panel_values.shape[0]:
            continue
        X = panel_values[lo:hi]
        if np.isnan(X).any():
            raise DataError(f"sequence for quarter {q} contains missing values")
        seqs.append(Sequence(X=X.copy(), y=target.value(q), q=q))
    if not seqs:
        raise WindowingError(
            f"no quarter admits a {seq_len}-month window under {kind}")
    return SequenceSet(sequences=tuple(seqs), seq_len=seq_len, kind=kind)


# ---------------------------------------------------------------------------
# DFM feature subset
# ---------------------------------------------------------------------------

def _resolve_mnemonic(vintage: VintageTable, name: str) -> str:
    candidates = (name, name + "x", name.rstrip("x"))
    for cand in candidates:
        if cand in vintage.mnemonics:
            return cand
    raise ConfigurationError(
        f"mnemonic {name} not in vintage {vintage.release_tag or '?'}; "
        f"tried {list(dict.fromkeys(candidates))}")


def dfm_feature_subset(vintage: VintageTable, mnemonics=DFM_MNEMONICS) -> PanelMatrix:
    """Transformed, standardized panel of the factor-extraction series.

    Ragged trailing missingness is preserved (the Kalman filter predicts
    through it); standardization constants come from each column's observed
    rows, which never extend past the vintage cutoff.
    """
    resolved = [_resolve_mnemonic(vintage, name) for name in mnemonics]
    idx = [vintage.mnemonics.index(name) for name in resolved]
    transformed = transform_aligned(vintage)[:, idx]
    order = max(tcode_order(int(vintage.tcodes[j])) for j in idx)
    transformed = transformed[order:]
    dates = vintage.dates[order:]
    means = np.empty(len(idx))
    stds = np.empty(len(idx))
    out = transformed.copy()
    for j in range(len(idx)):
        col = transformed[:, j]
        obs = ~np.isnan(col)
        means[j] = col[obs].mean()
        stds[j] = col[obs].std(ddof=1)
        if stds[j] <= 0:
            raise DataError(f"zero-variance series {mnemonics[j]}")
        out[:, j] = (col - means[j]) / stds[j]
    return PanelMatrix(dates=tuple(dates), values=out, feature_means=means,
                       feature_stds=stds, feature_names=tuple(mnemonics))


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def write_panel_snapshot(panel: PanelMatrix, csv_path: str,
                         tcodes=None, cutoff: str | None = None) -> None:
    """Panel snapshot as CSV plus a JSON sidecar with tcodes, standardization
    constants, and cutoff metadata."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        names = panel.feature_names or tuple(
            f"f{j}" for j in range(panel.values.shape[1]))
        writer.writerow(("date",) + tuple(names))
        for date, row in zip(panel.dates, panel.values):
            writer.writerow([date] + [repr(float(v)) for v in row])
    sidecar = {
        "feature_names": list(panel.feature_names),
        "feature_means": [float(v) for v in panel.feature_means],
        "feature_stds": [float(v) for v in panel.feature_stds],
        "tcodes": [int(t) for t in tcodes] if tcodes is not None else None,
        "cutoff": cutoff,
    }
    with open(csv_path + ".meta.json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)


def read_panel_snapshot(csv_path: str) -> PanelMatrix:
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    dates = tuple(r[0] for r in rows[1:])
    values = np.array([[float(c) for c in r[1:]] for r in rows[1:]])
    with open(csv_path + ".meta.json") as fh:
        meta = json.load(fh)
    return PanelMatrix(dates=dates, values=values,
                       feature_means=np.array(meta["feature_means"]),
                       feature_stds=np.array(meta["feature_stds"]),
                       feature_names=tuple(meta["feature_names"]))

"""AMI data: ingestion, synthetic generation, cleaning, scaling, splits and corruption.

An :class:`AmiHistory` is stored densely as customer x hour arrays on a
regular hourly grid; absent readings are NaN with a ``missing`` quality flag.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import grid_model as grid

log = logging.getLogger(__name__)

MEASURED, MISSING, REMOVED_BAD, PSEUDO = 0, 1, 2, 3
QUALITY_NAMES = ("measured", "missing", "removed_bad", "pseudo")
CSV_HEADER = ["timestamp", "customer_id", "kw", "voltage_pu", "quality"]
POWER_FACTOR = 0.95
Q_PER_P = math.tan(math.acos(POWER_FACTOR))
HOUR = np.timedelta64(1, "h")


class SchemaError(ValueError):
    pass


class DuplicateRecordError(ValueError):
    def __init__(self, offenders):
        shown = ", ".join(f"{c}@{t}" for c, t in offenders[:10])
        super().__init__(f"{len(offenders)} duplicate (customer, timestamp) records: {shown}")
        self.offenders = offenders


class MissingFeatureError(LookupError):
    pass


@dataclass(frozen=True, eq=False)
class AmiHistory:
    timestamps: np.ndarray  # (T,) datetime64[h], hourly and strictly increasing
    customer_ids: tuple
    kw: np.ndarray  # (C, T)
    voltage: np.ndarray  # (C, T) pu
    quality: np.ndarray  # (C, T) int8 codes, see QUALITY_NAMES
    meta: dict = field(default_factory=dict)

    @property
    def n_customers(self):
        return len(self.customer_ids)

    @property
    def n_hours(self):
        return len(self.timestamps)

    def index(self, customer_id):
        return self.customer_ids.index(customer_id)

    def measured(self):
        return self.quality == MEASURED

    def hours(self, idx):
        """Sub-history restricted to the given hour indices (or boolean mask)."""
        idx = np.asarray(idx)
        return replace(
            self,
            timestamps=self.timestamps[idx],
            kw=self.kw[:, idx],
            voltage=self.voltage[:, idx],
            quality=self.quality[:, idx],
        )

    def customers(self, ids):
        rows = [self.index(c) for c in ids]
        return replace(
            self,
            customer_ids=tuple(ids),
            kw=self.kw[rows],
            voltage=self.voltage[rows],
            quality=self.quality[rows],
        )


def empty_history():
    return AmiHistory(
        np.array([], dtype="datetime64[h]"), (), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0), np.int8)
    )


def hour_grid(start, n_hours):
    return np.datetime64(start, "h") + np.arange(n_hours) * HOUR


# --------------------------------------------------------------------------
# CSV I/O


def _parse_float(text):
    try:
        v = float(text)
    except (TypeError, ValueError):
        return None
    return v if math.isfinite(v) else None


def load_ami_csv(path):
    """Read the long-format AMI CSV into a dense history.

    Lines starting with ``#`` are comments. Rows whose kW or voltage cannot
    be parsed are kept as ``missing``; their count is stored in
    ``history.meta["unparsable_rows"]``.
    """
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != CSV_HEADER:
        raise SchemaError(f"expected header {','.join(CSV_HEADER)}, got {header}")
    rows = []
    bad = 0
    for row in reader:
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise SchemaError(f"row has {len(row)} fields: {row}")
        ts, cid, kw_s, v_s, q_s = (x.strip() for x in row)
        try:
            t = np.datetime64(ts, "h")
        except ValueError:
            raise SchemaError(f"bad timestamp {ts!r}") from None
        kw_v, v_v = _parse_float(kw_s), _parse_float(v_s)
        q = q_s if q_s in QUALITY_NAMES else "measured"
        if kw_v is None or v_v is None:
            if q == "measured":
                bad += 1
            q = "missing" if q == "measured" else q
        rows.append((t, cid, kw_v, v_v, QUALITY_NAMES.index(q)))
    if not rows:
        h = empty_history()
        h.meta["unparsable_rows"] = 0
        return h
    seen = set()
    dups = []
    for t, cid, *_ in rows:
        if (cid, t) in seen:
            dups.append((cid, str(t)))
        seen.add((cid, t))
    if dups:
        raise DuplicateRecordError(dups)
    customers = tuple(sorted({r[1] for r in rows}))
    t0 = min(r[0] for r in rows)
    t1 = max(r[0] for r in rows)
    n = int((t1 - t0) / HOUR) + 1
    ts = hour_grid(t0, n)
    kw = np.full((len(customers), n), np.nan)
    volt = np.full((len(customers), n), np.nan)
    qual = np.full((len(customers), n), MISSING, dtype=np.int8)
    cidx = {c: i for i, c in enumerate(customers)}
    for t, cid, kw_v, v_v, q in rows:
        i, j = cidx[cid], int((t - t0) / HOUR)
        qual[i, j] = q
        if q != MISSING:
            kw[i, j] = np.nan if kw_v is None else kw_v
            volt[i, j] = np.nan if v_v is None else v_v
    if bad:
        log.warning("%d AMI rows with unparsable values flagged missing", bad)
    return AmiHistory(ts, customers, kw, volt, qual, {"unparsable_rows": bad})


def _fmt(v):
    return "" if not np.isfinite(v) else repr(float(v))


def write_ami_csv(history, path, comment=None, include_missing=True):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        stamps = [str(t) for t in history.timestamps]
        for i, cid in enumerate(history.customer_ids):
            for j, ts in enumerate(stamps):
                q = history.quality[i, j]
                if q == MISSING and not include_missing:
                    continue
                w.writerow([ts, cid, _fmt(history.kw[i, j]), _fmt(history.voltage[i, j]), QUALITY_NAMES[q]])


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic load model.

    Load of customer c at hour t is
    ``base_c * season_c(t) * week_c(t) * day_c(t) * (1 + common(t)) * (1 + idio_c(t))``
    where ``common`` is a feeder-wide AR(1) weather factor and ``idio`` an
    AR(1) per-customer term.
    """

    start: str = "2014-06-01"
    season_amplitude: tuple = (0.25, 0.40)
    common_std: float = 0.08
    common_phi: float = 0.97
    idio_std: float = 0.12
    idio_phi: float = 0.8
    kw_meter_sigma: float = 1.0 / 300.0  # 3 sigma = 1 % of reading
    voltage_meter_sigma: float = 5e-4
    load_factor: tuple = (0.35, 0.55)
    commercial_share: float = 0.3
    flat: bool = False  # flat diurnal/weekly/seasonal shapes


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    timestamps: np.ndarray
    customer_ids: tuple
    kw: np.ndarray  # (C, T) true consumption
    kvar: np.ndarray
    voltages: np.ndarray  # (T, n_bus, 3) complex pu
    currents: np.ndarray  # (T, n_branch, 3) complex pu
    archetype: tuple


def hour_of_day(ts):
    return (ts.astype("datetime64[h]").astype(np.int64) % 24).astype(int)


def day_of_week(ts):
    """Monday = 0."""
    days = ts.astype("datetime64[D]").astype(np.int64)
    return ((days + 3) % 7).astype(int)


def day_of_year(ts):
    d = ts.astype("datetime64[D]")
    return (d - d.astype("datetime64[Y]")).astype(int)


def _bump(hours, center, width):
    d = np.abs(((hours - center) + 12) % 24 - 12)
    return np.exp(-0.5 * (d / width) ** 2)


def _ar1(rng, n, phi, std, shape=()):
    """Stationary AR(1) paths along the last axis."""
    from scipy.signal import lfilter

    eps = rng.normal(0.0, std * math.sqrt(1 - phi**2), size=shape + (n,))
    eps[..., 0] = rng.normal(0.0, std, size=shape)
    return lfilter([1.0], [1.0, -phi], eps, axis=-1)


def loads_from_kw(topology, kw, kvar=None):
    """Per-bus per-phase complex demand (pu) from customer kW, balanced over phases.

    ``kw`` has shape (C, T); the result has shape (T, n_bus, 3).
    """
    if kvar is None:
        kvar = kw * Q_PER_P
    s = (np.asarray(kw) + 1j * np.asarray(kvar)) / (1000.0 * topology.base_mva)
    out = np.zeros((s.shape[1], topology.n_bus), dtype=complex)
    np.add.at(out.T, topology.customer_bus_index, s)
    return np.repeat(out[:, :, None], grid.NPH, axis=2)


def synthesize_history(topology, years, seed, config=SynthConfig(), hours=None):
    """Generate a fully metered AMI history and its ground truth.

    Returns ``(history, truth)``. Voltages come from a power flow at every hour.
    """
    rng = np.random.default_rng(seed)
    n = int(round(years * 8760)) if hours is None else int(hours)
    ts = hour_grid(config.start, n)
    C = len(topology.customers)
    kva = np.array([c.kva for c in topology.customers])
    hod = hour_of_day(ts).astype(float)
    dow = day_of_week(ts)
    doy = day_of_year(ts)
    # per-customer parameters, drawn in a fixed order
    is_com = rng.random(C) < config.commercial_share
    winter_peak = rng.random(C) < 0.25
    amp = rng.uniform(*config.season_amplitude, size=C)
    peak_day = np.where(winter_peak, rng.uniform(5, 30, C), rng.uniform(190, 215, C))
    lf = rng.uniform(*config.load_factor, size=C)
    eve = rng.uniform(18.0, 20.5, C)
    morn = rng.uniform(6.5, 8.5, C)
    eve_amp = rng.uniform(0.5, 0.9, C)
    common = _ar1(rng, n, config.common_phi, config.common_std)
    idio = _ar1(rng, n, config.idio_phi, config.idio_std, shape=(C,))
    if config.flat:
        shape = np.ones((C, n))
    else:
        season = 1 + amp[:, None] * np.cos(2 * np.pi * (doy[None, :] - peak_day[:, None]) / 365.25)
        weekend = (dow >= 5)[None, :]
        week = np.where(is_com[:, None], np.where(weekend, 0.55, 1.0), np.where(weekend, 1.08, 1.0))
        res_day = 0.45 + 0.35 * _bump(hod[None, :], morn[:, None], 1.5) + eve_amp[:, None] * _bump(
            hod[None, :], eve[:, None], 2.5
        )
        com_day = 0.35 + 0.75 * np.clip((np.minimum(hod, 18.0) - 7.0) / 2.0, 0, 1)[None, :] * (hod < 19)[None, :]
        day = np.where(is_com[:, None], com_day, res_day)
        day = day / day.mean(axis=1, keepdims=True)
        shape = season * week * day
    kw = lf[:, None] * kva[:, None] * shape * (1 + common[None, :]) * (1 + idio)
    kw = np.maximum(kw, 0.02 * kva[:, None])
    kvar = kw * Q_PER_P
    pf = grid.forward_power_flow(topology, loads_from_kw(topology, kw, kvar))
    vmag = np.abs(pf.voltages).mean(axis=2)  # (T, n_bus)
    cust_v = vmag[:, topology.customer_bus_index].T
    kw_meter = kw * (1 + rng.normal(0.0, config.kw_meter_sigma, size=kw.shape))
    v_meter = cust_v + rng.normal(0.0, config.voltage_meter_sigma, size=cust_v.shape)
    ids = tuple(c.id for c in topology.customers)
    history = AmiHistory(ts, ids, kw_meter, v_meter, np.zeros((C, n), dtype=np.int8))
    arche = tuple("commercial" if c else "residential" for c in is_com)
    truth = SyntheticTruth(ts, ids, kw, kvar, pf.voltages, pf.currents, arche)
    return history, truth


# --------------------------------------------------------------------------
# cleaning, scaling, splits


def remove_gross_errors(history, n_sigma=5.0):
    """Flag readings more than ``n_sigma`` standard deviations from the customer mean.

    Returns ``(cleaned, removed_mask)``; removed readings become NaN with
    quality ``removed_bad``.
    """
    kw = history.kw.copy()
    volt = history.voltage.copy()
    qual = history.quality.copy()
    removed = np.zeros_like(qual, dtype=bool)
    for i in range(history.n_customers):
        ok = (qual[i] == MEASURED) & np.isfinite(kw[i])
        x = kw[i, ok]
        if x.size < 2:
            continue
        sd = x.std()
        if sd == 0:
            continue
        bad = ok & (np.abs(kw[i] - x.mean()) > n_sigma * sd)
        removed[i] = bad
    kw[removed] = np.nan
    volt[removed] = np.nan
    qual[removed] = REMOVED_BAD
    return replace(history, kw=kw, voltage=volt, quality=qual), removed


@dataclass
class Scaling:
    """Min/max ranges per named field; constant fields map to 0.5."""

    ranges: dict = field(default_factory=dict)

    def fit(self, key, values):
        v = np.asarray(values, dtype=float)
        v = v[np.isfinite(v)]
        if v.size == 0:
            raise ValueError(f"no finite values to scale field {key!r}")
        self.ranges[key] = (float(v.min()), float(v.max()))
        return self

    def constant(self, key):
        lo, hi = self.ranges[key]
        return not hi > lo

    def apply(self, key, values):
        lo, hi = self.ranges[key]
        values = np.asarray(values, dtype=float)
        if not hi > lo:
            return np.where(np.isfinite(values), 0.5, np.nan)
        return (values - lo) / (hi - lo)

    def invert(self, key, values):
        lo, hi = self.ranges[key]
        values = np.asarray(values, dtype=float)
        if not hi > lo:
            return np.where(np.isfinite(values), lo, np.nan)
        return lo + values * (hi - lo)

    def span(self, key):
        lo, hi = self.ranges[key]
        return hi - lo if hi > lo else 1.0

    def to_dict(self):
        return {k: [lo, hi] for k, (lo, hi) in sorted(self.ranges.items())}

    @classmethod
    def from_dict(cls, d):
        return cls({k: (float(v[0]), float(v[1])) for k, v in d.items()})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_scaling(history, hours=None):
    """Per-customer kW and voltage ranges, over ``hours`` only when given (train block)."""
    h = history if hours is None else history.hours(hours)
    sc = Scaling()
    for i, cid in enumerate(h.customer_ids):
        ok = h.quality[i] == MEASURED
        if not np.any(ok & np.isfinite(h.kw[i])):
            continue
        sc.fit(f"kw:{cid}", h.kw[i, ok])
        sc.fit(f"v:{cid}", h.voltage[i, ok])
    return sc


def normalize(history, scaling=None):
    """Min/max-normalize kW and voltage per customer; returns ``(normalized, scaling)``."""
    scaling = scaling or fit_scaling(history)
    kw = history.kw.copy()
    volt = history.voltage.copy()
    for i, cid in enumerate(history.customer_ids):
        if f"kw:{cid}" in scaling.ranges:
            kw[i] = scaling.apply(f"kw:{cid}", kw[i])
            volt[i] = scaling.apply(f"v:{cid}", volt[i])
    return replace(history, kw=kw, voltage=volt), scaling


def denormalize(history, scaling):
    kw = history.kw.copy()
    volt = history.voltage.copy()
    for i, cid in enumerate(history.customer_ids):
        if f"kw:{cid}" in scaling.ranges:
            kw[i] = scaling.invert(f"kw:{cid}", kw[i])
            volt[i] = scaling.invert(f"v:{cid}", volt[i])
    return replace(history, kw=kw, voltage=volt)


@dataclass(frozen=True)
class DataSplit:
    train: np.ndarray
    test: np.ndarray
    folds: tuple  # index arrays partitioning ``train``


def split(n_samples, k_folds=5, test_fraction=0.2):
    """Chronological train/test split with contiguous folds over the train block.

    ``n_samples`` may be an integer or an AmiHistory (its hour count is used).
    """
    n = n_samples.n_hours if isinstance(n_samples, AmiHistory) else int(n_samples)
    if n <= 0:
        raise ValueError("cannot split an empty history")
    if k_folds < 2:
        raise ValueError("k_folds must be at least 2")
    n_train = int(math.floor(n * (1.0 - test_fraction) + 1e-9))
    if n_train < k_folds:
        raise ValueError(f"{n_train} training samples cannot fill {k_folds} folds")
    idx = np.arange(n)
    train, test = idx[:n_train], idx[n_train:]
    return DataSplit(train, test, tuple(np.array_split(train, k_folds)))


def contiguous_folds(n, k_folds):
    if n < k_folds:
        raise ValueError(f"{n} samples cannot fill {k_folds} folds")
    return tuple(np.array_split(np.arange(n), k_folds))


def inject_bad_data(values, count, seed, rel_std=0.5):
    """Add N(0, (rel_std * |x|)^2) noise to ``count`` distinct randomly chosen points.

    A 1-D ``values`` holds one scalar per point. For a 2-D array every row
    is a point and each of its entries gets noise scaled by its own
    magnitude. Returns ``(corrupted, mask)`` with one mask entry per point.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim > 2:
        raise ValueError("values must be 1-D or 2-D")
    n = values.shape[0] if values.ndim else values.size
    if count > n:
        raise ValueError(f"cannot corrupt {count} of {n} samples")
    rng = np.random.default_rng(seed)
    out = values.copy()
    mask = np.zeros(n, dtype=bool)
    if count == 0:
        return out, mask
    rows = out.reshape(n, -1)
    pick = rng.choice(n, size=int(count), replace=False)
    rows[pick] = rows[pick] + rng.normal(0.0, 1.0, size=rows[pick].shape) * rel_std * np.abs(rows[pick])
    mask[pick] = True
    return out, mask


def mask_missing(history, rate, seed, customers=(), customer_rate=0.0):
    """Randomly flag readings missing; optionally drop whole customers.

    Each measured reading is masked independently with probability ``rate``.
    Customers listed in ``customers`` plus ``round(customer_rate * C)``
    randomly drawn ones lose every reading.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    hit = rng.random(history.quality.shape) < rate
    whole = {history.index(c) for c in customers}
    n_extra = int(round(customer_rate * history.n_customers))
    if n_extra:
        pool = [i for i in range(history.n_customers) if i not in whole]
        whole.update(int(i) for i in rng.choice(pool, size=min(n_extra, len(pool)), replace=False))
    for i in whole:
        hit[i] = True
    hit &= history.quality == MEASURED
    kw = history.kw.copy()
    volt = history.voltage.copy()
    qual = history.quality.copy()
    kw[hit] = np.nan
    volt[hit] = np.nan
    qual[hit] = MISSING
    return replace(history, kw=kw, voltage=volt, quality=qual)


# --------------------------------------------------------------------------
# features


def cyclic(value, period):
    a = 2 * np.pi * np.asarray(value, dtype=float) / period
    return np.sin(a), np.cos(a)


@dataclass
class FeatureVector:
    v_k: float | None
    v_neighbors: np.ndarray
    t: tuple  # (sin, cos) of hour of day
    d: tuple  # (sin, cos) of day of week
    p_tilde: float | None = None

    def as_array(self):
        parts = [] if self.v_k is None else [self.v_k]
        parts += list(self.v_neighbors) + list(self.t) + list(self.d)
        if self.p_tilde is not None:
            parts.append(self.p_tilde)
        return np.array(parts, dtype=float)


class FeatureBuilder:
    """Regression inputs for every customer: nearby AMI voltages, hour/day, DLE power.

    Bus voltage at an hour is the mean of the metered customers' readings
    at that bus. Buses without any metered customer in the training block
    carry no voltage input. Missing readings are imputed with the bus'
    training median. ``p_tilde`` inputs are scaled with the per-customer
    range set through :meth:`fit_dle` and clipped to [0, 1].
    """

    def __init__(self, topology, history, train_hours):
        self.topology = topology
        self.history = history
        self.timestamps = history.timestamps
        bus_v = np.full((history.n_hours, topology.n_bus), np.nan)
        bidx = topology.bus_index
        cbus = {c.id: bidx[c.bus] for c in topology.customers}
        sums = np.zeros_like(bus_v)
        counts = np.zeros_like(bus_v)
        for i, cid in enumerate(history.customer_ids):
            if cid not in cbus:
                continue
            ok = (history.quality[i] == MEASURED) & np.isfinite(history.voltage[i])
            sums[ok, cbus[cid]] += history.voltage[i, ok]
            counts[ok, cbus[cid]] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            bus_v = np.where(counts > 0, sums / counts, np.nan)
        self.scaling = Scaling()
        train_v = bus_v[train_hours]
        self.observable = []
        self.median = {}
        for k, bid in enumerate(topology.bus_ids):
            col = train_v[:, k]
            if np.any(np.isfinite(col)):
                self.observable.append(bid)
                self.scaling.fit(f"vbus:{bid}", col)
                self.median[bid] = float(self.scaling.apply(f"vbus:{bid}", np.nanmedian(col)))
        self.bus_v = bus_v
        self.hod = hour_of_day(self.timestamps)
        self.dow = day_of_week(self.timestamps)

    def fit_dle(self, customer_id, p_tilde_train):
        self.scaling.fit(f"pt:{customer_id}", p_tilde_train)

    def sources(self, bus_id):
        """(own bus or None, ordered neighbour buses) carrying voltage inputs."""
        if bus_id not in self.topology.bus_index:
            raise KeyError(f"unknown bus {bus_id!r}")
        own = bus_id if bus_id in self.median else None
        nbrs = [b for b in sorted(self.topology.neighbor_sets[bus_id]) if b in self.median]
        return own, nbrs

    def _volt(self, bus_id, hours, impute):
        v = self.scaling.apply(f"vbus:{bus_id}", self.bus_v[hours, self.topology.bus_index[bus_id]])
        miss = ~np.isfinite(v)
        if np.any(miss):
            if not impute:
                raise MissingFeatureError(f"voltage at bus {bus_id} missing")
            v = np.where(miss, self.median[bus_id], v)
        return v

    def dim(self, bus_id, closed_loop):
        own, nbrs = self.sources(bus_id)
        return (own is not None) + len(nbrs) + 4 + bool(closed_loop)

    def matrix(self, customer_id, hours, p_tilde=None, impute=True):
        """Feature rows for ``hours`` (indices into the history grid)."""
        bus = self._bus_of(customer_id)
        hours = np.atleast_1d(np.asarray(hours))
        own, nbrs = self.sources(bus)
        cols = [self._volt(b, hours, impute) for b in ([own] if own else []) + nbrs]
        cols += list(cyclic(self.hod[hours], 24)) + list(cyclic(self.dow[hours], 7))
        if p_tilde is not None:
            cols.append(self.scale_dle(customer_id, p_tilde))
        return np.column_stack(cols)

    def scale_dle(self, customer_id, p_tilde):
        return np.clip(self.scaling.apply(f"pt:{customer_id}", p_tilde), 0.0, 1.0)

    def _bus_of(self, customer_id):
        for c in self.topology.customers:
            if c.id == customer_id:
                return c.bus
        raise KeyError(f"unknown customer {customer_id!r}")


def build_features(builder, bus_id, hour, p_tilde=None, impute=True):
    """Single :class:`FeatureVector` for bus ``bus_id`` at history hour index ``hour``."""
    own, nbrs = builder.sources(bus_id)
    h = np.array([hour])
    v_k = float(builder._volt(own, h, impute)[0]) if own else None
    v_n = np.array([builder._volt(b, h, impute)[0] for b in nbrs])
    t = tuple(float(x) for x in cyclic(builder.hod[hour], 24))
    d = tuple(float(x) for x in cyclic(builder.dow[hour], 7))
    return FeatureVector(v_k, v_n, t, d, p_tilde)

"""Closed-loop estimation: experts, state estimation and load feedback.

Offline
    open-loop seasonal experts per customer; state estimation over the
    (subsampled) training hours with open-loop pseudo-measurements; load
    estimates from the estimated voltages appended as a feature; closed-loop
    seasonal experts trained on the augmented set.
Online, per hour
    aggregate expert forecasts, estimate the state, recompute the load
    estimate, re-predict with the new feature, repeat until the
    pseudo-measurements settle; then update the expert weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import aggregator as agg
from . import bcse, dle, rvm
from .dataset import (
    MEASURED,
    MISSING,
    POWER_FACTOR,
    Q_PER_P,
    AmiHistory,
    FeatureBuilder,
    Scaling,
    SynthConfig,
    inject_bad_data,
    remove_gross_errors,
    synthesize_history,
)
from .grid_model import NPH, feeder13, slack_phasors, voltages_from_branch_currents

log = logging.getLogger(__name__)

PRECISION_CAP = 1e12


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScenarioConfig:
    start: str = "2014-06-01"
    end: str = "2017-08-31"  # inclusive day
    test_start: str = "2017-06-01"
    metering_fraction: float = 0.35
    missing_rate: float = 0.05
    seed: int = 7
    flow_sigma_rel: float = 1.0 / 300.0
    pmu_sigma: float = bcse.PMU_SIGMA

    def __post_init__(self):
        if not 0 <= self.metering_fraction <= 1:
            raise ValueError("metering_fraction must lie in [0, 1]")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if not np.datetime64(self.start) < np.datetime64(self.test_start) <= np.datetime64(self.end):
            raise ValueError("need start < test_start <= end")


@dataclass(frozen=True)
class LoopConfig:
    inner_loop_threshold: float = 0.01
    max_inner_cycles: int = 5
    open_loop_only: bool = False
    seed: int = 0
    train_cap: int = 400
    cv_samples: int = 200
    cv_max_iters: int = 100  # iteration cap for the bandwidth search fits
    k_folds: int = 5
    bandwidth_grid: tuple = rvm.BANDWIDTH_GRID
    min_samples: int = 50
    full_retrain: bool = False
    retrain_every: int = 24 * 7

    def __post_init__(self):
        if not self.inner_loop_threshold > 0:
            raise ValueError("inner_loop_threshold must be positive")
        if self.max_inner_cycles < 1:
            raise ValueError("max_inner_cycles must be at least 1")
        if self.train_cap < 2:
            raise ValueError("train_cap must be at least 2")


# --------------------------------------------------------------------------
# scenario


@dataclass(eq=False)
class Scenario:
    topology: object
    history: AmiHistory  # what the operator sees
    truth_kw: np.ndarray  # (C, T)
    truth_voltages: np.ndarray  # (T, n_bus, 3)
    truth_currents: np.ndarray  # (T, n_branch, 3)
    metered: np.ndarray  # (C,) bool
    train_hours: np.ndarray
    test_hours: np.ndarray
    scada: np.ndarray  # (T, n_flow_keys) noisy flow readings, pu
    scada_keys: tuple
    pmu: np.ndarray  # (T,) noisy substation magnitude
    config: ScenarioConfig = field(default_factory=ScenarioConfig)

    @property
    def customer_ids(self):
        return self.history.customer_ids

    @property
    def timestamps(self):
        return self.history.timestamps


def flow_regions(topology):
    """Region label per bus: index of the deepest flow meter upstream, -1 if none."""
    tree = topology.tree
    label = np.full(topology.n_bus, -1)
    depth = np.full(topology.n_bus, -1)
    for r, bid in enumerate(topology.flow_meters):
        b = topology.branch_index[bid]
        d = tree.depth[tree.branch_child[b]]
        down = tree.downstream[b]
        upd = down & (d > depth)
        label[upd] = r
        depth[upd] = d
    return label


def choose_metered(topology, fraction, rng):
    """Stratified meter placement: spread meters round-robin over flow regions."""
    C = len(topology.customers)
    n_met = int(round(fraction * C))
    region = flow_regions(topology)[topology.customer_bus_index]
    groups = [list(rng.permutation(np.flatnonzero(region == r))) for r in np.unique(region)]
    groups.sort(key=len, reverse=True)
    chosen = []
    while len(chosen) < n_met and any(groups):
        for g in groups:
            if g and len(chosen) < n_met:
                chosen.append(g.pop())
    mask = np.zeros(C, dtype=bool)
    mask[chosen] = True
    return mask


def flow_keys(topology):
    keys = []
    for br in topology.flow_meters:
        for ph in range(NPH):
            keys += [("flow_P", br, ph), ("flow_Q", br, ph)]
    return tuple(keys)


def build_scenario(topology=None, config=ScenarioConfig(), synth=SynthConfig()):
    """Synthetic feeder history with partial metering and SCADA flows."""
    topology = feeder13() if topology is None else topology
    ss = np.random.SeedSequence(config.seed)
    s_data, s_meter, s_miss, s_scada = ss.spawn(4)
    start = np.datetime64(config.start, "h")
    end = np.datetime64(config.end, "D") + np.timedelta64(1, "D")
    n_hours = int((end.astype("datetime64[h]") - start) / np.timedelta64(1, "h"))
    data_seed = int(s_data.generate_state(1)[0])
    full, truth = synthesize_history(topology, None, data_seed, replace(synth, start=config.start), hours=n_hours)
    rng = np.random.default_rng(s_meter)
    metered = choose_metered(topology, config.metering_fraction, rng)
    rng = np.random.default_rng(s_miss)
    q = full.quality.copy()
    kw = full.kw.copy()
    v = full.voltage.copy()
    q[~metered] = MISSING
    drop = rng.random(q.shape) < config.missing_rate
    q[metered[:, None] & drop] = MISSING
    kw[q == MISSING] = np.nan
    v[q == MISSING] = np.nan
    observed = AmiHistory(full.timestamps, full.customer_ids, kw, v, q, dict(full.meta))
    observed, _ = remove_gross_errors(observed)
    keys = flow_keys(topology)
    exact = np.stack([bcse.truth_values(topology, keys, truth.voltages[h], truth.currents[h]) for h in range(n_hours)]) if keys else np.zeros((n_hours, 0))
    rng = np.random.default_rng(s_scada)
    scada = exact + np.maximum(np.abs(exact) * config.flow_sigma_rel, bcse.METER_SIGMA_FLOOR) * rng.standard_normal(exact.shape)
    pmu = np.abs(truth.voltages[:, topology.tree.root, 0]) + config.pmu_sigma * rng.standard_normal(n_hours)
    ts = full.timestamps
    test0 = np.datetime64(config.test_start, "h")
    train_hours = np.flatnonzero(ts < test0)
    test_hours = np.flatnonzero(ts >= test0)
    return Scenario(topology, observed, truth.kw, truth.voltages, truth.currents, metered, train_hours, test_hours, scada, keys, pmu, config)


# --------------------------------------------------------------------------
# experts


@dataclass(frozen=True, eq=False)
class Expert:
    """A seasonal regressor plus the kW scaling of its target."""

    model: object
    lo: float
    hi: float
    season: int
    n_train: int = 0
    flagged: bool = False

    @property
    def span(self):
        return self.hi - self.lo if self.hi > self.lo else 1.0

    def predict_kw(self, X):
        m, v = self.model.predict(X)
        return self.lo + m * self.span, v * self.span**2


def _fit_expert(X, y_kw, season, r, config, lo=None, hi=None):
    y_kw = np.asarray(y_kw, dtype=float)
    ok = np.isfinite(y_kw)
    X, y_kw = X[ok], y_kw[ok]
    if lo is None:
        lo = float(np.min(y_kw)) if y_kw.size else 0.0
    if hi is None:
        hi = float(np.max(y_kw)) if y_kw.size else 1.0
    span = hi - lo if hi > lo else 1.0
    y = (y_kw - lo) / span
    flagged = len(y) < config.min_samples
    if flagged:
        model = rvm.MeanModel.fit(y, X.shape[1])
    else:
        model = rvm.fit(X, y, rvm.KernelConfig(r=r))
        flagged = isinstance(model, rvm.MeanModel)
    return Expert(model, lo, hi, season, len(y), flagged)


def _select_r(X, y_kw, config):
    ok = np.isfinite(y_kw)
    X, y = X[ok], y_kw[ok]
    if len(y) < 2 * config.k_folds:
        return 1.0
    idx = rvm.subsample_uniform(len(y), config.cv_samples)
    yy = y[idx]
    span = np.ptp(yy) or 1.0
    kc = rvm.KernelConfig(max_iters=config.cv_max_iters)
    r, _ = rvm.select_bandwidth(X[idx], (yy - yy.min()) / span, kc, grid=config.bandwidth_grid, k_folds=config.k_folds)
    return r


@dataclass(eq=False)
class ExpertPool:
    experts: list  # per customer: list of 4 Expert
    bandwidth: np.ndarray  # (C,)
    closed_loop: bool

    @property
    def M(self):
        return 4


# --------------------------------------------------------------------------
# measurement assembly


# per-phase power base is base_mva / 3: a balanced load of P kW is
# P / 1000 / base_mva pu on every phase


def kw_to_phase_pu(topology, kw):
    return np.asarray(kw) / 1000.0 / topology.base_mva


def phase_pu_to_kw(topology, pu):
    return np.asarray(pu) * 1000.0 * topology.base_mva


class MeasurementLayout:
    """Fixed key order for one feeder: bus P/Q rows, zero injections, flows, PMU."""

    def __init__(self, topology, scada_keys):
        self.topology = topology
        tree = topology.tree
        cb = topology.customer_bus_index
        self.load_buses = np.array(sorted(set(cb.tolist())), dtype=int)
        self.empty_buses = np.array([k for k in tree.order[1:] if k not in set(self.load_buses.tolist())], dtype=int)
        ids = topology.bus_ids
        keys = []
        for k in self.load_buses:
            for ph in range(NPH):
                keys += [("customer_P", ids[k], ph), ("customer_Q", ids[k], ph)]
        for k in self.empty_buses:
            for ph in range(NPH):
                keys += [("customer_P", ids[k], ph), ("customer_Q", ids[k], ph)]
        self.n_load_rows = len(self.load_buses) * NPH * 2
        self.n_empty_rows = len(self.empty_buses) * NPH * 2
        keys += list(scada_keys)
        keys += [("substation_V_pmu", topology.slack_bus, ph) for ph in range(NPH)]
        self.keys = tuple(keys)
        self.model = bcse.MeasurementModel(topology, self.keys)
        # customer -> position in load_buses
        pos = {k: i for i, k in enumerate(self.load_buses)}
        self.cust_pos = np.array([pos[k] for k in cb], dtype=int)

    def assemble(self, kw, kw_sigma, live, scada, pmu):
        """MeasurementSet for one hour.

        kw, kw_sigma : (C,) customer active power and its std (kW); ``live``
        marks metered readings (sigma follows the meter convention).
        """
        top = self.topology
        nL = len(self.load_buses)
        P = np.zeros(nL)
        var = np.zeros(nL)
        all_live = np.ones(nL, dtype=bool)
        np.add.at(P, self.cust_pos, kw)
        ph_sigma = np.where(live, bcse.meter_sigma(kw_to_phase_pu(top, kw)), kw_to_phase_pu(top, kw_sigma) * math.sqrt(NPH))
        np.add.at(var, self.cust_pos, ph_sigma**2)
        np.logical_and.at(all_live, self.cust_pos, live)
        p_ph = kw_to_phase_pu(top, P)
        sp = np.sqrt(var)
        z = np.empty(len(self.keys))
        sg = np.empty(len(self.keys))
        blk = np.empty((nL, NPH, 2))
        blk[:, :, 0] = p_ph[:, None]
        blk[:, :, 1] = (p_ph * Q_PER_P)[:, None]
        z[: self.n_load_rows] = blk.ravel()
        sblk = np.empty((nL, NPH, 2))
        sblk[:, :, 0] = sp[:, None]
        sblk[:, :, 1] = (sp * Q_PER_P)[:, None]
        sg[: self.n_load_rows] = np.maximum(sblk.ravel(), bcse.METER_SIGMA_FLOOR)
        a = self.n_load_rows
        b = a + self.n_empty_rows
        z[a:b] = 0.0
        sg[a:b] = bcse.ZERO_INJECTION_SIGMA
        c = b + len(scada)
        z[b:c] = scada
        sg[b:c] = bcse.meter_sigma(scada)
        z[c:] = pmu
        sg[c:] = bcse.PMU_SIGMA
        src = ["meter" if all_live[i] else "pseudo" for i in range(nL) for _ in range(2 * NPH)]
        src += ["pseudo"] * self.n_empty_rows + ["meter"] * len(scada) + ["pmu"] * NPH
        return bcse.MeasurementSet(self.keys, z, sg, tuple(src))


_SOLVE_OPTIONS = bcse.WlsOptions(check_observability=False)


def estimate_hour(layout, kw, kw_sigma, live, scada, pmu, s0=None):
    """State estimate and per-customer load estimate (kW) for one hour."""
    top = layout.topology
    ms = layout.assemble(kw, kw_sigma, live, scada, pmu)
    vs = slack_phasors(float(pmu[0]) if np.ndim(pmu) else float(pmu))
    res = bcse.solve_wls(top, ms, s0=s0, options=_SOLVE_OPTIONS, slack_voltage=vs, model=layout.model)
    return res, vs


def dle_customers(topology, res, vs, shares):
    I = res.currents
    V = voltages_from_branch_currents(topology, I, vs)
    p_bus = dle.nodal_power_from_voltages(topology, V)  # sum of per-phase pu
    p_kw = phase_pu_to_kw(topology, p_bus / NPH)
    return dle.bus_power_to_customers(topology, p_kw, shares)


# --------------------------------------------------------------------------
# offline stage


@dataclass(eq=False)
class OfflineResult:
    scenario: Scenario
    config: LoopConfig
    builder: FeatureBuilder
    layout: MeasurementLayout
    open_pool: ExpertPool
    closed_pool: ExpertPool | None
    stage1_hours: np.ndarray
    p_tilde_train: np.ndarray | None  # (C, len(stage1_hours)) kW
    shares: np.ndarray
    train_mean: np.ndarray  # (C,) kW, denominators for relative changes
    loss_scale: np.ndarray  # (C,) kW
    stage1_flags: np.ndarray = None

    @property
    def n_customers(self):
        return len(self.scenario.customer_ids)


def season_training_hours(scenario, cap):
    ts = scenario.timestamps[scenario.train_hours]
    parts = agg.season_partition(ts)
    return [scenario.train_hours[p[rvm.subsample_uniform(len(p), cap)]] for p in parts]


def open_loop_targets(scenario, hours):
    """Training targets (kW) for the open-loop experts, (C, len(hours)).

    Metered customers: their AMI readings. Unmetered customers: the metered
    fleet's kW-per-kVA at that hour scaled by the customer's kVA.
    """
    h = scenario.history
    kw = np.where(h.quality[:, hours] == MEASURED, h.kw[:, hours], np.nan)
    kva = np.array([c.kva for c in scenario.topology.customers])
    met = scenario.metered
    mk = kw[met]
    mkva = np.where(np.isfinite(mk), kva[met][:, None], 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.nansum(mk, axis=0) / mkva.sum(axis=0)
    proxy = kva[:, None] * ratio[None, :]
    return np.where(met[:, None], kw, proxy)


def _nanmean_rows(a):
    n = np.sum(np.isfinite(a), axis=1)
    tot = np.nansum(a, axis=1)
    return np.where(n > 0, tot / np.maximum(n, 1), np.nan)


def offline_stage(scenario, config=LoopConfig()):
    """Train experts, run the historical state estimation and augment features."""
    top = scenario.topology
    C = len(scenario.customer_ids)
    builder = FeatureBuilder(top, scenario.history, scenario.train_hours)
    layout = MeasurementLayout(top, scenario.scada_keys)
    season_hours = season_training_hours(scenario, config.train_cap)
    stage1 = np.sort(np.concatenate(season_hours))
    targets = open_loop_targets(scenario, stage1)
    pos = {h: i for i, h in enumerate(stage1)}

    # open-loop experts
    cids = scenario.customer_ids
    open_exp, open_r = [], np.zeros(C)
    for c, cid in enumerate(cids):
        X_all = builder.matrix(cid, stage1)
        open_r[c] = _select_r(X_all, targets[c], config)
        row = []
        for j, hrs in enumerate(season_hours):
            ii = np.array([pos[h] for h in hrs], dtype=int)
            row.append(_fit_expert(X_all[ii], targets[c, ii], j, open_r[c], config))
        open_exp.append(row)
    open_pool = ExpertPool(open_exp, open_r, False)

    obs = scenario.history
    live_kw = np.where(obs.quality == MEASURED, obs.kw, np.nan)
    with np.errstate(invalid="ignore"):
        tm = _nanmean_rows(np.where(scenario.metered[:, None], live_kw[:, scenario.train_hours], np.nan))
    proxy_mean = np.nanmean(targets, axis=1)
    train_mean = np.where(np.isfinite(tm), tm, proxy_mean)
    shares = dle.customer_shares(top, train_mean)

    if config.open_loop_only:
        ls = np.array([max(np.nanmax(targets[c]) - np.nanmin(targets[c]), 1e-9) for c in range(C)])
        return OfflineResult(scenario, config, builder, layout, open_pool, None, stage1, None, shares, train_mean, ls)

    # historical state estimation with in-season open-loop pseudo-measurements
    seasons = agg.season_of(scenario.timestamps[stage1])
    p_tilde = np.full((C, len(stage1)), np.nan)
    flags = np.zeros(len(stage1), dtype=bool)
    X_open = [builder.matrix(cid, stage1) for cid in cids]
    mu = np.zeros((C, len(stage1)))
    sd = np.zeros((C, len(stage1)))
    for c in range(C):
        for j in range(4):
            sel = seasons == j
            if np.any(sel):
                m, v = open_exp[c][j].predict_kw(X_open[c][sel])
                mu[c, sel], sd[c, sel] = m, np.sqrt(v)
    s_prev = None
    for i, h in enumerate(stage1):
        kw_h = live_kw[:, h]
        live = np.isfinite(kw_h)
        kw_in = np.where(live, kw_h, np.maximum(mu[:, i], 0.0))
        try:
            res, vs = estimate_hour(layout, kw_in, sd[:, i], live, scenario.scada[h], scenario.pmu[h], s0=s_prev)
            if not res.converged:
                raise RuntimeError("state estimation did not converge")
        except (RuntimeError, np.linalg.LinAlgError):
            flags[i] = True
            continue
        s_prev = res.s
        p_tilde[:, i] = dle_customers(top, res, vs, shares)

    # closed-loop experts: P~ as extra feature; target AMI (metered) or P~
    closed_exp, closed_r = [], np.zeros(C)
    ls = np.zeros(C)
    for c, cid in enumerate(cids):
        pt = p_tilde[c]
        ok = np.isfinite(pt)
        builder.fit_dle(cid, pt[ok])
        X = np.column_stack([X_open[c], builder.scale_dle(cid, np.where(ok, pt, np.nanmedian(pt)))])
        y = np.where(scenario.metered[c], targets[c], pt)
        y = np.where(ok, y, np.nan)
        closed_r[c] = _select_r(X, y, config)
        row = []
        for j, hrs in enumerate(season_hours):
            ii = np.array([pos[h] for h in hrs], dtype=int)
            row.append(_fit_expert(X[ii], y[ii], j, closed_r[c], config))
        closed_exp.append(row)
        yy = y[np.isfinite(y)]
        ls[c] = max(float(np.ptp(yy)) if yy.size else 1.0, 1e-9)
    closed_pool = ExpertPool(closed_exp, closed_r, True)
    return OfflineResult(scenario, config, builder, layout, open_pool, closed_pool, stage1, p_tilde, shares, train_mean, ls, flags)


# --------------------------------------------------------------------------
# online stage


@dataclass(eq=False)
class OnlineState:
    open_regret: list
    closed_regret: list | None
    s_prev: np.ndarray | None = None
    augmented: dict = field(default_factory=dict)  # customer -> list of (x, y)


def initial_state(offline):
    C = offline.n_customers
    mk = lambda: [agg.RegretState(4, float(offline.loss_scale[c])) for c in range(C)]
    return OnlineState(mk(), None if offline.closed_pool is None else mk())


@dataclass
class HourRecord:
    hour: int
    pseudo_kw: np.ndarray  # final aggregated forecast per customer
    pseudo_var: np.ndarray
    open_kw: np.ndarray  # cycle-0 (open-loop) aggregate
    expert_kw: np.ndarray  # (C, 4) forecasts of the experts in the last cycle
    p_tilde: np.ndarray  # final load estimate
    live: np.ndarray
    currents: np.ndarray
    cycles: int
    changes: list
    flagged: bool
    weights: np.ndarray  # (C, 4) weights used for the final forecast
    open_experts: np.ndarray = None  # (C, 4) open-loop expert forecasts


def _predict_pool(pool, c, X):
    out = np.empty((4, len(X)))
    var = np.empty((4, len(X)))
    for j, e in enumerate(pool.experts[c]):
        out[j], var[j] = e.predict_kw(X)
    return out, var


def _aggregate(states, forecasts, variances):
    C = len(states)
    w = np.stack([agg.weights_from_regret(states[c]) for c in range(C)])
    return agg.combine(forecasts, w), agg.combine_variance(variances, w), w


def online_step(offline, T, state, open_cache=None):
    """Inner loop for history hour T; returns (WlsResult or None, HourRecord).

    ``open_cache`` optionally carries precomputed open-loop forecasts
    (means, variances) of shape (C, 4) for this hour.
    """
    sc, cfg, top = offline.scenario, offline.config, offline.scenario.topology
    C = offline.n_customers
    obs = sc.history
    kw_live = np.where(obs.quality[:, T] == MEASURED, obs.kw[:, T], np.nan)
    live = np.isfinite(kw_live)
    if open_cache is None:
        f = np.empty((C, 4))
        v = np.empty((C, 4))
        for c, cid in enumerate(sc.customer_ids):
            X = offline.builder.matrix(cid, [T])
            a, b = _predict_pool(offline.open_pool, c, X)
            f[c], v[c] = a[:, 0], b[:, 0]
    else:
        f, v = open_cache
    p_open, var_open, w_open = _aggregate(state.open_regret, f, v)
    pseudo, pvar, expert_kw, weights = p_open, var_open, f, w_open
    pending = ~live
    changes = []
    cycles = 0
    flagged = False
    res = None
    p_tilde = np.full(C, np.nan)
    closed = offline.closed_pool is not None
    n_cycles = cfg.max_inner_cycles if closed else 1
    s0 = state.s_prev
    for q in range(n_cycles):
        kw_in = np.where(live, kw_live, np.maximum(pseudo, 0.0))
        try:
            r, vs = estimate_hour(offline.layout, kw_in, np.sqrt(pvar), live, sc.scada[T], sc.pmu[T], s0=s0)
            if not r.converged:
                raise RuntimeError("state estimation did not converge")
        except (RuntimeError, np.linalg.LinAlgError):
            flagged = True
            break
        res = r
        s0 = r.s
        p_tilde = dle_customers(top, r, vs, offline.shares)
        cycles = q + 1
        if not closed:
            break
        fc = np.empty((C, 4))
        vc = np.empty((C, 4))
        for c, cid in enumerate(sc.customer_ids):
            X = offline.builder.matrix(cid, [T], p_tilde=np.array([p_tilde[c]]))
            a, b = _predict_pool(offline.closed_pool, c, X)
            fc[c], vc[c] = a[:, 0], b[:, 0]
        new, nvar, wc = _aggregate(state.closed_regret, fc, vc)
        change = float(np.max(np.abs(new - pseudo)[pending] / offline.train_mean[pending])) if np.any(pending) else 0.0
        changes.append(change)
        pseudo, pvar, expert_kw, weights = new, nvar, fc, wc
        if change < cfg.inner_loop_threshold:
            break
    if res is None:
        currents = None if state.s_prev is None else bcse.currents_from_state(state.s_prev)
    else:
        currents = res.currents
        state.s_prev = res.s
    rec = HourRecord(T, pseudo, pvar, p_open, expert_kw, p_tilde, live, currents, cycles, changes, flagged, weights, f)
    return res, rec


def weight_update_step(offline, state, record):
    """Regret updates with target: AMI reading if live, else the load estimate."""
    obs = offline.scenario.history
    T = record.hour
    C = offline.n_customers
    kw_live = np.where(obs.quality[:, T] == MEASURED, obs.kw[:, T], np.nan)
    target = np.where(np.isfinite(kw_live), kw_live, record.p_tilde)
    f_open = record.open_experts
    for c in range(C):
        t = target[c]
        if not np.isfinite(t):
            continue
        state.open_regret[c] = agg.regret_update(state.open_regret[c], f_open[c], record.open_kw[c], float(t))
        if state.closed_regret is not None:
            state.closed_regret[c] = agg.regret_update(state.closed_regret[c], record.expert_kw[c], record.pseudo_kw[c], float(t))
    return state


@dataclass(eq=False)
class RunArtifacts:
    mode: str
    hours: np.ndarray
    records: list
    final_regret: list
    weight_rows: list  # (customer_id, t, w1..w4, eta, max_regret, bound)

    def stack(self, name):
        return np.stack([getattr(r, name) for r in self.records], axis=-1)


def run_online(offline, mode="closed_loop", hours=None):
    """Sequential online horizon; ``mode`` is closed_loop or open_loop."""
    if mode not in ("closed_loop", "open_loop"):
        raise ValueError(f"unknown mode {mode!r}")
    sc = offline.scenario
    if mode == "open_loop" and offline.closed_pool is not None:
        offline = replace(offline, closed_pool=None)
    hours = sc.test_hours if hours is None else np.asarray(hours)
    C = offline.n_customers
    # open-loop forecasts do not depend on the loop: batch them
    F = np.empty((C, 4, len(hours)))
    V = np.empty((C, 4, len(hours)))
    for c, cid in enumerate(sc.customer_ids):
        X = offline.builder.matrix(cid, hours)
        F[c], V[c] = _predict_pool(offline.open_pool, c, X)
    state = initial_state(offline)
    records, wrows = [], []
    since_retrain = 0
    for i, T in enumerate(hours):
        _, rec = online_step(offline, T, state, open_cache=(F[:, :, i], V[:, :, i]))
        records.append(rec)
        weight_update_step(offline, state, rec)
        regrets = state.closed_regret if state.closed_regret is not None else state.open_regret
        for c, cid in enumerate(sc.customer_ids):
            st = regrets[c]
            w = agg.weights_from_regret(st)
            e = agg.eta(st.t, st.M) if st.t else math.nan
            b = agg.regret_bound(st.t, st.M) if st.t else math.nan
            wrows.append((cid, int(T), st.t, *w, e, st.max_regret, b))
        if offline.config.full_retrain and offline.closed_pool is not None:
            _collect_augmented(offline, state, rec)
            since_retrain += 1
            if since_retrain >= offline.config.retrain_every:
                _retrain_closed(offline, state, agg.season_of(sc.timestamps[T:T + 1])[0])
                since_retrain = 0
    final = state.closed_regret if state.closed_regret is not None else state.open_regret
    return RunArtifacts(mode, hours, records, final, wrows)


def _collect_augmented(offline, state, rec):
    sc = offline.scenario
    for c, cid in enumerate(sc.customer_ids):
        if not np.isfinite(rec.p_tilde[c]):
            continue
        x = offline.builder.matrix(cid, [rec.hour], p_tilde=np.array([rec.p_tilde[c]]))[0]
        y = sc.history.kw[c, rec.hour] if rec.live[c] else rec.p_tilde[c]
        state.augmented.setdefault(c, []).append((x, y))


def _retrain_closed(offline, state, season):
    """Refit the in-season closed-loop experts on training plus online samples."""
    cfg = offline.config
    hrs = season_training_hours(offline.scenario, cfg.train_cap)[season]
    pos = {h: i for i, h in enumerate(offline.stage1_hours)}
    ii = np.array([pos[h] for h in hrs], dtype=int)
    targets = open_loop_targets(offline.scenario, offline.stage1_hours[ii])
    for c, cid in enumerate(offline.scenario.customer_ids):
        pt = offline.p_tilde_train[c, ii]
        ok = np.isfinite(pt)
        X = np.column_stack([offline.builder.matrix(cid, hrs), offline.builder.scale_dle(cid, np.where(ok, pt, np.nanmedian(pt)))])
        y = np.where(offline.scenario.metered[c], targets[c], pt)
        y = np.where(ok, y, np.nan)
        aug = state.augmented.get(c, [])
        if aug:
            X = np.vstack([X, np.array([a for a, _ in aug])])
            y = np.r_[y, [b for _, b in aug]]
        keep = rvm.subsample_uniform(len(y), cfg.train_cap)
        old = offline.closed_pool.experts[c][season]
        offline.closed_pool.experts[c][season] = _fit_expert(X[keep], y[keep], season, offline.closed_pool.bandwidth[c], cfg, old.lo, old.hi)


# --------------------------------------------------------------------------
# evaluation


def mape(pred, truth, floor=None):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    keep = np.isfinite(pred) & np.isfinite(truth) & (np.abs(truth) > 0)
    if floor is not None:
        keep &= np.abs(truth) >= floor
    if not np.any(keep):
        raise ValueError("empty evaluation set")
    return float(np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep])))


def precision(errors):
    e = np.asarray(errors, dtype=float)
    e = e[np.isfinite(e)]
    if e.size == 0:
        raise ValueError("empty evaluation set")
    var = float(np.var(e))
    return PRECISION_CAP if var <= 1.0 / PRECISION_CAP else 1.0 / var


@dataclass
class EvaluationReport:
    mode: str
    mape: float
    precision: float
    customer_mape: dict
    expert_mape: list
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray
    branch_mape: dict  # component -> (n_branch,) array
    cycles: np.ndarray
    changes: list
    flagged_hours: int
    n_samples: int
    aggregate_loss: np.ndarray  # (C,)
    expert_loss: np.ndarray  # (C, 4)
    loss_scale: np.ndarray
    rounds: np.ndarray

    def summary(self):
        return {
            "mode": self.mode,
            "mape": self.mape,
            "precision": self.precision,
            "expert_mape": list(self.expert_mape),
            "n_samples": self.n_samples,
            "flagged_hours": self.flagged_hours,
            "share_f_le_2": float(np.mean(self.cycles <= 2)) if self.cycles.size else math.nan,
        }


HIST_EDGES = np.linspace(-100.0, 100.0, 41)


def evaluate(offline, artifacts, bins=HIST_EDGES):
    """Pseudo-measurement and state errors over the online horizon."""
    sc = offline.scenario
    recs = artifacts.records
    hours = artifacts.hours
    truth = sc.truth_kw[:, hours]
    pseudo = np.stack([r.pseudo_kw for r in recs], axis=1)
    live = np.stack([r.live for r in recs], axis=1)
    experts = np.stack([r.expert_kw for r in recs], axis=2)  # (C, 4, T)
    floor = 0.01 * offline.train_mean[:, None]
    sel = ~live & (np.abs(truth) >= floor)
    if not np.any(sel):
        raise ValueError("empty evaluation set")
    err = pseudo - truth
    m = mape(pseudo[sel], truth[sel])
    prec = precision(err[sel])
    cust = {}
    for c, cid in enumerate(sc.customer_ids):
        if np.any(sel[c]):
            cust[cid] = mape(pseudo[c][sel[c]], truth[c][sel[c]])
    ex = [mape(experts[:, j][sel], truth[sel]) for j in range(4)]
    rel = 100.0 * err[sel] / truth[sel]
    counts, edges = np.histogram(np.clip(rel, bins[0], bins[-1]), bins=bins)
    # branch-current errors
    est = np.stack([r.currents if r.currents is not None else np.full(sc.truth_currents.shape[1:], np.nan) for r in recs])
    tru = sc.truth_currents[hours]
    comp = {
        "real": (est.real, tru.real),
        "imag": (est.imag, tru.imag),
        "magnitude": (np.abs(est), np.abs(tru)),
        "phase": (np.angle(est), np.angle(tru)),
    }
    bm = {}
    for name, (a, b) in comp.items():
        with np.errstate(invalid="ignore", divide="ignore"):
            e = np.abs(a - b) / np.abs(b)
        e = np.where(np.abs(b) > 1e-9, e, np.nan)
        bm[name] = np.nanmean(e, axis=(0, 2))
    cycles = np.array([r.cycles for r in recs])
    fin = artifacts.final_regret
    return EvaluationReport(
        artifacts.mode,
        m,
        prec,
        cust,
        ex,
        edges,
        counts,
        bm,
        cycles,
        [r.changes for r in recs],
        int(sum(r.flagged for r in recs)),
        int(sel.sum()),
        np.array([s.aggregate_loss for s in fin]),
        np.stack([s.expert_loss for s in fin]),
        np.array([s.loss_scale for s in fin]),
        np.array([s.t for s in fin]),
    )


def dominance_check(report):
    """Per customer: aggregate loss minus (best expert loss + scale * bound); <= 0 required."""
    out = []
    for c in range(len(report.aggregate_loss)):
        m = int(report.rounds[c])
        if m == 0:
            out.append(0.0)
            continue
        b = report.loss_scale[c] * agg.regret_bound(m, 4)
        out.append(float(report.aggregate_loss[c] - (report.expert_loss[c].min() + b)))
    return np.array(out)


# --------------------------------------------------------------------------
# baselines and robustness


def ridge_fit(X, y, lambdas=(1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0), k_folds=5):
    """L2-regularised least squares with intercept; lambda by contiguous K-fold CV.

    Returns (coef, intercept, lambda).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)

    def solve(Xa, ya, lam):
        xm, ym = Xa.mean(0), ya.mean()
        Xc = Xa - xm
        A = Xc.T @ Xc + lam * len(ya) * np.eye(Xa.shape[1])
        for bump in (0.0, 1e-10, 1e-8, 1e-6, 1e-4):
            try:
                w = np.linalg.solve(A + bump * np.trace(A) / len(A) * np.eye(len(A)), Xc.T @ (ya - ym))
                if np.all(np.isfinite(w)):
                    return w, ym - xm @ w
            except np.linalg.LinAlgError:
                continue
        raise np.linalg.LinAlgError("ridge normal equations singular")

    folds = np.array_split(np.arange(len(y)), k_folds)
    best, best_err = lambdas[0], math.inf
    if len(y) >= 2 * k_folds:
        for lam in lambdas:
            err = 0.0
            for f in folds:
                m = np.ones(len(y), dtype=bool)
                m[f] = False
                w, b = solve(X[m], y[m], lam)
                err += float(np.sum((X[f] @ w + b - y[f]) ** 2))
            if err < best_err:
                best, best_err = lam, err
    w, b = solve(X, y, best)
    return w, b, best


def gaussian_mle_fit(hours_of_day, day_type, y):
    """Conditional mean per (hour-of-day, weekday/weekend) cell; falls back to hour, then overall."""
    table = {}
    hod = np.asarray(hours_of_day)
    dt = np.asarray(day_type)
    y = np.asarray(y, dtype=float)
    for key in set(zip(hod.tolist(), dt.tolist())):
        sel = (hod == key[0]) & (dt == key[1])
        table[key] = float(np.mean(y[sel]))
    by_hour = {h: float(np.mean(y[hod == h])) for h in set(hod.tolist())}
    return {"cell": table, "hour": by_hour, "all": float(np.mean(y))}


def gaussian_mle_predict(params, hours_of_day, day_type):
    out = []
    for h, d in zip(np.asarray(hours_of_day).tolist(), np.asarray(day_type).tolist()):
        v = params["cell"].get((h, d))
        if v is None:
            v = params["hour"].get(h, params["all"])
        out.append(v)
    return np.array(out)


def baseline_fit_predict(kind, train, test):
    """``train``/``test`` are dicts with X, y (train only), hod, daytype."""
    if kind == "ridge_linear":
        w, b, _ = ridge_fit(train["X"], train["y"])
        return np.asarray(test["X"]) @ w + b
    if kind == "gaussian_mle":
        p = gaussian_mle_fit(train["hod"], train["daytype"], train["y"])
        return gaussian_mle_predict(p, test["hod"], test["daytype"])
    raise ValueError(f"unknown baseline {kind!r}")


def _mrvm_online(pool_row, X_test, y_test, loss_scale):
    """Aggregate seasonal experts online with realized targets; returns forecasts."""
    F = np.stack([e.predict_kw(X_test)[0] for e in pool_row])  # (4, T)
    st = agg.RegretState(4, loss_scale)
    out = np.empty(len(y_test))
    for i in range(len(y_test)):
        w = agg.weights_from_regret(st)
        out[i] = agg.combine(F[:, i], w)
        st = agg.regret_update(st, F[:, i], out[i], float(y_test[i]))
    return out


ROBUSTNESS_METHODS = ("mrvm", "ridge_linear", "gaussian_mle")


def _voltage_keys(builder, customer_id):
    own, nbrs = builder.sources(builder._bus_of(customer_id))
    return [f"vbus:{b}" for b in ([own] if own else []) + nbrs]


def corrupt_training_points(builder, customer_id, X, y, count, seed):
    """Corrupt ``count`` training points (kW target and measured voltages).

    Voltages are perturbed in pu before normalization with the clean
    training ranges; calendar inputs carry no measurement and stay intact.
    Rows with a missing target are never selected.
    """
    vk = _voltage_keys(builder, customer_id)
    ok = np.flatnonzero(np.isfinite(y))
    raw = np.column_stack([y[ok]] + [builder.scaling.invert(k, X[ok, j]) for j, k in enumerate(vk)])
    bad, mask = inject_bad_data(raw, count, seed)
    Xc, yc = X.copy(), y.copy()
    yc[ok] = bad[:, 0]
    for j, k in enumerate(vk):
        Xc[ok, j] = builder.scaling.apply(k, bad[:, j + 1])
    full = np.zeros(len(y), dtype=bool)
    full[ok] = mask
    return Xc, yc, full


def robustness_sweep(scenario, grid_fraction=(0.0, 0.1, 0.2), trials=3, seed=0, config=LoopConfig(), customers=None):
    """Bad-data sweep on the metered customers' training data.

    For each corruption fraction and trial, the selected fraction of every
    customer's training points is perturbed with zero-mean Gaussian noise
    of std 50% of each value (see :func:`corrupt_training_points`), all
    methods are refit, bandwidth search included, and scored (MAPE)
    against the true test-horizon load. Returns rows
    ``(method, fraction, N, trial, mape)``.
    """
    top = scenario.topology
    builder = FeatureBuilder(top, scenario.history, scenario.train_hours)
    season_hours = season_training_hours(scenario, config.train_cap)
    hrs = np.sort(np.concatenate(season_hours))
    pos = {h: i for i, h in enumerate(hrs)}
    obs = scenario.history
    cids = scenario.customer_ids
    idx = np.flatnonzero(scenario.metered) if customers is None else np.asarray(customers)
    test = scenario.test_hours
    from .dataset import day_of_week, hour_of_day

    hod_all = hour_of_day(scenario.timestamps)
    wk_all = (day_of_week(scenario.timestamps) >= 5).astype(int)
    prepared = []
    for c in idx:
        cid = cids[c]
        X = builder.matrix(cid, hrs)
        y = np.where(obs.quality[c, hrs] == MEASURED, obs.kw[c, hrs], np.nan)
        Xt = builder.matrix(cid, test)
        prepared.append((c, X, y, Xt))
    clean_r = {}
    rows = []
    for fi, frac in enumerate(grid_fraction):
        for trial in range(trials):
            tr_seed = int(np.random.SeedSequence([seed, fi, trial]).generate_state(1)[0])
            preds = {m: [] for m in ROBUSTNESS_METHODS}
            truths = []
            Ns = []
            for k, (c, X, y, Xt) in enumerate(prepared):
                ok = np.isfinite(y)
                n_bad = int(round(frac * ok.sum()))
                Ns.append(n_bad)
                Xc, yc, _ = corrupt_training_points(builder, cids[c], X, y, n_bad, tr_seed + 7919 * k)
                if n_bad == 0 and c in clean_r:
                    r = clean_r[c]
                else:
                    r = _select_r(Xc, yc, config)
                    if n_bad == 0:
                        clean_r[c] = r
                row = []
                for j, hs in enumerate(season_hours):
                    ii = np.array([pos[h] for h in hs], dtype=int)
                    row.append(_fit_expert(Xc[ii], yc[ii], j, r, config))
                y_live = obs.kw[c, test]
                mask = np.isfinite(y_live)
                ls = max(float(np.nanmax(yc) - np.nanmin(yc)), 1e-9)
                # online aggregation sees the realized AMI readings
                f = _mrvm_online(row, Xt[mask], y_live[mask], ls)
                truth = scenario.truth_kw[c, test][mask]
                preds["mrvm"].append(f)
                tr = {"X": Xc[ok], "y": yc[ok], "hod": hod_all[hrs][ok], "daytype": wk_all[hrs][ok]}
                te = {"X": Xt[mask], "hod": hod_all[test][mask], "daytype": wk_all[test][mask]}
                preds["ridge_linear"].append(baseline_fit_predict("ridge_linear", tr, te))
                preds["gaussian_mle"].append(baseline_fit_predict("gaussian_mle", tr, te))
                truths.append(truth)
            t_all = np.concatenate(truths)
            for m in ROBUSTNESS_METHODS:
                rows.append((m, float(frac), int(sum(Ns)), trial, mape(np.concatenate(preds[m]), t_all)))
    return rows

"""Branch-current state estimation by weighted least squares.

State ``s = [Re I, Im I]`` with ``I`` the (n_branch, 3) branch currents in
pu, oriented away from the substation. Every power-type measurement has the
form ``S = V[row] * conj(c @ I)``:

* bus consumption: ``c`` selects inflow minus child outflows at the bus,
* branch flow: ``c`` selects the branch, ``row`` is its upstream bus,

with ``V = V_slack - D @ I`` (see :class:`loopdsse.grid_model.RadialTree`).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .grid_model import NPH, PHASES, slack_phasors

KINDS = ("customer_P", "customer_Q", "substation_V_pmu", "flow_P", "flow_Q")
SOURCES = ("meter", "pmu", "pseudo")
MEASUREMENT_HEADER = ["kind", "location", "phase", "value_pu", "sigma_pu", "source"]

PMU_SIGMA = 1e-4
METER_SIGMA_FLOOR = 1e-6
ZERO_INJECTION_SIGMA = 1e-6


class MeasurementError(ValueError):
    pass


class UnobservableError(RuntimeError):
    def __init__(self, branches):
        self.branches = list(branches)
        super().__init__("unobservable branch currents: " + ", ".join(self.branches))


def meter_sigma(value, floor=METER_SIGMA_FLOOR):
    """Meter accuracy of 1% taken as 3 sigma."""
    return np.maximum(np.abs(value) / 300.0, floor)


@dataclass(frozen=True)
class Measurement:
    kind: str
    location: str
    phase: int
    z: float
    sigma: float
    source: str = "meter"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MeasurementError(f"unknown measurement kind {self.kind!r}")
        if self.source not in SOURCES:
            raise MeasurementError(f"unknown source {self.source!r}")
        if not 0 <= self.phase < NPH:
            raise MeasurementError(f"phase index {self.phase} out of range")
        if not self.sigma > 0:
            raise MeasurementError("sigma must be positive")
        if not math.isfinite(self.z):
            raise MeasurementError("measurement value must be finite")

    @property
    def key(self):
        return (self.kind, self.location, self.phase)


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Column-oriented measurements; ``keys`` fixes the row order."""

    keys: tuple
    z: np.ndarray
    sigma: np.ndarray
    sources: tuple

    def __post_init__(self):
        if not (len(self.keys) == len(self.z) == len(self.sigma) == len(self.sources)):
            raise MeasurementError("measurement columns differ in length")
        if np.any(~(np.asarray(self.sigma) > 0)):
            raise MeasurementError("sigma must be positive")
        if not np.all(np.isfinite(self.z)):
            raise MeasurementError("measurement values must be finite")

    def __len__(self):
        return len(self.keys)

    @classmethod
    def from_list(cls, items):
        items = list(items)
        return cls(
            tuple(m.key for m in items),
            np.array([m.z for m in items], dtype=float),
            np.array([m.sigma for m in items], dtype=float),
            tuple(m.source for m in items),
        )

    def to_list(self):
        return [Measurement(k[0], k[1], k[2], float(z), float(s), src) for k, z, s, src in zip(self.keys, self.z, self.sigma, self.sources)]

    def with_values(self, z=None, sigma=None):
        return MeasurementSet(self.keys, self.z if z is None else np.asarray(z, float), self.sigma if sigma is None else np.asarray(sigma, float), self.sources)

    def concat(self, other):
        return MeasurementSet(self.keys + other.keys, np.r_[self.z, other.z], np.r_[self.sigma, other.sigma], self.sources + other.sources)


def state_from_currents(currents):
    I = np.asarray(currents, dtype=complex)
    return np.concatenate([I.real.reshape(I.shape[:-2] + (-1,)), I.imag.reshape(I.shape[:-2] + (-1,))], axis=-1)


def currents_from_state(s, n_branch=None):
    s = np.asarray(s, dtype=float)
    half = s.shape[-1] // 2
    I = s[..., :half] + 1j * s[..., half:]
    return I.reshape(s.shape[:-1] + (-1, NPH))


class MeasurementModel:
    """Compiled measurement function and Jacobian for a fixed key set."""

    def __init__(self, topology, keys):
        self.topology = topology
        self.keys = tuple(keys)
        tree = topology.tree
        nb3 = topology.n_branch * NPH
        self.n_state = 2 * nb3
        self.D = tree.drop_matrix
        bidx, bridx = topology.bus_index, topology.branch_index
        C = np.kron(tree.incidence, np.eye(NPH))  # (n*3, nb*3)
        pw_rows, pw_vrow, pw_c, pw_is_q = [], [], [], []
        vm_rows, vm_vrow = [], []
        for i, (kind, loc, ph) in enumerate(self.keys):
            if kind in ("customer_P", "customer_Q"):
                if loc not in bidx:
                    raise MeasurementError(f"unknown bus {loc!r}")
                k = bidx[loc]
                if k == tree.root:
                    raise MeasurementError("consumption measurements at the slack bus are not modelled")
                r = k * NPH + ph
                pw_rows.append(i)
                pw_vrow.append(r)
                pw_c.append(C[r])
                pw_is_q.append(kind == "customer_Q")
            elif kind in ("flow_P", "flow_Q"):
                if loc not in bridx:
                    raise MeasurementError(f"unknown branch {loc!r}")
                b = bridx[loc]
                c = np.zeros(nb3)
                c[b * NPH + ph] = 1.0
                pw_rows.append(i)
                pw_vrow.append(tree.branch_parent[b] * NPH + ph)
                pw_c.append(c)
                pw_is_q.append(kind == "flow_Q")
            else:
                if loc not in bidx:
                    raise MeasurementError(f"unknown bus {loc!r}")
                vm_rows.append(i)
                vm_vrow.append(bidx[loc] * NPH + ph)
        self.pw_rows = np.array(pw_rows, dtype=int)
        self.pw_vrow = np.array(pw_vrow, dtype=int)
        self.pw_c = np.array(pw_c, dtype=float).reshape(len(pw_rows), nb3)
        self.pw_is_q = np.array(pw_is_q, dtype=bool)
        self.vm_rows = np.array(vm_rows, dtype=int)
        self.vm_vrow = np.array(vm_vrow, dtype=int)
        self.D_pw = self.D[self.pw_vrow]
        self.D_vm = self.D[self.vm_vrow]

    def __len__(self):
        return len(self.keys)

    def _voltages(self, I, vs):
        vsl = np.tile(vs, self.topology.n_bus)
        return vsl - self.D @ I

    def evaluate(self, s, slack_voltage=None):
        """h(s) in the key order."""
        vs = slack_phasors() if slack_voltage is None else np.asarray(slack_voltage, complex)
        s = np.asarray(s, dtype=float)
        if s.shape != (self.n_state,):
            raise MeasurementError(f"state must have length {self.n_state}")
        I = s[: self.n_state // 2] + 1j * s[self.n_state // 2:]
        V = self._voltages(I, vs)
        h = np.empty(len(self.keys))
        S = V[self.pw_vrow] * np.conj(self.pw_c @ I)
        h[self.pw_rows] = np.where(self.pw_is_q, S.imag, S.real)
        h[self.vm_rows] = np.abs(V[self.vm_vrow])
        return h

    def jacobian(self, s, slack_voltage=None):
        """Analytic dh/ds, shape (n_meas, n_state)."""
        vs = slack_phasors() if slack_voltage is None else np.asarray(slack_voltage, complex)
        s = np.asarray(s, dtype=float)
        half = self.n_state // 2
        I = s[:half] + 1j * s[half:]
        V = self._voltages(I, vs)
        H = np.empty((len(self.keys), self.n_state))
        J = np.conj(self.pw_c @ I)
        Vr = V[self.pw_vrow]
        dr = -self.D_pw * J[:, None] + Vr[:, None] * self.pw_c
        di = -1j * (self.D_pw * J[:, None] + Vr[:, None] * self.pw_c)
        q = self.pw_is_q[:, None]
        H[self.pw_rows, :half] = np.where(q, dr.imag, dr.real)
        H[self.pw_rows, half:] = np.where(q, di.imag, di.real)
        Vm = V[self.vm_vrow]
        mag = np.abs(Vm)
        w = np.conj(Vm)[:, None]
        H[self.vm_rows, :half] = np.real(w * -self.D_vm) / mag[:, None]
        H[self.vm_rows, half:] = np.real(w * (-1j) * self.D_vm) / mag[:, None]
        return H


def measurement_function(topology, s, keys, slack_voltage=None):
    return MeasurementModel(topology, keys).evaluate(s, slack_voltage)


def jacobian(topology, s, keys, slack_voltage=None):
    return MeasurementModel(topology, keys).jacobian(s, slack_voltage)


def truth_values(topology, keys, voltages, currents):
    """Exact measurement values for a power-flow solution (used for synthesis)."""
    keys = tuple(keys)
    model = MeasurementModel(topology, keys)
    return model.evaluate(state_from_currents(currents), voltages[topology.tree.root])


@dataclass(frozen=True)
class WlsOptions:
    max_iters: int = 50
    step_tol: float = 1e-6
    grad_tol: float = 1e-8
    damping: tuple = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
    max_backtracks: int = 20
    check_observability: bool = True


@dataclass
class WlsResult:
    s: np.ndarray
    iterations: int
    converged: bool
    objective: float
    objective_trace: list = field(default_factory=list)
    condition: float = math.nan
    damping_used: float = 0.0

    @property
    def currents(self):
        return currents_from_state(self.s)

    def report(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "objective": self.objective,
            "objective_trace": list(self.objective_trace),
            "condition_estimate": self.condition,
            "damping": self.damping_used,
        }

    def write_report(self, path):
        with open(path, "w") as fh:
            json.dump(self.report(), fh, indent=2)


def _null_space_branches(topology, G, tol=1e-12):
    w, U = np.linalg.eigh(G)
    null = U[:, w < tol * max(w.max(), 1e-300)]
    if null.size == 0:
        return []
    half = G.shape[0] // 2
    part = np.abs(null).max(axis=1)
    part = np.maximum(part[:half], part[half:]).reshape(-1, NPH).max(axis=1)
    ids = [br.id for br in topology.branches]
    return [ids[b] for b in np.flatnonzero(part > 1e-8)]


def _factor(G, options):
    """Cholesky of G, escalating Levenberg damping lam * mean(diag G) on failure."""
    scale = float(np.mean(np.diag(G))) or 1.0
    for lam in (0.0,) + tuple(options.damping):
        try:
            A = G if lam == 0 else G + lam * scale * np.eye(len(G))
            return sla.cho_factor(A, lower=True, check_finite=False), lam
        except sla.LinAlgError:
            continue
    return None, None


def solve_wls(topology, measurements, s0=None, options=WlsOptions(), slack_voltage=None, model=None):
    """Gauss-Newton WLS on J(s) = sum_i ((z_i - h_i(s)) / sigma_i)^2.

    Steps are accepted only if they do not raise J; otherwise the step is
    halved. Stops on ``|ds|_inf < step_tol``, gradient norm below
    ``grad_tol`` or ``max_iters``.
    """
    ms = measurements if isinstance(measurements, MeasurementSet) else MeasurementSet.from_list(measurements)
    if model is None or model.keys != ms.keys:
        model = MeasurementModel(topology, ms.keys)
    n = model.n_state
    s = np.zeros(n) if s0 is None else np.array(s0, dtype=float)
    w = 1.0 / ms.sigma**2
    z = ms.z

    def objective(state):
        r = z - model.evaluate(state, slack_voltage)
        return float(np.sum(w * r * r)), r

    J, r = objective(s)
    trace = [J]
    converged = False
    lam_used = 0.0
    G = None
    it = 0
    for it in range(1, options.max_iters + 1):
        H = model.jacobian(s, slack_voltage)
        Hw = H * w[:, None]
        G = H.T @ Hw
        g = Hw.T @ r
        if it == 1 and options.check_observability:
            branches = _null_space_branches(topology, G)
            if branches:
                raise UnobservableError(branches)
        if np.linalg.norm(g) < options.grad_tol:
            converged = True
            it -= 1
            break
        cf, lam = _factor(G, options)
        if cf is None:
            raise UnobservableError(_null_space_branches(topology, G) or [br.id for br in topology.branches])
        lam_used = max(lam_used, lam)
        ds = sla.cho_solve(cf, g, check_finite=False)
        step = 1.0
        for _ in range(options.max_backtracks + 1):
            trial = s + step * ds
            Jt, rt = objective(trial)
            if Jt <= J:
                break
            step *= 0.5
        else:
            # no descent along the Gauss-Newton direction: stationary within rounding
            converged = np.max(np.abs(ds)) < options.step_tol or J < 1e-20
            break
        s, J, r = trial, Jt, rt
        trace.append(J)
        if np.max(np.abs(step * ds)) < options.step_tol:
            converged = True
            break
    cond = float(np.linalg.cond(G)) if G is not None else math.nan
    return WlsResult(s, it, converged, J, trace, cond, lam_used)


def write_measurements(ms, path, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(MEASUREMENT_HEADER)
        for (kind, loc, ph), z, sg, src in zip(ms.keys, ms.z, ms.sigma, ms.sources):
            w.writerow([kind, loc, PHASES[ph], repr(float(z)), repr(float(sg)), src])


def read_measurements(path):
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(rows)
    header = next(reader, None)
    if header != MEASUREMENT_HEADER:
        raise MeasurementError(f"bad measurement header {header}")
    items = []
    for row in reader:
        if not row:
            continue
        kind, loc, ph, z, sg, src = row
        items.append(Measurement(kind, loc, PHASES.index(ph), float(z), float(sg), src))
    return MeasurementSet.from_list(items)

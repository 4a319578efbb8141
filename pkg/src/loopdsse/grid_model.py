"""Radial three-phase feeder model and power-flow routines.

All network arithmetic is per-unit. The voltage base is the nominal
line-to-neutral voltage (``base_kv`` is line-to-line), the power base of one
phase is ``base_mva / 3``. With these bases the impedance base is
``base_kv**2 / base_mva`` ohm and a balanced three-phase load of ``P`` MW
draws ``P / base_mva`` pu on every phase.

Branch currents are always oriented away from the slack bus (parent to child)
regardless of how the branch was written in the topology file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

PHASES = "abc"
NPH = 3
# positive-sequence rotation for phases a, b, c
PHASE_ROTATION = np.exp(-2j * np.pi / 3 * np.arange(NPH))


class TopologyError(ValueError):
    pass


class PowerFlowDiverged(RuntimeError):
    def __init__(self, mismatch, iterations):
        super().__init__(
            f"backward/forward sweep did not converge after {iterations} sweeps "
            f"(last mismatch {mismatch:.3e} pu)"
        )
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass(frozen=True)
class Bus:
    id: str
    phases: str = PHASES


@dataclass(frozen=True, eq=False)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    z_ohm: np.ndarray  # (3, 3) complex series impedance matrix


@dataclass(frozen=True)
class Customer:
    """A metering point; customers behind one transformer share a bus."""

    id: str
    bus: str
    kva: float


@dataclass(frozen=True, eq=False)
class FeederTopology:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    slack_bus: str
    customers: tuple[Customer, ...] = ()
    base_kv: float = 12.47
    base_mva: float = 1.0
    name: str = "feeder"
    # optional default placement of the flow measurement units (branch ids)
    flow_meters: tuple[str, ...] = field(default=())

    @property
    def z_base(self):
        return self.base_kv**2 / self.base_mva

    @property
    def bus_ids(self):
        return [b.id for b in self.buses]

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_branch(self):
        return len(self.branches)

    @cached_property
    def bus_index(self):
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def branch_index(self):
        return {br.id: i for i, br in enumerate(self.branches)}

    @cached_property
    def neighbor_sets(self):
        nbrs = {b.id: set() for b in self.buses}
        for br in self.branches:
            if br.from_bus in nbrs and br.to_bus in nbrs:
                nbrs[br.from_bus].add(br.to_bus)
                nbrs[br.to_bus].add(br.from_bus)
        return nbrs

    def customers_at(self, bus_id):
        return [c for c in self.customers if c.bus == bus_id]

    @cached_property
    def customer_bus_index(self):
        """Bus index for every customer, in customer order."""
        return np.array([self.bus_index[c.bus] for c in self.customers], dtype=int)

    @cached_property
    def tree(self):
        report = validate_topology(self)
        if not report.ok:
            raise TopologyError("; ".join(report.violations))
        return RadialTree(self)


class RadialTree:
    """Index arrays describing the slack-rooted spanning tree.

    Branch ``b`` feeds bus ``branch_child[b]`` from ``branch_parent[b]``.
    """

    def __init__(self, topology):
        n = topology.n_bus
        idx = topology.bus_index
        adj = [[] for _ in range(n)]
        for b, br in enumerate(topology.branches):
            i, j = idx[br.from_bus], idx[br.to_bus]
            adj[i].append((j, b))
            adj[j].append((i, b))
        root = idx[topology.slack_bus]
        parent = np.full(n, -1, dtype=int)
        feeder_branch = np.full(n, -1, dtype=int)
        depth = np.zeros(n, dtype=int)
        order = [root]
        seen = {root}
        head = 0
        while head < len(order):
            k = order[head]
            head += 1
            for m, b in sorted(adj[k]):
                if m not in seen:
                    seen.add(m)
                    parent[m] = k
                    feeder_branch[m] = b
                    depth[m] = depth[k] + 1
                    order.append(m)
        self.root = root
        self.order = np.array(order, dtype=int)
        self.parent = parent
        self.feeder_branch = feeder_branch
        self.depth = depth
        nb = topology.n_branch
        self.branch_parent = np.empty(nb, dtype=int)
        self.branch_child = np.empty(nb, dtype=int)
        for k in order[1:]:
            self.branch_parent[feeder_branch[k]] = parent[k]
            self.branch_child[feeder_branch[k]] = k
        self.children = [[] for _ in range(n)]
        for k in order[1:]:
            self.children[parent[k]].append(k)
        zb = topology.z_base
        self.z_pu = np.stack([br.z_ohm for br in topology.branches]) / zb
        # path[k, b] = 1 when branch b lies on the path slack -> k
        path = np.zeros((n, nb))
        for k in order[1:]:
            path[k] = path[parent[k]]
            path[k, feeder_branch[k]] = 1.0
        self.path = path
        # downstream[b, k]: bus k is fed through branch b
        self.downstream = path.T.astype(bool)
        # incidence[k, b]: +1 if b feeds k, -1 if b leaves k
        inc = np.zeros((n, nb))
        inc[self.branch_child, np.arange(nb)] = 1.0
        inc[self.branch_parent, np.arange(nb)] = -1.0
        self.incidence = inc

    @cached_property
    def drop_matrix(self):
        """Complex map D with V = V_slack - D @ I for flattened (bus, phase) and (branch, phase)."""
        n, nb = self.path.shape
        D = np.zeros((n * NPH, nb * NPH), dtype=complex)
        for k in range(n):
            for b in np.flatnonzero(self.path[k]):
                D[k * NPH:(k + 1) * NPH, b * NPH:(b + 1) * NPH] = self.z_pu[b]
        return D


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_topology(topology):
    """Check radiality, connectivity, slack presence and impedance sanity."""
    problems = []
    ids = [b.id for b in topology.buses]
    if len(set(ids)) != len(ids):
        problems.append("duplicate bus id")
    id_set = set(ids)
    if topology.slack_bus not in id_set:
        problems.append(f"missing slack bus {topology.slack_bus!r}")
    for b in topology.buses:
        if b.phases != PHASES:
            problems.append(f"bus {b.id}: unsupported phase set {b.phases!r}")

    parent = {i: i for i in ids}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    cycle = False
    for br in topology.branches:
        if br.from_bus not in id_set or br.to_bus not in id_set:
            problems.append(f"branch {br.id}: unknown end bus")
            continue
        if br.from_bus == br.to_bus:
            problems.append(f"branch {br.id}: self loop")
            cycle = True
            continue
        ra, rb = find(br.from_bus), find(br.to_bus)
        if ra == rb:
            cycle = True
        else:
            parent[ra] = rb
        z = np.asarray(br.z_ohm)
        if z.shape != (NPH, NPH):
            problems.append(f"branch {br.id}: impedance must be 3x3")
            continue
        if not np.allclose(z, z.T, rtol=1e-9, atol=1e-12):
            problems.append(f"branch {br.id}: asymmetric impedance")
        if np.any(np.abs(np.diag(z)) == 0):
            problems.append(f"branch {br.id}: zero diagonal impedance")
    if cycle or len(topology.branches) >= len(ids):
        problems.append("cycle")
    if ids:
        roots = {find(i) for i in ids}
        if len(roots) > 1:
            problems.append("disconnected bus")
    seen = set()
    for c in topology.customers:
        if c.id in seen:
            problems.append(f"customer {c.id} mapped to more than one bus")
        seen.add(c.id)
        if c.bus not in id_set:
            problems.append(f"customer {c.id}: unknown bus {c.bus!r}")
    for br_id in topology.flow_meters:
        if br_id not in {br.id for br in topology.branches}:
            problems.append(f"flow meter on unknown branch {br_id!r}")
    return ValidationReport(problems)


def slack_phasors(magnitude=1.0, angle=0.0):
    """Balanced three-phase slack voltage."""
    return magnitude * np.exp(1j * angle) * PHASE_ROTATION


@dataclass
class PowerFlowResult:
    voltages: np.ndarray  # (..., n_bus, 3)
    currents: np.ndarray  # (..., n_branch, 3)
    converged: bool
    iterations: int
    mismatch: float


def _apply_z(z, current):
    # z: (nb, 3, 3); current: (..., nb, 3)
    return np.einsum("bpq,...bq->...bp", z, current)


def forward_power_flow(topology, loads, slack_voltage=None, max_sweeps=50, tol=1e-10):
    """Backward/forward sweep power flow.

    Parameters
    ----------
    loads : complex array (..., n_bus, 3)
        Constant-power demand per bus and phase in pu, consumption positive.
        Leading axes are treated as independent snapshots.
    slack_voltage : complex array (3,), optional
        Substation phasors; balanced 1 pu by default.

    Raises
    ------
    PowerFlowDiverged
        If the power mismatch is still above ``tol`` after ``max_sweeps``.
    """
    tree = topology.tree
    loads = np.asarray(loads, dtype=complex)
    if loads.shape[-2:] != (topology.n_bus, NPH):
        raise ValueError(f"loads must end with shape ({topology.n_bus}, {NPH})")
    if not np.all(np.isfinite(loads)):
        raise ValueError("loads must be finite")
    vs = slack_phasors() if slack_voltage is None else np.asarray(slack_voltage, dtype=complex)
    V = np.broadcast_to(vs, loads.shape).copy()
    order = tree.order[1:]
    parent = tree.parent
    fb = tree.feeder_branch
    z = tree.z_pu
    mismatch = math.inf
    for it in range(1, max_sweeps + 1):
        acc = np.conj(loads / V)
        for k in order[::-1]:
            acc[..., parent[k], :] += acc[..., k, :]
        I = np.empty(loads.shape[:-2] + (topology.n_branch, NPH), dtype=complex)
        I[..., fb[order], :] = acc[..., order, :]
        drop = _apply_z(z, I)
        for k in order:
            V[..., k, :] = V[..., parent[k], :] - drop[..., fb[k], :]
        resid = V[..., order, :] * np.conj(nodal_currents(topology, I)[..., order, :]) - loads[..., order, :]
        mismatch = float(np.max(np.abs(resid), initial=0.0))
        if mismatch < tol:
            return PowerFlowResult(V, I, True, it, mismatch)
    raise PowerFlowDiverged(mismatch, max_sweeps)


def nodal_currents(topology, currents):
    """Current drawn at every bus (inflow minus outflow), shape (..., n_bus, 3)."""
    inc = topology.tree.incidence
    return np.einsum("kb,...bp->...kp", inc, currents)


def voltages_from_branch_currents(topology, currents, slack_voltage=None):
    """Exact bus voltages from branch currents by cumulative Z*I drops."""
    tree = topology.tree
    currents = np.asarray(currents, dtype=complex)
    if currents.shape[-2:] != (topology.n_branch, NPH):
        raise ValueError(
            f"expected {topology.n_branch} branch currents per phase, got shape {currents.shape}"
        )
    vs = slack_phasors() if slack_voltage is None else np.asarray(slack_voltage, dtype=complex)
    V = np.empty(currents.shape[:-2] + (topology.n_bus, NPH), dtype=complex)
    V[..., tree.root, :] = vs
    drop = _apply_z(tree.z_pu, currents)
    for k in tree.order[1:]:
        V[..., k, :] = V[..., tree.parent[k], :] - drop[..., tree.feeder_branch[k], :]
    return V


def branch_losses(topology, currents):
    """Series losses I^H Z I summed over branches, complex pu."""
    drop = _apply_z(topology.tree.z_pu, currents)
    return np.sum(drop * np.conj(currents), axis=(-2, -1))


def slack_power(topology, voltages, currents):
    """Complex power delivered by the substation, summed over phases."""
    tree = topology.tree
    heads = [tree.feeder_branch[k] for k in tree.children[tree.root]]
    vs = voltages[..., tree.root, :]
    return np.sum(vs[..., None, :] * np.conj(currents[..., heads, :]), axis=(-2, -1))


# --------------------------------------------------------------------------
# topology files


def load_topology(path):
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return topology_from_dict(doc)


def topology_from_dict(doc):
    feeder = doc.get("feeder", {})
    try:
        buses = tuple(Bus(str(b["id"]), b.get("phases", PHASES)) for b in doc.get("bus", []))
        branches = []
        for br in doc.get("branch", []):
            r = np.asarray(br["r_ohm"], dtype=float)
            x = np.asarray(br["x_ohm"], dtype=float)
            branches.append(Branch(str(br["id"]), str(br["from"]), str(br["to"]), r + 1j * x))
        customers = tuple(
            Customer(str(c["id"]), str(c["bus"]), float(c.get("kva", 0.0))) for c in doc.get("customer", [])
        )
        return FeederTopology(
            buses=buses,
            branches=tuple(branches),
            slack_bus=str(feeder["slack_bus"]),
            customers=customers,
            base_kv=float(feeder.get("base_kv", 12.47)),
            base_mva=float(feeder.get("base_mva", 1.0)),
            name=str(feeder.get("name", "feeder")),
            flow_meters=tuple(str(b) for b in feeder.get("flow_meters", [])),
        )
    except KeyError as exc:
        raise TopologyError(f"topology document missing key {exc}") from None


def _toml_matrix(m):
    rows = ", ".join("[" + ", ".join(repr(float(v)) for v in row) + "]" for row in m)
    return f"[{rows}]"


def dump_topology(topology):
    out = [
        "# radial three-phase feeder; impedances are series R/X matrices in ohm",
        "[feeder]",
        f'name = "{topology.name}"',
        f'slack_bus = "{topology.slack_bus}"',
        f"base_kv = {topology.base_kv!r}",
        f"base_mva = {topology.base_mva!r}",
        "flow_meters = [" + ", ".join(f'"{b}"' for b in topology.flow_meters) + "]",
        "",
    ]
    for b in topology.buses:
        out += ["[[bus]]", f'id = "{b.id}"', f'phases = "{b.phases}"', ""]
    for br in topology.branches:
        out += [
            "[[branch]]",
            f'id = "{br.id}"',
            f'from = "{br.from_bus}"',
            f'to = "{br.to_bus}"',
            f"r_ohm = {_toml_matrix(br.z_ohm.real)}",
            f"x_ohm = {_toml_matrix(br.z_ohm.imag)}",
            "",
        ]
    for c in topology.customers:
        out += ["[[customer]]", f'id = "{c.id}"', f'bus = "{c.bus}"', f"kva = {c.kva!r}", ""]
    return "\n".join(out)


def save_topology(topology, path):
    Path(path).write_text(dump_topology(topology))


# --------------------------------------------------------------------------
# synthetic feeders

# balanced overhead line, ohm per mile (self / mutual)
Z_SELF = 0.3418 + 1.0335j
Z_MUTUAL = 0.1558 + 0.4367j


def line_impedance(miles, z_self=Z_SELF, z_mutual=Z_MUTUAL):
    z = np.full((NPH, NPH), z_mutual, dtype=complex)
    np.fill_diagonal(z, z_self)
    return z * miles


# (from, to, miles); trunk sub-n01-n02-n03-n04, laterals at n01 and n03
_FEEDER13_LINES = [
    ("sub", "n01", 1.80),
    ("n01", "n02", 1.20),
    ("n02", "n03", 1.20),
    ("n03", "n04", 1.50),
    ("n01", "n05", 0.90),
    ("n05", "n06", 0.75),
    ("n06", "n07", 0.75),
    ("n05", "n08", 0.90),
    ("n03", "n09", 0.90),
    ("n09", "n10", 0.75),
    ("n10", "n11", 0.60),
    ("n09", "n12", 0.90),
]
_FEEDER13_KVA = {
    "n01": 300.0, "n02": 500.0, "n03": 225.0, "n04": 750.0,
    "n05": 300.0, "n06": 150.0, "n07": 500.0, "n08": 225.0,
    "n09": 300.0, "n10": 500.0, "n11": 150.0, "n12": 300.0,
}


def feeder13():
    """The bundled 13-bus test feeder: one transformer-aggregated customer per load bus."""
    buses = [Bus("sub")] + [Bus(f"n{i:02d}") for i in range(1, 13)]
    branches = tuple(
        Branch(f"L{f}_{t}", f, t, line_impedance(mi)) for f, t, mi in _FEEDER13_LINES
    )
    customers = tuple(Customer(f"T{bus[1:]}", bus, kva) for bus, kva in _FEEDER13_KVA.items())
    return FeederTopology(
        buses=tuple(buses),
        branches=branches,
        slack_bus="sub",
        customers=customers,
        name="feeder13",
        flow_meters=("Lsub_n01", "Ln01_n05", "Ln03_n09"),
    )


def random_radial_feeder(n_bus, seed, unbalanced=False):
    """Random tree feeder with one customer per non-slack bus (test fixture generator)."""
    rng = np.random.default_rng(seed)
    buses = [Bus(f"b{i}") for i in range(n_bus)]
    branches = []
    for i in range(1, n_bus):
        p = int(rng.integers(0, i))
        miles = float(rng.uniform(0.1, 0.5))
        z = line_impedance(miles)
        if unbalanced:
            pert = rng.uniform(0.9, 1.1, size=(NPH, NPH))
            pert = (pert + pert.T) / 2
            z = z * pert
        # random orientation exercises the parent/child bookkeeping
        f, t = (f"b{p}", f"b{i}") if rng.random() < 0.7 else (f"b{i}", f"b{p}")
        branches.append(Branch(f"br{i}", f, t, z))
    customers = tuple(
        Customer(f"c{i}", f"b{i}", float(rng.uniform(50, 400))) for i in range(1, n_bus)
    )
    return FeederTopology(tuple(buses), tuple(branches), "b0", customers, name=f"random{n_bus}_{seed}")

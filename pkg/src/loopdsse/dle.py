"""Load estimation from estimated voltages.

For every bus k the active power drawn is recovered from the branch flows
towards its neighbours,

    P_k = -sum_{m in N_k} sum_phases Re(V_k * conj(Z_km^-1 (V_k - V_m))),

positive for consumption (the bracketed sum is the power *leaving* k
through its lines, i.e. the injection).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_model import NPH


class SingularImpedanceError(ValueError):
    pass


def _admittances(topology):
    cache = topology.__dict__.setdefault("_dle_cache", {})
    if "Y" not in cache:
        z = topology.tree.z_pu
        try:
            cache["Y"] = np.linalg.inv(z)
        except np.linalg.LinAlgError as exc:
            raise SingularImpedanceError("singular branch impedance block") from exc
        if not np.all(np.isfinite(cache["Y"])):
            raise SingularImpedanceError("singular branch impedance block")
    return cache["Y"]


def nodal_power_from_voltages(topology, voltages, per_phase=False):
    """Active consumption per bus in pu, shape (..., n_bus) or (..., n_bus, 3).

    Parameters
    ----------
    voltages : complex array (..., n_bus, 3)
    per_phase : bool
        Return the per-phase contributions instead of their sum.
    """
    V = np.asarray(voltages, dtype=complex)
    if V.shape[-2:] != (topology.n_bus, NPH):
        raise ValueError(f"voltages must end with shape ({topology.n_bus}, {NPH})")
    Y = _admittances(topology)
    tree = topology.tree
    up, down = tree.branch_parent, tree.branch_child
    # current through each branch from its upstream to its downstream bus
    I = np.einsum("bpq,...bq->...bp", Y, V[..., up, :] - V[..., down, :])
    S = np.zeros(V.shape, dtype=complex)
    # injection at the upstream end leaves through the branch, at the downstream end enters
    np.add.at(S, (Ellipsis, up, slice(None)), V[..., up, :] * np.conj(I))
    np.add.at(S, (Ellipsis, down, slice(None)), -V[..., down, :] * np.conj(I))
    P = -S.real
    return P if per_phase else P.sum(axis=-1)


def bus_power_to_customers(topology, bus_power, shares):
    """Split per-bus power to customers by fixed shares.

    ``shares[c]`` is customer c's fraction of its bus total (sums to 1 per bus).
    Returns (..., n_customers).
    """
    idx = topology.customer_bus_index
    return bus_power[..., idx] * np.asarray(shares)


def customer_shares(topology, means):
    """Training-mean shares of each customer within its bus."""
    means = np.asarray(means, dtype=float)
    idx = topology.customer_bus_index
    tot = np.zeros(topology.n_bus)
    np.add.at(tot, idx, means)
    with np.errstate(invalid="ignore", divide="ignore"):
        sh = means / tot[idx]
    counts = np.bincount(idx, minlength=topology.n_bus)[idx]
    return np.where(np.isfinite(sh), sh, 1.0 / counts)


@dataclass(frozen=True, eq=False)
class DleSignal:
    kw: np.ndarray  # (..., n_customers)
    normalized: np.ndarray
    cycle: int = 0

import numpy as np
import pytest

from loopdsse import grid_model as grid


def chain_feeder(z_pu_list, base_kv=12.47, base_mva=1.0):
    """Chain sub - b1 - b2 ... with diagonal per-phase impedances given in pu."""
    zb = base_kv**2 / base_mva
    n = len(z_pu_list) + 1
    buses = tuple(grid.Bus("sub" if i == 0 else f"b{i}") for i in range(n))
    branches = tuple(
        grid.Branch(f"l{i}", buses[i - 1].id, buses[i].id, np.eye(3) * complex(z) * zb) for i, z in enumerate(z_pu_list, start=1)
    )
    customers = tuple(grid.Customer(f"c{i}", f"b{i}", 100.0) for i in range(1, n))
    return grid.FeederTopology(buses, branches, "sub", customers, base_kv=base_kv, base_mva=base_mva)


@pytest.fixture(scope="session")
def feeder():
    return grid.feeder13()


def loads_for(topology, rng, scale=0.3):
    L = np.zeros((topology.n_bus, 3), complex)
    p = rng.uniform(0.2, 1.0, (topology.n_bus, 3)) * scale
    L[:] = p * (1 + 0.33j)
    L[topology.tree.root] = 0
    return L

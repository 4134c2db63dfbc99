import numpy as np
import pytest

from gridbench.cases import load_bundled, two_bus_case
from gridbench.grid import GridCase


@pytest.fixture(scope="session")
def case14():
    return load_bundled("case14")


@pytest.fixture(scope="session")
def case118():
    return load_bundled("case118")


@pytest.fixture
def two_bus():
    return two_bus_case()


def random_case(rng, n_sub=6, extra_lines=2, load_level=0.5):
    """Connected random case: a ring plus chords, one slack, a couple of PVs.

    Loading is kept moderate so Newton converges from flat starts.
    """
    n_line = n_sub + extra_lines
    ring = [(i, (i + 1) % n_sub) for i in range(n_sub)]
    chords = set()
    while len(chords) < extra_lines:
        a, b = rng.choice(n_sub, size=2, replace=False)
        a, b = int(min(a, b)), int(max(a, b))
        if (a, b) not in ring and (a, b) not in chords and b - a != 1:
            chords.add((a, b))
    ends = ring + sorted(chords)
    r = rng.uniform(0.0, 0.05, n_line)
    x = rng.uniform(0.02, 0.2, n_line)
    b = rng.uniform(0.0, 0.04, n_line)
    gen_subs = [0] + sorted(rng.choice(np.arange(1, n_sub), size=2, replace=False).tolist())
    load_subs = [s for s in range(n_sub) if s not in gen_subs]
    load_p = rng.uniform(10.0, 60.0, len(load_subs)) * load_level
    load_q = load_p * rng.uniform(0.1, 0.4, len(load_subs))
    gen_p = np.zeros(len(gen_subs))
    gen_p[1:] = load_p.sum() * 0.6 / max(len(gen_subs) - 1, 1)
    return GridCase(
        name="random",
        base_mva=100.0,
        substation_ids=tuple(f"s{i}" for i in range(n_sub)),
        sub_base_kv=np.full(n_sub, 138.0),
        line_ids=tuple(f"l{i}" for i in range(n_line)),
        line_from=np.array([e[0] for e in ends], dtype=np.int64),
        line_to=np.array([e[1] for e in ends], dtype=np.int64),
        line_r=r, line_x=x, line_b=b,
        line_tap=np.ones(n_line),
        gen_ids=tuple(f"g{i}" for i in range(len(gen_subs))),
        gen_sub=np.array(gen_subs, dtype=np.int64),
        gen_p_mw=gen_p,
        gen_v_kv=np.full(len(gen_subs), 138.0) * rng.uniform(0.99, 1.03, len(gen_subs)),
        gen_is_slack=np.array([True] + [False] * (len(gen_subs) - 1)),
        load_ids=tuple(f"d{i}" for i in range(len(load_subs))),
        load_sub=np.array(load_subs, dtype=np.int64),
        load_p_mw=load_p,
        load_q_mvar=load_q,
    )

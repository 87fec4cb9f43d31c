"""Random molecule generation for tests, demos, and desk-scale benchmarks.

Molecules are random trees with extra ring-closing bonds whose fundamental
cycles are kept vertex-disjoint, so the minimum cycle basis is unique and
structure counts (atom count, ring count) are known exactly by construction.
That makes generated labels an independent oracle for learning checks.
"""

from __future__ import annotations

from collections import deque
from datetime import date, timedelta

import numpy as np

from .molio import Atom, Bond, MoleculeRecord

_ELEMENT_POOL = ["C"] * 8 + ["N", "N", "O", "O", "S", "F", "Cl", "H", "H"]
_BOND_LENGTH = 1.5


def random_molecule(rng: np.random.Generator, mol_id: str,
                    n_atoms_range: tuple[int, int] = (5, 40),
                    max_rings: int = 3) -> tuple[MoleculeRecord, dict]:
    """One random molecule plus its construction facts (atom/ring counts)."""
    n = int(rng.integers(n_atoms_range[0], n_atoms_range[1] + 1))
    parents = [int(rng.integers(0, i)) for i in range(1, n)]
    positions = np.zeros((n, 3))
    for i, p in enumerate(parents, start=1):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        positions[i] = positions[p] + direction * (_BOND_LENGTH + rng.uniform(-0.1, 0.1))

    adj: list[set[int]] = [set() for _ in range(n)]
    bonds = []
    for i, p in enumerate(parents, start=1):
        adj[p].add(i)
        adj[i].add(p)
        bonds.append((p, i))

    # ring closures between tree-distance-d nodes give (d+1)-cycles; keeping
    # the cycles vertex-disjoint keeps the cycle basis unique
    used: set[int] = set()
    rings = 0
    for _ in range(int(rng.integers(0, max_rings + 1))):
        u = int(rng.integers(0, n))
        if u in used:
            continue
        target = int(rng.integers(2, 8))  # cycle size target-1+... path length
        path = _tree_walk(adj, u, target, used)
        if path is None:
            continue
        v = path[-1]
        bonds.append((min(u, v), max(u, v)))
        used.update(path)
        rings += 1

    elements = [str(rng.choice(_ELEMENT_POOL)) for _ in range(n)]
    charges = [int(rng.choice([0, 0, 0, 0, 0, 0, 0, 0, 1, -1])) for _ in range(n)]
    atoms = [Atom(elements[i], tuple(positions[i]), charges[i], False)
             for i in range(n)]
    orders = [str(rng.choice(["1", "1", "1", "2"])) for _ in bonds]
    record = MoleculeRecord(
        id=mol_id, atoms=atoms,
        bonds=[Bond(a, b, o) for (a, b), o in zip(bonds, orders)])
    return record, {"n_atoms": n, "n_rings": rings}


def _tree_walk(adj: list[set[int]], start: int, length: int,
               used: set[int]) -> list[int] | None:
    """A simple tree path of exactly `length` edges avoiding used vertices."""
    queue = deque([[start]])
    options = []
    while queue:
        path = queue.popleft()
        if len(path) - 1 == length:
            options.append(path)
            continue
        for nxt in sorted(adj[path[-1]]):
            if nxt in path or nxt in used:
                continue
            queue.append(path + [nxt])
    return options[0] if options else None


def make_dataset(n_molecules: int, seed: int,
                 n_atoms_range: tuple[int, int] = (5, 40),
                 max_rings: int = 3,
                 label_fn=None, tasks: dict | None = None,
                 start_date: str = "2020-01-01",
                 ) -> tuple[list[MoleculeRecord], list[dict]]:
    """Generate a dated dataset.

    ``tasks`` maps task name to (coef_atoms, coef_rings, intercept, noise_sigma,
    label_fraction); label_fn(meta, rng) -> dict overrides it entirely.
    """
    rng = np.random.default_rng(seed)
    if tasks is None and label_fn is None:
        tasks = {"y": (0.35, 0.8, -2.0, 0.05, 1.0)}
    day0 = date.fromisoformat(start_date)
    records: list[MoleculeRecord] = []
    metas: list[dict] = []
    for i in range(n_molecules):
        rec, meta = random_molecule(rng, f"mol-{i:05d}", n_atoms_range, max_rings)
        rec.registration_date = (day0 + timedelta(days=i)).isoformat()
        if label_fn is not None:
            rec.labels = label_fn(meta, rng)
        else:
            for name, (ca, cr, c0, sigma, frac) in tasks.items():
                if rng.uniform() <= frac:
                    value = ca * meta["n_atoms"] + cr * meta["n_rings"] + c0
                    rec.labels[name] = float(value + rng.normal(0.0, sigma))
        records.append(rec)
        metas.append(meta)
    return records, metas


def make_two_task_dataset(n_molecules: int, seed: int, n_labels_b: int = 50,
                          noise_a: float = 0.1, noise_b: float = 0.1,
                          ) -> tuple[list[MoleculeRecord], list[dict]]:
    """Two correlated tasks sharing the structural signal; task "b" is labeled
    on only the first n_labels_b molecules (by generation order)."""
    rng = np.random.default_rng(seed)
    records, metas = make_dataset(n_molecules, seed + 1, tasks={})
    labeled_b = set(rng.permutation(n_molecules)[:n_labels_b].tolist())
    for i, (rec, meta) in enumerate(zip(records, metas)):
        signal = 0.3 * meta["n_atoms"] + 0.9 * meta["n_rings"] - 1.0
        rec.labels["a"] = float(signal + rng.normal(0.0, noise_a))
        if i in labeled_b:
            rec.labels["b"] = float(0.8 * signal + 0.5 + rng.normal(0.0, noise_b))
    return records, metas

"""Molecule dataset I/O, the molecule object model, and ring perception.

The dataset format is JSON Lines: a header line ``{"chemigraph_dataset": 1}``
followed by one molecule object per line.  Atom and bond indices are 0-based.
Parsing and ring perception are pure per-molecule functions and safe to run
concurrently across molecules.
"""

from __future__ import annotations

import io
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import IO, Iterable, Union

DATASET_FORMAT_VERSION = 1
DATASET_HEADER_KEY = "chemigraph_dataset"

# 23-entry element vocabulary; the last slot is the catch-all.
SUPPORTED_ELEMENTS = (
    "H", "C", "N", "O", "F", "Na", "Mg", "Si", "P", "S", "Cl", "K",
    "Ca", "Mn", "Fe", "Cu", "Zn", "Se", "Br", "I", "B", "Li", "Other",
)
ELEMENT_INDEX = {el: i for i, el in enumerate(SUPPORTED_ELEMENTS)}

BOND_ORDERS = ("1", "2", "3", "ar")

# Ring sizes retained for features; larger cycles are discarded entirely.
MIN_RING_SIZE = 3
MAX_RING_SIZE = 8


class DatasetError(ValueError):
    """Malformed dataset content. Carries the line number and record id."""

    def __init__(self, message: str, *, line: int | None = None, record_id: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if record_id is not None:
            loc.append(f"record {record_id!r}")
        super().__init__(f"{': '.join(loc) + ': ' if loc else ''}{message}")
        self.line = line
        self.record_id = record_id


@dataclass(frozen=True)
class Atom:
    element: str
    position: tuple[float, float, float]
    formal_charge: int = 0
    aromatic: bool = False


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: str = "1"  # one of BOND_ORDERS


@dataclass
class MoleculeRecord:
    id: str
    atoms: list[Atom]
    bonds: list[Bond]
    labels: dict[str, float] = field(default_factory=dict)
    registration_date: str | None = None
    explicit_features: list[float] | None = None

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def adjacency(self) -> list[list[int]]:
        """Sorted neighbor lists of the bond graph."""
        adj: list[list[int]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            adj[bond.a].append(bond.b)
            adj[bond.b].append(bond.a)
        for lst in adj:
            lst.sort()
        return adj


@dataclass
class RingInfo:
    """Retained rings (sizes 3..8) of one molecule.

    ``rings`` holds each cycle as a tuple of atom indices in walk order,
    canonicalized to start at its smallest atom.  ``ring_size_counts`` has one
    row per atom with six entries counting membership in rings of size 3..8.
    """

    rings: list[tuple[int, ...]]
    ring_size_counts: list[list[int]]
    _same_ring_pairs: frozenset[tuple[int, int]]

    def same_ring(self, a: int, b: int) -> bool:
        if a == b:
            return any(a in ring for ring in self.rings)
        key = (a, b) if a < b else (b, a)
        return key in self._same_ring_pairs

    @property
    def n_rings(self) -> int:
        return len(self.rings)


class ParseReport:
    """Mutable counters filled in by parse_dataset."""

    def __init__(self) -> None:
        self.records = 0
        self.unknown_elements: Counter[str] = Counter()

    @property
    def n_warnings(self) -> int:
        return sum(self.unknown_elements.values())


def _coerce_stream(stream: Union[str, Path, IO[bytes], IO[str], bytes]) -> Iterable[str]:
    if isinstance(stream, (str, Path)):
        return Path(stream).read_text(encoding="utf-8").splitlines()
    if isinstance(stream, bytes):
        return stream.decode("utf-8").splitlines()
    data = stream.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return data.splitlines()


def _parse_atom(obj: dict, line: int, rid: str, report: ParseReport | None) -> Atom:
    try:
        el = str(obj["el"])
        pos = (float(obj["x"]), float(obj["y"]), float(obj["z"]))
        charge = int(obj.get("q", 0))
        aromatic = bool(obj.get("ar", False))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"bad atom object: {exc}", line=line, record_id=rid) from exc
    if not all(math.isfinite(c) for c in pos):
        raise DatasetError("non-finite atom position", line=line, record_id=rid)
    if el not in ELEMENT_INDEX:
        if report is not None:
            report.unknown_elements[el] += 1
        el = "Other"
    return Atom(element=el, position=pos, formal_charge=charge, aromatic=aromatic)


def _parse_record(obj: dict, line: int, report: ParseReport | None) -> MoleculeRecord:
    rid = str(obj.get("id", f"<line {line}>"))
    if "atoms" not in obj or not obj["atoms"]:
        raise DatasetError("record has no atoms", line=line, record_id=rid)
    atoms = [_parse_atom(a, line, rid, report) for a in obj["atoms"]]
    bonds: list[Bond] = []
    seen_pairs: set[tuple[int, int]] = set()
    for b in obj.get("bonds", []):
        try:
            ai, bi = int(b["a"]), int(b["b"])
            order = str(b.get("order", "1"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad bond object: {exc}", line=line, record_id=rid) from exc
        if not (0 <= ai < len(atoms)) or not (0 <= bi < len(atoms)):
            raise DatasetError(
                f"bond index out of range: ({ai}, {bi}) in a {len(atoms)}-atom molecule",
                line=line, record_id=rid)
        if ai == bi:
            raise DatasetError(f"self-bond on atom {ai}", line=line, record_id=rid)
        if order not in BOND_ORDERS:
            raise DatasetError(f"unknown bond order {order!r}", line=line, record_id=rid)
        key = (min(ai, bi), max(ai, bi))
        if key in seen_pairs:
            raise DatasetError(f"duplicate bond {key}", line=line, record_id=rid)
        seen_pairs.add(key)
        bonds.append(Bond(a=ai, b=bi, order=order))
    labels = {str(k): float(v) for k, v in obj.get("labels", {}).items()}
    xfeat = obj.get("xfeat")
    if xfeat is not None:
        xfeat = [float(v) for v in xfeat]
    return MoleculeRecord(
        id=rid, atoms=atoms, bonds=bonds, labels=labels,
        registration_date=obj.get("date"), explicit_features=xfeat)


def parse_dataset(
    stream: Union[str, Path, IO[bytes], IO[str], bytes],
    format: str = "jsonl",
    report: ParseReport | None = None,
) -> list[MoleculeRecord]:
    """Parse a dataset stream into MoleculeRecords, preserving input order.

    Unknown element symbols are mapped to "Other"; pass a ParseReport to
    collect the warning counts.
    """
    if format != "jsonl":
        raise DatasetError(f"unknown dataset format tag {format!r}")
    lines = list(_coerce_stream(stream))
    records: list[MoleculeRecord] = []
    header_seen = False
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc.msg}", line=lineno) from exc
        if not header_seen:
            if not (isinstance(obj, dict) and obj.get(DATASET_HEADER_KEY) == DATASET_FORMAT_VERSION):
                raise DatasetError(
                    f'missing or bad header line (expected {{"{DATASET_HEADER_KEY}": '
                    f'{DATASET_FORMAT_VERSION}}})', line=lineno)
            header_seen = True
            continue
        if not isinstance(obj, dict):
            raise DatasetError("record is not a JSON object", line=lineno)
        records.append(_parse_record(obj, lineno, report))
        if report is not None:
            report.records += 1
    if not header_seen and lines and any(line.strip() for line in lines):
        raise DatasetError("dataset has content but no header line")
    return records


def serialize_dataset(records: Iterable[MoleculeRecord], stream: IO[str] | None = None) -> str:
    """Write records back out in the dataset format. Returns the text."""
    out = io.StringIO()
    out.write(json.dumps({DATASET_HEADER_KEY: DATASET_FORMAT_VERSION}) + "\n")
    for rec in records:
        obj: dict = {
            "id": rec.id,
            "atoms": [
                {"el": a.element, "x": a.position[0], "y": a.position[1],
                 "z": a.position[2], "q": a.formal_charge, "ar": a.aromatic}
                for a in rec.atoms
            ],
            "bonds": [{"a": b.a, "b": b.b, "order": b.order} for b in rec.bonds],
            "labels": rec.labels,
        }
        if rec.registration_date is not None:
            obj["date"] = rec.registration_date
        if rec.explicit_features is not None:
            obj["xfeat"] = rec.explicit_features
        out.write(json.dumps(obj, sort_keys=True) + "\n")
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text


# --- ring perception -------------------------------------------------------

def _bfs_tree(adj: list[list[int]], root: int) -> tuple[dict[int, int], dict[int, int]]:
    dist = {root: 0}
    parent = {root: -1}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                parent[v] = u
                queue.append(v)
    return dist, parent

def _path_to_root(parent: dict[int, int], v: int) -> list[int]:
    path = [v]
    while parent[path[-1]] != -1:
        path.append(parent[path[-1]])
    return path

def _cycle_edge_mask(nodes: tuple[int, ...], edge_ids: dict[tuple[int, int], int]) -> int:
    mask = 0
    for i, u in enumerate(nodes):
        v = nodes[(i + 1) % len(nodes)]
        mask ^= 1 << edge_ids[(min(u, v), max(u, v))]
    return mask

def _canonical_cycle(nodes: list[int]) -> tuple[int, ...]:
    # Rotate so the walk starts at the smallest atom and steps toward its
    # smaller ring neighbor; makes ring tuples reproducible.
    k = nodes.index(min(nodes))
    rotated = nodes[k:] + nodes[:k]
    if rotated[1] > rotated[-1]:
        rotated = [rotated[0]] + rotated[:0:-1]
    return tuple(rotated)


def perceive_rings(molecule: MoleculeRecord) -> RingInfo:
    """Compute an SSSR (minimum cycle basis) of the bond graph.

    Candidate cycles come from per-vertex BFS shortest paths closed over each
    edge; a GF(2) greedy sweep in (length, sorted atom tuple) order keeps the
    independent ones.  Rings larger than 8 atoms are dropped from the result.
    """
    n = molecule.n_atoms
    adj = molecule.adjacency()
    edges = sorted({(min(b.a, b.b), max(b.a, b.b)) for b in molecule.bonds})
    edge_ids = {e: i for i, e in enumerate(edges)}

    # cyclomatic number |E| - |V| + #components
    seen: set[int] = set()
    components = 0
    for start in range(n):
        if start in seen:
            continue
        components += 1
        stack = [start]
        seen.add(start)
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
    rank = len(edges) - n + components
    counts = [[0] * (MAX_RING_SIZE - MIN_RING_SIZE + 1) for _ in range(n)]
    if rank == 0:
        return RingInfo(rings=[], ring_size_counts=counts, _same_ring_pairs=frozenset())

    candidates: dict[int, tuple[int, ...]] = {}
    for root in range(n):
        dist, parent = _bfs_tree(adj, root)
        for x, y in edges:
            if x not in dist or y not in dist:
                continue
            px = _path_to_root(parent, x)
            py = _path_to_root(parent, y)
            if set(px) & set(py) != {root}:
                continue
            nodes = px[::-1] + py[:-1]  # root..x, then y back toward root
            if len(nodes) < MIN_RING_SIZE:
                continue
            mask = _cycle_edge_mask(tuple(nodes), edge_ids)
            if mask and mask not in candidates:
                candidates[mask] = _canonical_cycle(nodes)

    ordered = sorted(candidates.items(), key=lambda kv: (len(kv[1]), tuple(sorted(kv[1]))))
    basis: dict[int, int] = {}  # pivot bit -> reduced mask
    chosen: list[tuple[int, ...]] = []
    for mask, nodes in ordered:
        m = mask
        while m:
            pivot = m & -m
            row = basis.get(pivot)
            if row is None:
                break
            m ^= row
        if m:
            basis[m & -m] = m
            chosen.append(nodes)
            if len(chosen) == rank:
                break

    if len(chosen) < rank:
        # Horton candidates span the cycle space of a connected graph; the
        # sweep runs per component, so a shortfall means a bug upstream.
        raise AssertionError(
            f"cycle basis incomplete: {len(chosen)} of {rank} independent rings")

    retained = [ring for ring in chosen if MIN_RING_SIZE <= len(ring) <= MAX_RING_SIZE]
    pairs: set[tuple[int, int]] = set()
    for ring in retained:
        for a in ring:
            counts[a][len(ring) - MIN_RING_SIZE] += 1
        for i, a in enumerate(ring):
            for b in ring[i + 1:]:
                pairs.add((a, b) if a < b else (b, a))
    return RingInfo(rings=retained, ring_size_counts=counts, _same_ring_pairs=frozenset(pairs))


def chronological_split(
    records: list[MoleculeRecord], test_fraction: float,
) -> tuple[list[MoleculeRecord], list[MoleculeRecord]]:
    """Stable date-ordered split; the newest ceil(n * test_fraction) records
    form the test set.  Without any dates the input order is the chronology;
    a mix of dated and undated records is rejected as ambiguous.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    dated = [r.registration_date is not None for r in records]
    if any(dated) and not all(dated):
        missing = next(r.id for r in records if r.registration_date is None)
        raise DatasetError(
            f"ambiguous chronology: some records carry dates but {missing!r} does not")
    ordered = list(records)
    if records and all(dated):
        for r in records:
            try:
                date.fromisoformat(r.registration_date[:10])
            except ValueError as exc:
                raise DatasetError(f"bad ISO date {r.registration_date!r}",
                                   record_id=r.id) from exc
        ordered.sort(key=lambda r: r.registration_date)  # stable
    n_test = math.ceil(len(records) * test_fraction)
    split = len(ordered) - n_test
    return ordered[:split], ordered[split:]

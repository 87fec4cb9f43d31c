"""Quantize molecules into the model's numeric inputs.

Each atom becomes a 33-dim vector: one-hot element type (23), van der Waals
and covalent radii (2), ring-size membership counts for sizes 3..8 (6), an
aromatic flag (1) and the formal charge (1).  Each retained atom pair becomes
a 5-dim vector: one-hot bond category {single, double, none} (3), Euclidean
distance (1) and a same-ring flag (1).  Triple and aromatic bonds collapse
into the "double" category; the aromatic atom flag and same-ring flag keep
the distinction recoverable.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .molio import ELEMENT_INDEX, MoleculeRecord, RingInfo, perceive_rings

ATOM_FEATURE_WIDTH = 33
PAIR_FEATURE_WIDTH = 5
_N_ELEMENTS = len(ELEMENT_INDEX)  # 23
_RING_SLOTS = 6

_BOND_SINGLE, _BOND_DOUBLE, _BOND_NONE = 0, 1, 2

FEATURE_CACHE_MAGIC = b"CHFC"
FEATURE_CACHE_VERSION = 1


class FeaturizeWarning(UserWarning):
    pass


def _load_radii() -> tuple[int, dict[str, tuple[float, float]]]:
    text = resources.files("chemigraph").joinpath("data/radii.json").read_text()
    table = json.loads(text)
    radii = {el: (float(v[0]), float(v[1])) for el, v in table["elements"].items()}
    return int(table["version"]), radii


RADII_VERSION, RADII = _load_radii()


def atom_features(molecule: MoleculeRecord, rings: RingInfo, atom_index: int) -> np.ndarray:
    """33-dim feature vector for one atom."""
    atom = molecule.atoms[atom_index]
    vec = np.zeros(ATOM_FEATURE_WIDTH)
    vec[ELEMENT_INDEX[atom.element]] = 1.0
    vec[_N_ELEMENTS:_N_ELEMENTS + 2] = RADII[atom.element]
    vec[_N_ELEMENTS + 2:_N_ELEMENTS + 2 + _RING_SLOTS] = rings.ring_size_counts[atom_index]
    vec[-2] = 1.0 if atom.aromatic else 0.0
    vec[-1] = float(atom.formal_charge)
    return vec


def _bond_category(order: str | None) -> int:
    if order is None:
        return _BOND_NONE
    return _BOND_SINGLE if order == "1" else _BOND_DOUBLE


def pair_features(molecule: MoleculeRecord, rings: RingInfo, a: int, b: int) -> np.ndarray:
    """5-dim feature vector for an atom pair (bonded or not)."""
    if a == b:
        raise ValueError(f"pair features need two distinct atoms, got ({a}, {b})")
    order = None
    for bond in molecule.bonds:
        if {bond.a, bond.b} == {a, b}:
            order = bond.order
            break
    vec = np.zeros(PAIR_FEATURE_WIDTH)
    vec[_bond_category(order)] = 1.0
    pa = np.asarray(molecule.atoms[a].position)
    pb = np.asarray(molecule.atoms[b].position)
    vec[3] = float(np.linalg.norm(pa - pb))
    vec[4] = 1.0 if rings.same_ring(a, b) else 0.0
    return vec


@dataclass
class MolGraph:
    """Model input for one molecule.

    Directed neighbor pairs are stored flat, sorted by (center, neighbor);
    ``pair_src[i]`` is the center atom whose neighborhood row ``i`` belongs
    to.  Every retained unordered pair appears in both directions with an
    identical feature row.
    """

    mol_id: str
    atom_feats: np.ndarray   # [n, 33]
    pair_src: np.ndarray     # [E] int64, sorted ascending
    pair_dst: np.ndarray     # [E] int64
    pair_feats: np.ndarray   # [E, 5]

    @property
    def n_atoms(self) -> int:
        return self.atom_feats.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.pair_src.shape[0]

    @property
    def segment_lengths(self) -> np.ndarray:
        """Directed-neighbor counts per center atom (zeros kept)."""
        return np.bincount(self.pair_src, minlength=self.n_atoms).astype(np.int64)

    @property
    def neighbors(self) -> list[list[tuple[int, np.ndarray]]]:
        out: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(self.n_atoms)]
        for i in range(self.n_pairs):
            out[int(self.pair_src[i])].append((int(self.pair_dst[i]), self.pair_feats[i]))
        return out


def build_graph(
    molecule: MoleculeRecord,
    rings: RingInfo | None = None,
    spatial_cutoff: float | None = None,
) -> MolGraph:
    """Featurize one molecule.

    Neighbors are the bonded pairs; with a spatial cutoff, unbonded pairs
    within that distance are added with bond category "none".
    """
    if rings is None:
        rings = perceive_rings(molecule)
    n = molecule.n_atoms
    feats = np.stack([atom_features(molecule, rings, i) for i in range(n)]) if n else \
        np.zeros((0, ATOM_FEATURE_WIDTH))

    positions = np.asarray([a.position for a in molecule.atoms])
    bond_order = {(min(b.a, b.b), max(b.a, b.b)): b.order for b in molecule.bonds}
    pairs = set(bond_order)
    if spatial_cutoff is not None:
        diffs = positions[:, None, :] - positions[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        close = np.argwhere((dist <= spatial_cutoff) & np.triu(np.ones((n, n), bool), 1))
        pairs.update((int(i), int(j)) for i, j in close)

    rows: list[tuple[int, int]] = []
    pair_vecs: dict[tuple[int, int], np.ndarray] = {}
    for i, j in pairs:
        vec = np.zeros(PAIR_FEATURE_WIDTH)
        vec[_bond_category(bond_order.get((i, j)))] = 1.0
        vec[3] = float(np.linalg.norm(positions[i] - positions[j]))
        vec[4] = 1.0 if rings.same_ring(i, j) else 0.0
        pair_vecs[(i, j)] = vec
        rows.append((i, j))
        rows.append((j, i))
    rows.sort()

    pair_src = np.asarray([r[0] for r in rows], dtype=np.int64)
    pair_dst = np.asarray([r[1] for r in rows], dtype=np.int64)
    pair_feats = (
        np.stack([pair_vecs[(min(a, b), max(a, b))] for a, b in rows])
        if rows else np.zeros((0, PAIR_FEATURE_WIDTH))
    )

    graph = MolGraph(molecule.id, feats, pair_src, pair_dst, pair_feats)
    if n > 1:
        isolated = int((graph.segment_lengths == 0).sum())
        if isolated:
            warnings.warn(
                f"molecule {molecule.id!r}: {isolated} atom(s) have no neighbors; "
                "their reduction inputs are empty", FeaturizeWarning, stacklevel=2)
    return graph


def featurize_records(
    records: list[MoleculeRecord], spatial_cutoff: float | None = None,
) -> tuple[list[MolGraph], dict]:
    """Featurize a dataset; returns graphs plus a summary for reporting."""
    graphs: list[MolGraph] = []
    isolated_atoms = 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FeaturizeWarning)
        for rec in records:
            graphs.append(build_graph(rec, spatial_cutoff=spatial_cutoff))
        isolated_atoms = sum(1 for w in caught if issubclass(w.category, FeaturizeWarning))
    summary = {
        "molecules": len(graphs),
        "atoms": int(sum(g.n_atoms for g in graphs)),
        "pairs": int(sum(g.n_pairs for g in graphs)),
        "molecules_with_isolated_atoms": isolated_atoms,
        "spatial_cutoff": spatial_cutoff,
        "radii_version": RADII_VERSION,
    }
    return graphs, summary


# --- binary feature cache ---------------------------------------------------

def write_feature_cache(path: str | Path, graphs: list[MolGraph], meta: dict) -> None:
    """Versioned binary cache: header JSON, then length-prefixed blocks."""
    header = dict(meta)
    header["count"] = len(graphs)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FEATURE_CACHE_MAGIC)
        fh.write(struct.pack("<II", FEATURE_CACHE_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for g in graphs:
            ident = g.mol_id.encode()
            payload = b"".join([
                struct.pack("<I", len(ident)), ident,
                struct.pack("<QQ", g.n_atoms, g.n_pairs),
                np.ascontiguousarray(g.atom_feats, dtype="<f8").tobytes(),
                np.ascontiguousarray(g.pair_src, dtype="<i8").tobytes(),
                np.ascontiguousarray(g.pair_dst, dtype="<i8").tobytes(),
                np.ascontiguousarray(g.pair_feats, dtype="<f8").tobytes(),
            ])
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_feature_cache(path: str | Path) -> tuple[list[MolGraph], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURE_CACHE_MAGIC:
            raise ValueError(f"{path}: not a feature cache")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != FEATURE_CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        meta = json.loads(fh.read(header_len))
        graphs: list[MolGraph] = []
        for _ in range(meta["count"]):
            (block_len,) = struct.unpack("<Q", fh.read(8))
            block = fh.read(block_len)
            off = 0
            (id_len,) = struct.unpack_from("<I", block, off); off += 4
            ident = block[off:off + id_len].decode(); off += id_len
            n_atoms, n_pairs = struct.unpack_from("<QQ", block, off); off += 16
            atom = np.frombuffer(block, "<f8", n_atoms * ATOM_FEATURE_WIDTH, off)
            off += atom.nbytes
            src = np.frombuffer(block, "<i8", n_pairs, off); off += src.nbytes
            dst = np.frombuffer(block, "<i8", n_pairs, off); off += dst.nbytes
            pair = np.frombuffer(block, "<f8", n_pairs * PAIR_FEATURE_WIDTH, off)
            graphs.append(MolGraph(
                ident,
                atom.reshape(n_atoms, ATOM_FEATURE_WIDTH).copy(),
                src.copy(), dst.copy(),
                pair.reshape(n_pairs, PAIR_FEATURE_WIDTH).copy(),
            ))
    return graphs, meta

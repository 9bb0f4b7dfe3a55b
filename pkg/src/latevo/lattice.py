"""Lattice / unit-cell data model, file formats, scaffold parsing, and synthetic families.

Node coordinates are fractional cell coordinates (typically in [0, 1], values
slightly outside are allowed so boundary nodes stay exact); the lattice vector
matrix L maps them to Cartesian space.
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from itertools import product

import numpy as np

PROPERTY_NAMES = ("young", "shear", "poisson")

MERGE_TOL = 1e-9  # duplicate-point merge tolerance in tile()


class LatticeError(ValueError):
    """Raised on malformed or inconsistent lattice data."""


def _canonical_edges(edges, n_nodes: int) -> tuple[tuple[int, int], ...]:
    out = set()
    for e in edges:
        if len(e) != 2:
            raise LatticeError(f"edge {e!r} is not a pair")
        i, j = int(e[0]), int(e[1])
        if i == j:
            raise LatticeError(f"self-loop edge ({i}, {j})")
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise LatticeError(f"edge ({i}, {j}) out of range for {n_nodes} nodes")
        out.add((min(i, j), max(i, j)))
    return tuple(sorted(out))


@dataclass(frozen=True)
class UnitCell:
    """Node coordinates (N, 3) plus an undirected edge set (stored i < j, sorted)."""

    nodes: np.ndarray
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 3 or nodes.shape[0] < 1:
            raise LatticeError(f"nodes must be (N>=1, 3), got {nodes.shape}")
        if not np.all(np.isfinite(nodes)):
            raise LatticeError("non-finite node coordinates")
        nodes = nodes.copy()
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", _canonical_edges(self.edges, nodes.shape[0]))

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg


@dataclass(frozen=True)
class Lattice:
    """A metamaterial: lattice vectors (rows), a unit cell, optional properties."""

    vectors: np.ndarray
    cell: UnitCell
    properties: np.ndarray | None = None
    name: str | None = None

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=float)
        if vec.shape != (3, 3):
            raise LatticeError(f"lattice vectors must be 3x3, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise LatticeError("non-finite lattice vectors")
        if abs(np.linalg.det(vec)) <= 1e-9:
            raise LatticeError("singular lattice vector matrix")
        vec = vec.copy()
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        if self.properties is not None:
            props = np.asarray(self.properties, dtype=float)
            if props.ndim != 1 or not np.all(np.isfinite(props)):
                raise LatticeError("properties must be a finite 1-D vector")
            props = props.copy()
            props.setflags(write=False)
            object.__setattr__(self, "properties", props)


def parse_lattice(data: bytes | str) -> Lattice:
    """Parse the lattice JSON schema into a validated Lattice."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise LatticeError(f"malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise LatticeError("top-level JSON value must be an object")
    for key in ("lattice_vectors", "nodes", "edges"):
        if key not in obj:
            raise LatticeError(f"missing required key {key!r}")
    cell = UnitCell(np.asarray(obj["nodes"], dtype=float), [tuple(e) for e in obj["edges"]])
    props = None
    if obj.get("properties") is not None:
        p = obj["properties"]
        if not isinstance(p, dict):
            raise LatticeError("properties must be an object")
        missing = [k for k in PROPERTY_NAMES if k not in p]
        if missing:
            raise LatticeError(f"properties missing keys {missing}")
        props = np.array([float(p[k]) for k in PROPERTY_NAMES])
    return Lattice(
        vectors=np.asarray(obj["lattice_vectors"], dtype=float),
        cell=cell,
        properties=props,
        name=obj.get("name"),
    )


def lattice_to_dict(lat: Lattice) -> dict:
    out = {
        "lattice_vectors": [[float(x) for x in row] for row in lat.vectors],
        "nodes": [[float(x) for x in p] for p in lat.cell.nodes],
        "edges": [[i, j] for i, j in lat.cell.edges],
    }
    if lat.name is not None:
        out["name"] = lat.name
    if lat.properties is not None:
        out["properties"] = {k: float(v) for k, v in zip(PROPERTY_NAMES, lat.properties)}
    return out


def serialize_lattice(lat: Lattice) -> bytes:
    """Canonical JSON bytes: sorted keys, edges sorted with i < j."""
    return json.dumps(lattice_to_dict(lat), sort_keys=True).encode("utf-8")


_TUPLE3_RE = re.compile(
    r"^\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\)\s*(#.*)?$"
)
_TUPLE2_RE = re.compile(r"^\(\s*(\d+)\s*,\s*(\d+)\s*\)\s*(#.*)?$")


def parse_scaffold_text(text: str) -> UnitCell:
    """Parse the plain-text scaffold format.

    Expected layout: a "Node number: N" line, a coordinates header
    ("coordinates:" or "Node coordinates (fractional):"), N "(x, y, z)" lines
    (each optionally trailed by a "#" comment), an "Edges:" line, then
    "(i, j)" lines.
    """
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    n_declared = None
    idx = 0
    for idx, ln in enumerate(lines):
        m = re.match(r"^Node number\s*:\s*(\d+)\s*$", ln, flags=re.IGNORECASE)
        if m:
            n_declared = int(m.group(1))
            break
    if n_declared is None:
        raise LatticeError("missing 'Node number: N' line")

    rest = lines[idx + 1:]
    if not rest or "coordinates" not in rest[0].lower():
        raise LatticeError("missing coordinates header")
    rest = rest[1:]

    coords: list[list[float]] = []
    pos = 0
    for pos, ln in enumerate(rest):
        if ln.lower().startswith("edges"):
            break
        m = _TUPLE3_RE.match(ln)
        if not m:
            raise LatticeError(f"unparseable coordinate line: {ln!r}")
        coords.append([float(m.group(k)) for k in (1, 2, 3)])
    else:
        pos += 1
    if len(coords) != n_declared:
        raise LatticeError(
            f"node count mismatch: declared {n_declared}, found {len(coords)} coordinates"
        )

    edge_lines = rest[pos + 1:] if pos < len(rest) else []
    edges = []
    for ln in edge_lines:
        m = _TUPLE2_RE.match(ln)
        if not m:
            raise LatticeError(f"unparseable edge line: {ln!r}")
        edges.append((int(m.group(1)), int(m.group(2))))
    return UnitCell(np.asarray(coords), edges)


def scaffold_text(cell: UnitCell) -> str:
    """Emit a UnitCell in the scaffold text format."""
    lines = [f"Node number: {cell.n_nodes}", "coordinates:"]
    lines += [f"({p[0]:g}, {p[1]:g}, {p[2]:g})" for p in cell.nodes]
    lines.append("Edges:")
    lines += [f"({i}, {j})" for i, j in cell.edges]
    return "\n".join(lines)


def validate_cell(cell: UnitCell, max_nodes: int = 100) -> list[str]:
    """Report dangling nodes (degree < 2) and oversized cells. Report-only."""
    violations = []
    deg = cell.degrees()
    for i in np.flatnonzero(deg < 2):
        violations.append(f"dangling node {int(i)} (degree {int(deg[i])})")
    if cell.n_nodes > max_nodes:
        violations.append(f"node count {cell.n_nodes} exceeds {max_nodes}")
    return violations


_CORNERS = [(x, y, z) for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]
_CUBE_EDGES = [
    (a, b)
    for a in range(8)
    for b in range(a + 1, 8)
    if sum(u != v for u, v in zip(_CORNERS[a], _CORNERS[b])) == 1
]
_FACE_CENTERS = [
    (0.5, 0.5, 0.0), (0.5, 0.5, 1.0),
    (0.5, 0.0, 0.5), (0.5, 1.0, 0.5),
    (0.0, 0.5, 0.5), (1.0, 0.5, 0.5),
]


def _family_geometry(family: str):
    if family == "cubic":
        return np.array(_CORNERS), list(_CUBE_EDGES)
    if family == "bcc":
        nodes = np.array(_CORNERS + [(0.5, 0.5, 0.5)])
        # corner frame keeps every corner at degree >= 2 alongside the spokes
        edges = list(_CUBE_EDGES) + [(i, 8) for i in range(8)]
        return nodes, edges
    if family in ("fcc", "octet"):
        nodes = np.array(_CORNERS + _FACE_CENTERS)
        edges = []
        for fi, fc in enumerate(_FACE_CENTERS):
            for ci, corner in enumerate(_CORNERS):
                if sum(abs(a - b) for a, b in zip(fc, corner)) <= 1.0 + 1e-12:
                    edges.append((ci, 8 + fi))
        if family == "octet":
            for a in range(6):
                for b in range(a + 1, 6):
                    fa, fb = np.array(_FACE_CENTERS[a]), np.array(_FACE_CENTERS[b])
                    if abs(np.linalg.norm(fa - fb) - np.sqrt(0.5)) < 1e-9:
                        edges.append((8 + a, 8 + b))
        return nodes, edges
    raise LatticeError(f"unknown family {family!r}")


FAMILIES = ("cubic", "bcc", "fcc", "octet")


def proxy_properties(cell: UnitCell) -> np.ndarray:
    """Synthetic property labels: deterministic analytic stand-ins, not physics.

    y = (mean coordination / 8, edge-density ratio, signed anisotropy in [-1, 1]).
    """
    deg = cell.degrees()
    n = cell.n_nodes
    coord = float(deg.mean()) / 8.0
    max_edges = n * (n - 1) / 2.0
    density = len(cell.edges) / max_edges if max_edges > 0 else 0.0
    if cell.edges:
        vecs = np.array([cell.nodes[j] - cell.nodes[i] for i, j in cell.edges])
        norms = np.linalg.norm(vecs, axis=1)
        good = norms > 1e-12
        if good.any():
            unit = vecs[good] / norms[good, None]
            mz = float(np.mean(unit[:, 2] ** 2))
            aniso = float(np.clip((3.0 * mz - 1.0) / 2.0, -1.0, 1.0))
        else:
            aniso = 0.0
    else:
        aniso = 0.0
    return np.array([coord, density, aniso])


def synth_family(family: str, jitter: float, seed: int) -> Lattice:
    """Deterministic synthetic lattice: canonical family geometry + uniform jitter."""
    if family not in FAMILIES:
        raise LatticeError(f"unknown family {family!r}")
    if jitter < 0:
        raise LatticeError("jitter must be >= 0")
    nodes, edges = _family_geometry(family)
    rng = np.random.default_rng([int(seed) & (2**63 - 1), zlib.crc32(family.encode())])
    nodes = nodes + rng.uniform(-jitter, jitter, size=nodes.shape)
    cell = UnitCell(nodes, edges)
    return Lattice(
        vectors=np.eye(3),
        cell=cell,
        properties=proxy_properties(cell),
        name=f"{family}-j{jitter:g}-s{seed}",
    )


@dataclass(frozen=True)
class TiledCloud:
    """Cartesian point-and-edge cloud produced by tiling a lattice."""

    points: np.ndarray
    edges: tuple[tuple[int, int], ...]


def tile(lat: Lattice, reps: tuple[int, int, int]) -> TiledCloud:
    """Replicate the unit cell over integer lattice offsets, merging duplicates."""
    r1, r2, r3 = (int(r) for r in reps)
    if min(r1, r2, r3) < 1:
        raise LatticeError("reps must all be >= 1")
    frac = lat.cell.nodes
    index_of: dict[tuple[int, int, int], int] = {}
    points: list[np.ndarray] = []
    edges = set()
    for a, b, c in product(range(r1), range(r2), range(r3)):
        cart = (frac + np.array([a, b, c], dtype=float)) @ lat.vectors
        local = []
        for p in cart:
            key = tuple(int(round(x / MERGE_TOL)) for x in p)
            if key not in index_of:
                index_of[key] = len(points)
                points.append(p)
            local.append(index_of[key])
        for i, j in lat.cell.edges:
            u, v = local[i], local[j]
            if u != v:
                edges.add((min(u, v), max(u, v)))
    return TiledCloud(np.array(points), tuple(sorted(edges)))

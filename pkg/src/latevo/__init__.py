"""Symbolic latent evolution toolkit for truss-lattice metamaterials."""

__version__ = "0.1.0"

from .gaussian import DiagGaussian, LatentState, intersect, kl_diag, mix, negate
from .lattice import (
    Lattice,
    UnitCell,
    parse_lattice,
    parse_scaffold_text,
    serialize_lattice,
    synth_family,
    tile,
    validate_cell,
)
from .transport import SinkhornConfig, TransportPlan, sinkhorn_log

__all__ = [
    "DiagGaussian",
    "LatentState",
    "Lattice",
    "SinkhornConfig",
    "TransportPlan",
    "UnitCell",
    "intersect",
    "kl_diag",
    "mix",
    "negate",
    "parse_lattice",
    "parse_scaffold_text",
    "serialize_lattice",
    "sinkhorn_log",
    "synth_family",
    "tile",
    "validate_cell",
]

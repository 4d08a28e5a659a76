"""Parameter layouts, shared/unit-specific structure, and scale transforms.

A model over U coupled units distinguishes parameters shared by all units
from parameters specific to a single unit.  Internally every parameter is
carried as a U x D matrix of per-unit values: a shared parameter is simply
a column that starts out constant across rows (and is allowed to diverge
during a perturbed search).  Estimation operates on a transformed scale
(log / logit / identity, chosen per entry) where Gaussian perturbations
are well defined.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

__all__ = [
    "ParamSpec",
    "ParameterLayout",
    "ParameterMatrix",
    "BlockPartition",
    "expand_shared",
    "collapse",
    "to_estimation_scale",
    "from_estimation_scale",
    "theta_to_estimation",
    "theta_from_estimation",
    "make_block_partition",
    "save_params",
    "load_params",
    "params_to_doc",
    "params_from_doc",
]

KINDS = ("shared", "unit_specific")
TRANSFORMS = ("log", "logit", "identity")


@dataclass(frozen=True)
class ParamSpec:
    """One named parameter: its sharing kind, scale transform, and IVP flag.

    Initial-value parameters (ivp=True) determine only the latent state at
    the time origin and are perturbed only at the start of a filtering pass.
    """

    name: str
    kind: str = "shared"
    transform: str = "identity"
    ivp: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r} for parameter {self.name!r}")
        if self.transform not in TRANSFORMS:
            raise ValueError(
                f"unknown transform {self.transform!r} for parameter {self.name!r}"
            )


class ParameterLayout:
    """Ordered parameter entries plus the unit count.

    Defines the D matrix columns and the packing of the flat vector
    (shared entries first in layout order, then the unit-specific entries
    of unit 0, unit 1, ...).
    """

    def __init__(self, entries, n_units: int):
        entries = tuple(
            e if isinstance(e, ParamSpec) else ParamSpec(**e) for e in entries
        )
        if n_units < 1:
            raise ValueError("n_units must be >= 1")
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.entries = entries
        self.n_units = int(n_units)
        self._index = {e.name: d for d, e in enumerate(entries)}
        self.shared_cols = np.array(
            [d for d, e in enumerate(entries) if e.kind == "shared"], dtype=int
        )
        self.unit_cols = np.array(
            [d for d, e in enumerate(entries) if e.kind == "unit_specific"], dtype=int
        )
        self._log_mask = np.array([e.transform == "log" for e in entries])
        self._logit_mask = np.array([e.transform == "logit" for e in entries])
        self.ivp_mask = np.array([e.ivp for e in entries])

    @property
    def n_params(self) -> int:
        """Number of entries D (matrix columns)."""
        return len(self.entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    @property
    def flat_dim(self) -> int:
        return len(self.shared_cols) + self.n_units * len(self.unit_cols)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        """Column index of a named entry."""
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r} in layout") from None

    def flat_names(self) -> list[str]:
        """Names of the flat-vector coordinates, unit-specific ones suffixed [u]."""
        out = [self.entries[d].name for d in self.shared_cols]
        for u in range(self.n_units):
            out.extend(f"{self.entries[d].name}[{u}]" for d in self.unit_cols)
        return out

    def __repr__(self):
        return (
            f"ParameterLayout({len(self.shared_cols)} shared, "
            f"{len(self.unit_cols)} unit-specific, n_units={self.n_units})"
        )


def _check_domains(values: np.ndarray, layout: ParameterLayout) -> None:
    for d in np.nonzero(layout._log_mask)[0]:
        if np.any(values[..., d] <= 0):
            raise ValueError(
                f"log-transformed parameter {layout.entries[d].name!r} must be > 0"
            )
    for d in np.nonzero(layout._logit_mask)[0]:
        col = values[..., d]
        if np.any((col <= 0) | (col >= 1)):
            raise ValueError(
                f"logit-transformed parameter {layout.entries[d].name!r} "
                "must lie in (0, 1)"
            )


class ParameterMatrix:
    """U x D natural-scale per-unit parameter values tied to a layout."""

    def __init__(self, values, layout: ParameterLayout):
        values = np.asarray(values, dtype=float)
        if values.shape != (layout.n_units, layout.n_params):
            raise ValueError(
                f"values shape {values.shape} does not match layout "
                f"({layout.n_units}, {layout.n_params})"
            )
        _check_domains(values, layout)
        self.values = values
        self.layout = layout

    def copy(self) -> "ParameterMatrix":
        return ParameterMatrix(self.values.copy(), self.layout)

    def column(self, name: str) -> np.ndarray:
        """Per-unit values of one named parameter, shape (U,)."""
        return self.values[:, self.layout.index(name)]

    def to_estimation(self) -> np.ndarray:
        return to_estimation_scale(self.values, self.layout)

    def __repr__(self):
        return f"ParameterMatrix(shape={self.values.shape})"


def to_estimation_scale(values: np.ndarray, layout: ParameterLayout) -> np.ndarray:
    """Map natural-scale values (..., D) onto the estimation scale.

    Raises ValueError if any value lies outside its transform's domain.
    """
    values = np.asarray(values, dtype=float)
    _check_domains(values, layout)
    est = values.copy()
    if layout._log_mask.any():
        est[..., layout._log_mask] = np.log(values[..., layout._log_mask])
    if layout._logit_mask.any():
        est[..., layout._logit_mask] = logit(values[..., layout._logit_mask])
    return est


def from_estimation_scale(est: np.ndarray, layout: ParameterLayout) -> np.ndarray:
    """Inverse of :func:`to_estimation_scale`; any real input is valid."""
    est = np.asarray(est, dtype=float)
    values = est.copy()
    if layout._log_mask.any():
        values[..., layout._log_mask] = np.exp(est[..., layout._log_mask])
    if layout._logit_mask.any():
        values[..., layout._logit_mask] = expit(est[..., layout._logit_mask])
    return values


def expand_shared(theta, layout: ParameterLayout) -> ParameterMatrix:
    """Unpack a flat vector (shared, then per-unit blocks) into a U x D matrix.

    Shared entries are replicated identically across all U rows.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != layout.flat_dim:
        raise ValueError(
            f"theta has {theta.size} entries; layout expects {layout.flat_dim} "
            f"({len(layout.shared_cols)} shared + {layout.n_units} x "
            f"{len(layout.unit_cols)} unit-specific)"
        )
    U = layout.n_units
    values = np.empty((U, layout.n_params))
    n_sh = len(layout.shared_cols)
    if n_sh:
        values[:, layout.shared_cols] = theta[:n_sh]
    if len(layout.unit_cols):
        values[:, layout.unit_cols] = theta[n_sh:].reshape(U, len(layout.unit_cols))
    return ParameterMatrix(values, layout)


def collapse(pm: ParameterMatrix) -> np.ndarray:
    """Flatten a matrix back to a vector.

    Unit-specific entries are copied row by row.  A shared entry whose
    per-unit copies have diverged is summarized by the across-unit mean on
    the estimation scale, back-transformed; a still-constant column is
    passed through untouched so expand/collapse round-trips exactly.
    """
    layout = pm.layout
    vals = pm.values
    shared = np.empty(len(layout.shared_cols))
    for k, d in enumerate(layout.shared_cols):
        col = vals[:, d]
        if np.all(col == col[0]):
            shared[k] = col[0]
        else:
            transform = layout.entries[d].transform
            if transform == "log":
                shared[k] = np.exp(np.log(col).mean())
            elif transform == "logit":
                shared[k] = expit(logit(col).mean())
            else:
                shared[k] = col.mean()
    unit_part = vals[:, layout.unit_cols].ravel()
    return np.concatenate([shared, unit_part])


def theta_to_estimation(theta, layout: ParameterLayout) -> np.ndarray:
    """Flat vector mapped coordinate-wise onto the estimation scale."""
    pm = expand_shared(theta, layout)
    est = to_estimation_scale(pm.values, layout)
    return np.concatenate(
        [est[0, layout.shared_cols], est[:, layout.unit_cols].ravel()]
    )


def theta_from_estimation(est_flat, layout: ParameterLayout) -> np.ndarray:
    """Inverse of :func:`theta_to_estimation`."""
    est_flat = np.asarray(est_flat, dtype=float).ravel()
    if est_flat.size != layout.flat_dim:
        raise ValueError("estimation-scale vector has the wrong dimension")
    U = layout.n_units
    m = np.empty((U, layout.n_params))
    n_sh = len(layout.shared_cols)
    if n_sh:
        m[:, layout.shared_cols] = est_flat[:n_sh]
    if len(layout.unit_cols):
        m[:, layout.unit_cols] = est_flat[n_sh:].reshape(U, len(layout.unit_cols))
    return collapse(ParameterMatrix(from_estimation_scale(m, layout), layout))


@dataclass(frozen=True)
class BlockPartition:
    """An ordered partition of the units 0..U-1 into resampling blocks."""

    blocks: tuple[tuple[int, ...], ...]
    n_units: int

    def __post_init__(self):
        seen = sorted(u for b in self.blocks for u in b)
        if seen != list(range(self.n_units)):
            raise ValueError(
                f"blocks {self.blocks} do not partition units 0..{self.n_units - 1}"
            )

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)


def make_block_partition(
    n_units: int, block_size: int | None = None, blocks=None
) -> BlockPartition:
    """Build a partition of the units; singleton blocks by default.

    ``block_size`` groups consecutive units; an explicit ``blocks`` iterable
    of index groups is canonicalized (sorted within blocks, blocks ordered
    by first member) and validated as a partition.
    """
    if blocks is not None:
        canon = tuple(tuple(sorted(int(u) for u in b)) for b in blocks)
        canon = tuple(sorted(canon, key=lambda b: b[0]))
        return BlockPartition(canon, n_units)
    if block_size is None:
        block_size = 1
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    groups = [
        tuple(range(lo, min(lo + block_size, n_units)))
        for lo in range(0, n_units, block_size)
    ]
    return BlockPartition(tuple(groups), n_units)


# ---------------------------------------------------------------------------
# Parameter document (JSON) round trip.  Field names are a file contract:
# name, kind, transform, ivp, and value (scalar) or values (one per unit).


def params_to_doc(pm: ParameterMatrix) -> dict:
    layout = pm.layout
    entries = []
    for d, spec in enumerate(layout.entries):
        rec = {
            "name": spec.name,
            "kind": spec.kind,
            "transform": spec.transform,
            "ivp": spec.ivp,
        }
        col = pm.values[:, d]
        if spec.kind == "shared" and np.all(col == col[0]):
            rec["value"] = float(col[0])
        else:
            rec["values"] = [float(v) for v in col]
        entries.append(rec)
    return {"n_units": layout.n_units, "params": entries}


def params_from_doc(doc: dict) -> ParameterMatrix:
    U = int(doc["n_units"])
    specs, cols = [], []
    for rec in doc["params"]:
        specs.append(
            ParamSpec(
                name=rec["name"],
                kind=rec["kind"],
                transform=rec["transform"],
                ivp=bool(rec.get("ivp", False)),
            )
        )
        if "values" in rec:
            col = np.asarray(rec["values"], dtype=float)
            if col.shape != (U,):
                raise ValueError(
                    f"parameter {rec['name']!r} has {col.size} values; expected {U}"
                )
        else:
            col = np.full(U, float(rec["value"]))
        cols.append(col)
    layout = ParameterLayout(specs, U)
    return ParameterMatrix(np.column_stack(cols), layout)


def save_params(path, pm: ParameterMatrix) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_doc(pm), fh, indent=2)
        fh.write("\n")


def load_params(path) -> ParameterMatrix:
    with open(path) as fh:
        return params_from_doc(json.load(fh))

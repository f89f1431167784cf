"""Problem instances: regime generator, coefficients, control cone.

Regimes are indexed from 0. Coefficients are piecewise constant in time on a
breakpoint grid ``0 = t_0 < t_1 < ... < t_{K-1}``; segment ``k`` covers
``[t_k, t_{k+1})`` and the last segment is held on ``[t_{K-1}, inf)``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    InputOutputError,
    NegativeOffDiagonal,
    RowSumNonzero,
    StabilityViolated,
    ValidationError,
)

EIG_TOL = 1e-10
ROW_SUM_TOL = 1e-12


class Case(str, enum.Enum):
    STANDARD = "standard"
    SINGULAR = "singular"
    UNSUPPORTED = "unsupported"


@dataclass(frozen=True)
class RegimeGenerator:
    """Transition-rate matrix of the regime chain."""

    q: np.ndarray

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValidationError(f"generator must be square, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise ValidationError("generator has non-finite entries")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def ell(self) -> int:
        return self.q.shape[0]

    @classmethod
    def single(cls) -> RegimeGenerator:
        return cls(np.zeros((1, 1)))


def validate_generator(gen: RegimeGenerator) -> None:
    q = gen.q
    for i in range(gen.ell):
        for j in range(gen.ell):
            if i != j and q[i, j] < 0:
                raise NegativeOffDiagonal(i, j, q[i, j])
        total = q[i].sum()
        if abs(total) > ROW_SUM_TOL * max(1.0, np.abs(q[i]).max()):
            raise RowSumNonzero(i, total)


class ConeVariant(str, enum.Enum):
    FULL = "FullSpace"
    ORTHANT = "NonnegativeOrthant"
    GENERATED = "Generated"


@dataclass(frozen=True)
class ConstraintCone:
    """Closed convex cone in R^m.

    ``generators`` (m x k, columns are generators) is only used by the
    ``Generated`` variant.  An empty generator matrix encodes the cone {0}.
    """

    variant: ConeVariant
    m: int
    generators: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", ConeVariant(self.variant))
        if self.m < 1:
            raise ValidationError("cone dimension must be >= 1")
        if self.variant is ConeVariant.GENERATED:
            g = np.asarray(self.generators, dtype=float).reshape(self.m, -1)
            if not np.all(np.isfinite(g)):
                raise ValidationError("cone generators must be finite")
            if g.shape[1] and np.min(np.linalg.norm(g, axis=0)) == 0.0:
                raise ValidationError("cone generators must be nonzero")
            g.setflags(write=False)
            object.__setattr__(self, "generators", g)
        else:
            object.__setattr__(self, "generators", None)

    @classmethod
    def full(cls, m: int) -> ConstraintCone:
        return cls(ConeVariant.FULL, m)

    @classmethod
    def orthant(cls, m: int) -> ConstraintCone:
        return cls(ConeVariant.ORTHANT, m)

    @classmethod
    def generated(cls, generators) -> ConstraintCone:
        g = np.asarray(generators, dtype=float)
        if g.ndim == 1:
            g = g[:, None]
        return cls(ConeVariant.GENERATED, g.shape[0], g)

    @classmethod
    def zero(cls, m: int) -> ConstraintCone:
        return cls(ConeVariant.GENERATED, m, np.zeros((m, 0)))

    def generator_matrix(self) -> np.ndarray | None:
        """Generators as columns; ``None`` for the full space."""
        if self.variant is ConeVariant.FULL:
            return None
        if self.variant is ConeVariant.ORTHANT:
            return np.eye(self.m)
        return self.generators

    def negated(self) -> ConstraintCone:
        if self.variant is ConeVariant.FULL:
            return self
        return ConstraintCone.generated(-self.generator_matrix())

    def to_dict(self) -> dict:
        out = {"variant": self.variant.value}
        if self.variant is ConeVariant.GENERATED:
            out["generators"] = self.generators.tolist()
            out["m"] = self.m
        return out


class Coefficients(NamedTuple):
    """Coefficient values at one (t, regime) cell."""

    A: float
    B: np.ndarray   # (m,)
    C: np.ndarray   # (n,)
    D: np.ndarray   # (n, m)
    Qw: float
    R: np.ndarray   # (m, m)


def _frozen(a, shape, name):
    arr = np.array(a, dtype=float)
    try:
        arr = arr.reshape(shape)
    except ValueError:
        raise ValidationError(f"{name} has shape {np.shape(a)}, expected {shape}") from None
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CoefficientSet:
    """Per-segment, per-regime coefficient arrays (segment axis first)."""

    breakpoints: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float).ravel()
        if bp.size == 0 or bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise ValidationError("breakpoints must start at 0 and be strictly increasing")
        bp.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        K = bp.size
        B = np.asarray(self.B, dtype=float)
        D = np.asarray(self.D, dtype=float)
        if B.ndim != 3 or D.ndim != 4:
            raise ValidationError("B must be (K, ell, m) and D must be (K, ell, n, m)")
        ell, m = B.shape[1], B.shape[2]
        n = D.shape[2]
        object.__setattr__(self, "A", _frozen(self.A, (K, ell), "A"))
        object.__setattr__(self, "B", _frozen(B, (K, ell, m), "B"))
        object.__setattr__(self, "C", _frozen(self.C, (K, ell, n), "C"))
        object.__setattr__(self, "D", _frozen(D, (K, ell, n, m), "D"))
        object.__setattr__(self, "Q", _frozen(self.Q, (K, ell), "Q"))
        object.__setattr__(self, "R", _frozen(self.R, (K, ell, m, m), "R"))
        asym = np.abs(self.R - np.swapaxes(self.R, -1, -2)).max(initial=0.0)
        if asym > 1e-12:
            raise ValidationError(f"R is not symmetric (max asymmetry {asym:.3g})")

    @property
    def n_segments(self) -> int:
        return self.breakpoints.size

    @property
    def ell(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[2]

    @property
    def n(self) -> int:
        return self.C.shape[2]

    def segment_index(self, t: float) -> int:
        """Right-continuous segment lookup, held beyond the last breakpoint."""
        return int(np.searchsorted(self.breakpoints, t, side="right") - 1)

    def at(self, seg: int, i: int) -> Coefficients:
        return Coefficients(float(self.A[seg, i]), self.B[seg, i], self.C[seg, i],
                            self.D[seg, i], float(self.Q[seg, i]), self.R[seg, i])

    @classmethod
    def constant(cls, A, B, C, D, Q, R, ell: int | None = None) -> CoefficientSet:
        """Time-constant coefficients on a single segment.

        Each argument is either one value shared by all regimes or carries a
        leading regime axis of length ``ell``.  Scalars are promoted, so
        ``B=1.0`` means the 1-vector ``[1.0]``.  ``ell`` defaults to the
        length of ``A`` (or ``Q``) when those are given per regime.
        """
        if ell is None:
            ell = max(np.size(A), np.size(Q))

        def per_regime(x, base_ndim):
            x = np.asarray(x, dtype=float)
            if x.ndim == base_ndim + 1 and x.shape[0] == ell:
                return x
            while x.ndim < base_ndim:
                x = x[None]
            return np.broadcast_to(x, (ell,) + x.shape)

        return cls(np.array([0.0]), per_regime(A, 0)[None], per_regime(B, 1)[None],
                   per_regime(C, 1)[None], per_regime(D, 2)[None], per_regime(Q, 0)[None],
                   per_regime(R, 2)[None])


@dataclass(frozen=True)
class ProblemSpec:
    coeffs: CoefficientSet
    gen: RegimeGenerator
    cone: ConstraintCone
    x0: float = 1.0
    i0: int = 0

    def __post_init__(self):
        if self.coeffs.ell != self.gen.ell:
            raise ValidationError(
                f"coefficients have {self.coeffs.ell} regimes, generator has {self.gen.ell}")
        if self.cone.m != self.coeffs.m:
            raise ValidationError(f"cone dimension {self.cone.m} != control dimension {self.coeffs.m}")
        if not 0 <= self.i0 < self.gen.ell:
            raise ValidationError(f"initial regime {self.i0} out of range")
        if not np.isfinite(self.x0):
            raise ValidationError("initial state must be finite")

    @property
    def ell(self) -> int:
        return self.gen.ell

    @property
    def m(self) -> int:
        return self.coeffs.m

    @property
    def n(self) -> int:
        return self.coeffs.n

    def replace(self, **changes) -> ProblemSpec:
        fields = dict(coeffs=self.coeffs, gen=self.gen, cone=self.cone, x0=self.x0, i0=self.i0)
        fields.update(changes)
        return ProblemSpec(**fields)


@dataclass(frozen=True)
class AssumptionReport:
    rho: float
    case: Case
    delta: float
    c1: float
    p_upper: float

    def to_dict(self) -> dict:
        return {"rho": self.rho, "case": self.case.value, "delta": self.delta,
                "c1": self.c1, "p_upper": self.p_upper}


def coefficients_at(spec: ProblemSpec, t: float, i: int) -> Coefficients:
    return spec.coeffs.at(spec.coeffs.segment_index(t), i)


def check_assumptions(spec: ProblemSpec) -> AssumptionReport:
    """Stability margin, upper bound on the value and standard/singular case."""
    c = spec.coeffs
    drift = 2.0 * c.A + np.einsum("kin,kin->ki", c.C, c.C)
    rho = -float(drift.max())
    if not rho > 0:
        raise StabilityViolated(f"2A + C'C reaches {-rho:.6g}; needs to be <= -rho < 0", rho=rho)
    c1 = max(float(c.Q.max()), 0.0)
    q_min = float(c.Q.min())
    r_min = float(np.linalg.eigvalsh(c.R).min())
    dd = np.einsum("kinm,kinp->kimp", c.D, c.D)
    dd_min = float(np.linalg.eigvalsh(dd).min())

    if r_min > EIG_TOL and q_min >= -EIG_TOL:
        case, delta = Case.STANDARD, r_min
    elif r_min >= -EIG_TOL and dd_min > EIG_TOL and q_min > EIG_TOL:
        case, delta = Case.SINGULAR, min(dd_min, q_min)
    else:
        case, delta = Case.UNSUPPORTED, 0.0
    return AssumptionReport(rho=rho, case=case, delta=delta, c1=c1, p_upper=c1 / rho)


# -- JSON ingestion ----------------------------------------------------------

def cone_from_dict(d: dict, m: int) -> ConstraintCone:
    variant = str(d.get("variant", "FullSpace"))
    aliases = {"full": "FullSpace", "fullspace": "FullSpace", "orthant": "NonnegativeOrthant",
               "nonnegativeorthant": "NonnegativeOrthant", "generated": "Generated"}
    variant = aliases.get(variant.lower(), variant)
    if variant == "Generated":
        g = np.asarray(d.get("generators", []), dtype=float)
        return ConstraintCone(ConeVariant.GENERATED, m, g.reshape(m, -1))
    try:
        return ConstraintCone(ConeVariant(variant), m)
    except ValueError:
        raise ValidationError(f"unknown cone variant {variant!r}") from None


def problem_from_dict(d: dict) -> ProblemSpec:
    try:
        dims = d["dims"]
        m, n, ell = int(dims["m"]), int(dims["n"]), int(dims["ell"])
        bp = np.asarray(d.get("breakpoints", [0.0]), dtype=float)
        K = bp.size
        segs = d["coefficients"]
        if len(segs) != ell or any(len(s) != K for s in segs):
            raise ValidationError(f"coefficients must be {ell} regimes x {K} segments")
        arr = {key: [] for key in "ABCDQR"}
        for k in range(K):
            for key in arr:
                arr[key].append([segs[i][k][key] for i in range(ell)])
        coeffs = CoefficientSet(
            bp,
            np.asarray(arr["A"], dtype=float).reshape(K, ell),
            np.asarray(arr["B"], dtype=float).reshape(K, ell, m),
            np.asarray(arr["C"], dtype=float).reshape(K, ell, n),
            np.asarray(arr["D"], dtype=float).reshape(K, ell, n, m),
            np.asarray(arr["Q"], dtype=float).reshape(K, ell),
            np.asarray(arr["R"], dtype=float).reshape(K, ell, m, m),
        )
        gen = RegimeGenerator(np.asarray(d.get("generator", [[0.0]]), dtype=float).reshape(ell, ell))
        cone = cone_from_dict(d.get("cone", {}), m)
        init = d.get("initial", {})
        return ProblemSpec(coeffs, gen, cone, float(init.get("x", 1.0)), int(init.get("regime", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed problem spec: {exc!r}") from None


def problem_to_dict(spec: ProblemSpec) -> dict:
    c = spec.coeffs
    coefficients = [
        [{"A": float(c.A[k, i]), "B": c.B[k, i].tolist(), "C": c.C[k, i].tolist(),
          "D": c.D[k, i].tolist(), "Q": float(c.Q[k, i]), "R": c.R[k, i].tolist()}
         for k in range(c.n_segments)]
        for i in range(spec.ell)
    ]
    return {
        "dims": {"m": spec.m, "n": spec.n, "ell": spec.ell},
        "generator": spec.gen.q.tolist(),
        "breakpoints": c.breakpoints.tolist(),
        "coefficients": coefficients,
        "cone": spec.cone.to_dict(),
        "initial": {"x": spec.x0, "regime": spec.i0},
    }


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from None


def load_problem(path) -> ProblemSpec:
    spec = problem_from_dict(read_json(path))
    validate_generator(spec.gen)
    return spec

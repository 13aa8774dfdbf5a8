"""Collapse and capacity diagnostics for embedding matrices.

All statistics are computed from the eigenvalues of the autocorrelation
matrix ``A = Z^T Z / N``.  For unit-norm rows ``trace(A) = 1`` and the
eigenvalues form a probability vector.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from . import linalg

ENERGY = 0.99
TRACE_REJECT = 1e-3
NEG_REJECT = -1e-9


class SpectralError(ValueError):
    pass


@dataclass
class SpectralReport:
    eigenvalues: np.ndarray = field(repr=False)
    entropy: float
    effective_rank_99: int
    frobenius_to_identity: float
    nuclear_norm: float
    manifold_radius: float
    manifold_dim: float
    capacity_load: float
    capacity: float

    def scalars(self) -> dict:
        out = asdict(self)
        out.pop("eigenvalues")
        return out


def autocorrelation(z) -> np.ndarray:
    z = linalg.as_matrix(z, "embeddings")
    if z.shape[0] < 1:
        raise SpectralError("need at least one embedding")
    a = z.T @ z / z.shape[0]
    return (a + a.T) / 2.0


def _clean(eigenvalues) -> np.ndarray:
    w = np.asarray(eigenvalues, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise SpectralError("empty spectrum")
    if np.any(~np.isfinite(w)):
        raise SpectralError("spectrum contains NaN or Inf")
    if np.any(w < NEG_REJECT):
        raise SpectralError(f"spectrum has a negative eigenvalue {w.min():.3e}")
    w = linalg.clamp_eigenvalues(w)
    return np.maximum(w, 0.0)


def von_neumann_entropy(eigenvalues) -> float:
    """Shannon entropy (nats) of a trace-one spectrum, with 0 log 0 = 0."""
    w = _clean(eigenvalues)
    total = w.sum()
    if abs(total - 1.0) > TRACE_REJECT:
        raise SpectralError(f"eigenvalues sum to {total:.6g}; expected 1 (normalise the spectrum first)")
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz)))


def effective_rank_99(eigenvalues, energy: float = ENERGY) -> int:
    """Smallest count of leading eigenvalues holding ``energy`` of the total."""
    w = np.sort(_clean(eigenvalues))[::-1]
    total = w.sum()
    if total <= 0:
        raise SpectralError("all-zero spectrum has no effective rank")
    cum = np.cumsum(w)
    # relative slack absorbs summation round-off at exact thresholds
    return int(np.searchsorted(cum, energy * total * (1.0 - 1e-12)) + 1)


def frobenius_to_identity(a) -> float:
    """``||A - c I||_F^2`` with ``c = trace(A) / D``."""
    a = linalg.as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise SpectralError(f"need a square matrix, got {a.shape}")
    c = np.trace(a) / a.shape[0]
    diff = a - c * np.eye(a.shape[0])
    return float(np.sum(diff * diff))


def capacity_from_load(load: float) -> float:
    """Monotone decreasing map from ``R_M * sqrt(D_M)`` to a capacity score."""
    return 1.0 / (1.0 + load * load)


def manifold_stats(eigenvalues, point_count: int) -> tuple[float, float, float, float]:
    """Radius, dimensionality, load ``R_M sqrt(D_M)`` and capacity.

    The sums run over ``point_count`` eigenvalues: the spectrum is
    truncated or zero-padded to that length.
    """
    if point_count < 1:
        raise SpectralError("point_count must be positive")
    w = np.sort(_clean(eigenvalues))[::-1][:point_count]
    if w.sum() <= 0:
        raise SpectralError("all-zero spectrum")
    w = np.concatenate([w, np.zeros(point_count - w.size)])
    sq = float(np.sum(w * w))
    radius = math.sqrt(sq / point_count)
    dim = float(w.sum()) ** 2 / sq
    load = radius * math.sqrt(dim)
    return radius, dim, load, capacity_from_load(load)


def spectral_report(z) -> SpectralReport:
    z = linalg.as_matrix(z, "embeddings")
    a = autocorrelation(z)
    w, _ = linalg.sym_eig(a)
    w = np.maximum(linalg.clamp_eigenvalues(w), 0.0)
    total = w.sum()
    if total <= 0:
        raise SpectralError("embedding matrix is all zeros")
    probs = w / total
    radius, dim, load, cap = manifold_stats(w, z.shape[0])
    return SpectralReport(
        eigenvalues=w,
        entropy=von_neumann_entropy(probs),
        effective_rank_99=effective_rank_99(w),
        frobenius_to_identity=frobenius_to_identity(a),
        nuclear_norm=linalg.nuclear_norm(z),
        manifold_radius=radius,
        manifold_dim=dim,
        capacity_load=load,
        capacity=cap,
    )


def write_spectrum(report: SpectralReport, out_dir: str | Path, stem: str = "spectrum") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (index, eigenvalue) and ``<stem>.json`` (scalars)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "eigenvalue"])
        for i, lam in enumerate(report.eigenvalues):
            writer.writerow([i, repr(float(lam))])
    json_path.write_text(json.dumps(report.scalars(), indent=2, sort_keys=True))
    return csv_path, json_path


# theory checks

def mp_mean_sqrt(ratio: float) -> float:
    """Mean of sqrt(x) under the Marchenko-Pastur law with aspect ratio
    ``ratio`` in (0, 1] and unit variance.

    For P unit vectors drawn uniformly in D dimensions this is the
    large-size limit of ``||Z||_* / sqrt(P * min(P, D))``.
    """
    if not 0 < ratio <= 1:
        raise SpectralError("ratio must lie in (0, 1]")
    lo, hi = (1 - math.sqrt(ratio)) ** 2, (1 + math.sqrt(ratio)) ** 2

    def density(x):
        return math.sqrt(max((hi - x) * (x - lo), 0.0)) / (2 * math.pi * ratio * x)

    val, _ = integrate.quad(lambda x: math.sqrt(x) * density(x), lo, hi, limit=200)
    return val


@dataclass
class Claim:
    name: str
    passed: bool
    measured: dict
    diagnostic: bool = False


@dataclass
class TheoryReport:
    claims: list[Claim]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.claims if not c.diagnostic)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "claims": [asdict(c) for c in self.claims]}


UNIFORMITY_SLACK = 0.03


def verify_theory(z, views: int = 8) -> TheoryReport:
    """Check the entropy/rank bound, nuclear-norm bounds, the
    perfect-reconstruction centroid norm, and closeness to the
    uniform-sphere nuclear norm.  Never raises on valid numeric input;
    every claim carries the quantities it was judged on.
    """
    claims: list[Claim] = []
    z = linalg.as_matrix(z, "embeddings")
    n, d = z.shape
    row_norms = np.linalg.norm(z, axis=1)

    try:
        a = autocorrelation(z)
        w, _ = linalg.sym_eig(a)
        w = np.maximum(linalg.clamp_eigenvalues(w), 0.0)
        probs = w / w.sum()
        ent = von_neumann_entropy(probs)
        erank = effective_rank_99(probs)
        exact_rank = int(np.sum(probs > 1e-10))
        claims.append(Claim("entropy_rank_bound", math.log(erank) >= ent - 1e-9, {
            "entropy": ent, "effective_rank_99": erank, "log_effective_rank": math.log(erank),
            "numerical_rank": exact_rank, "log_numerical_rank": math.log(max(exact_rank, 1)),
        }))
    except (SpectralError, linalg.LinalgError) as exc:
        claims.append(Claim("entropy_rank_bound", False, {"error": str(exc)}))

    nuc = linalg.nuclear_norm(z)
    bound = math.sqrt(n * min(n, d))
    unit = bool(np.all(np.abs(row_norms - 1.0) < 1e-9))
    claims.append(Claim("nuclear_norm_bounds", unit and 0.0 <= nuc <= bound + 1e-9, {
        "nuclear_norm": nuc, "upper_bound": bound, "rows_unit_norm": unit,
    }))

    worst = 0.0
    for row in z:
        centroid = np.tile(row, (views, 1)).mean(axis=0)
        worst = max(worst, abs(float(np.linalg.norm(centroid)) - 1.0))
    claims.append(Claim("perfect_reconstruction_centroid", unit and worst <= 1e-12, {
        "views": views, "max_norm_deviation": worst,
    }))

    ratio = nuc / bound
    expected = mp_mean_sqrt(min(n, d) / max(n, d))
    claims.append(Claim("uniformity_nuclear_band", expected - UNIFORMITY_SLACK <= ratio <= 1.0 + 1e-12, {
        "ratio": ratio, "uniform_expectation": expected,
        "band": [expected - UNIFORMITY_SLACK, 1.0],
    }, diagnostic=True))
    return TheoryReport(claims)

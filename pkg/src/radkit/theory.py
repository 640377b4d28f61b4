"""Executable verification of the mathematical properties of retrieval scoring.

The distance-to-set score S(z) = min over stored u of ||z - u|| satisfies,
for any finite non-empty memory:

* saturation: S vanishes on every stored point;
* non-expansiveness: |S(u) - S(v)| <= ||u - v|| (S is 1-Lipschitz);
* dominance: any nonnegative 1-Lipschitz score vanishing on the memory is
  pointwise <= S; in particular the distance to any superset is.

The fidelity side is demonstrated on linear encoder-bottleneck-decoder toys:
when a linear reconstruction preserves a benign-variation subspace up to
relative error eta while the bottleneck compresses that subspace by a factor
sigma_min, the decoder's largest singular value is forced to be at least
(1 - eta) / sigma_min. Singular values for these contracts come from a
self-contained one-sided Jacobi SVD rather than an external solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ValidationError
from .retrieval import distance_to_set


# ---------------------------------------------------------------------------
# self-contained numerics
# ---------------------------------------------------------------------------

def _round_robin_pairs(q: int) -> list[list[tuple[int, int]]]:
    """Tournament schedule: q-1 rounds of disjoint column pairs covering all
    pairs once (a dummy column pads odd q)."""
    players = list(range(q)) + ([q] if q % 2 else [])
    nq = len(players)
    rounds = []
    order = players[:]
    for _ in range(nq - 1):
        pairs = []
        for i in range(nq // 2):
            x, y = order[i], order[nq - 1 - i]
            if x < q and y < q:
                pairs.append((min(x, y), max(x, y)))
        rounds.append(pairs)
        order = [order[0], order[-1]] + order[1:-1]
    return rounds


def _jacobi_batch(
    stack: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60
) -> np.ndarray:
    """One-sided Jacobi on a (batch, m, q) stack; returns (batch, q) descending
    singular values.

    Per sweep, disjoint column pairs from a round-robin schedule are rotated
    simultaneously; pairs already orthogonal enough get an identity rotation.
    """
    a = np.array(stack, dtype=np.float64)
    nb, _m, q = a.shape
    if q == 1:
        return np.linalg.norm(a, axis=1)
    rounds = _round_robin_pairs(q)
    eye = np.eye(q, dtype=bool)
    for _sweep in range(max_sweeps):
        gram = np.matmul(a.transpose(0, 2, 1), a)
        diag = np.clip(np.diagonal(gram, axis1=1, axis2=2), 0.0, None)
        denom = np.sqrt(diag[:, :, None] * diag[:, None, :])
        off = np.abs(np.where(eye, 0.0, gram))
        rel = off / np.maximum(denom, 1e-300)
        if float(rel.max()) <= tol:
            break
        for pairs in rounds:
            pcols = np.array([p for p, _ in pairs])
            rcols = np.array([r for _, r in pairs])
            x = a[:, :, pcols]
            y = a[:, :, rcols]
            app = np.einsum("bmk,bmk->bk", x, x)
            arr = np.einsum("bmk,bmk->bk", y, y)
            apr = np.einsum("bmk,bmk->bk", x, y)
            need = (np.abs(apr) > 1e-300) & (
                np.abs(apr) > tol * np.sqrt(np.clip(app, 0.0, None) * np.clip(arr, 0.0, None))
            )
            safe_apr = np.where(need, apr, 1.0)
            zeta = np.where(need, (arr - app) / (2.0 * safe_apr), 0.0)
            big = np.abs(zeta) > 1e150
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t = np.where(big, 1.0 / (2.0 * zeta), t)
            t = np.where(need & (zeta == 0.0), 1.0, t)
            t = np.where(need, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            a[:, :, pcols] = c[:, None, :] * x - s[:, None, :] * y
            a[:, :, rcols] = s[:, None, :] * x + c[:, None, :] * y
    sigma = np.linalg.norm(a, axis=1)
    return np.sort(sigma, axis=1)[:, ::-1]


def jacobi_singular_values(
    matrix: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60
) -> np.ndarray:
    """All singular values of a real matrix, descending, via one-sided Jacobi.

    Columns of a working copy are rotated pairwise until mutually orthogonal;
    the singular values are the final column norms. A p x q matrix yields q
    values, so rank-deficient shapes (q > p) report their zero singular
    values. Intended for small matrices (dims <= 64).
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValidationError("jacobi_singular_values needs a non-empty 2-D matrix")
    return _jacobi_batch(a[None], tol=tol, max_sweeps=max_sweeps)[0]


def orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random orthonormal basis via twice-applied modified Gram-Schmidt."""
    if cols > rows:
        raise ValidationError("cannot build more orthonormal columns than rows")
    basis = np.empty((rows, cols))
    count = 0
    while count < cols:
        v = rng.standard_normal(rows)
        for _ in range(2):
            for j in range(count):
                v -= np.dot(basis[:, j], v) * basis[:, j]
        norm = np.linalg.norm(v)
        if norm < 1e-8:
            continue
        basis[:, count] = v / norm
        count += 1
    return basis


def _complement_columns(
    rng: np.random.Generator, existing: np.ndarray, cols: int
) -> np.ndarray:
    """Orthonormal columns orthogonal to ``existing`` (also orthonormal)."""
    rows = existing.shape[0]
    out = np.empty((rows, cols))
    count = 0
    while count < cols:
        v = rng.standard_normal(rows)
        for _ in range(2):
            v -= existing @ (existing.T @ v)
            for j in range(count):
                v -= np.dot(out[:, j], v) * out[:, j]
        norm = np.linalg.norm(v)
        if norm < 1e-8:
            continue
        out[:, count] = v / norm
        count += 1
    return out


# ---------------------------------------------------------------------------
# retrieval-side checks
# ---------------------------------------------------------------------------

def check_saturation(memory: np.ndarray) -> float:
    """Max distance-to-set score over the stored points themselves."""
    mem = np.asarray(memory, dtype=np.float64)
    return max(distance_to_set(row, mem)[0] for row in mem)


def check_nonexpansive(
    memory: np.ndarray, us: np.ndarray, vs: np.ndarray
) -> float:
    """Max of |S(u) - S(v)| - ||u - v|| over the supplied pairs (<= 0 up to
    float round-off)."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    if us.shape != vs.shape:
        raise ValidationError("pair arrays must have matching shapes")
    worst = -np.inf
    for u, v in zip(us, vs):
        su = distance_to_set(u, memory)[0]
        sv = distance_to_set(v, memory)[0]
        worst = max(worst, abs(su - sv) - float(np.linalg.norm(u - v)))
    return float(worst)


def check_dominance(
    memory: np.ndarray, superset: np.ndarray, samples: np.ndarray
) -> float:
    """Max of S_superset(x) - S_memory(x) over the samples (<= 0 exactly).

    The distance to a superset is a nonnegative 1-Lipschitz score vanishing
    on the memory, so it can never exceed the memory's own score.
    """
    mem = np.asarray(memory, dtype=np.float64)
    sup = np.asarray(superset, dtype=np.float64)
    sup_bytes = {row.tobytes() for row in sup}
    if any(row.tobytes() not in sup_bytes for row in mem):
        raise ValidationError("superset does not contain the memory set")
    worst = -np.inf
    for x in np.asarray(samples, dtype=np.float64):
        worst = max(
            worst, distance_to_set(x, sup)[0] - distance_to_set(x, mem)[0]
        )
    return float(worst)


def check_sv_inequality(
    trials: int, max_dim: int = 32, seed: int = 0, group_size: int = 50
) -> float:
    """Max relative slack of sigma_min(AB) <= sigma_max(A) * sigma_min(B)
    over random Gaussian pairs (<= 0 up to round-off).

    Trials are drawn in groups sharing one random (p, q, r) shape so each
    group's singular values can be computed in one batched Jacobi pass.
    """
    rng = np.random.default_rng(seed)
    worst = -np.inf
    remaining = trials
    while remaining > 0:
        count = min(group_size, remaining)
        remaining -= count
        p, q, r = (int(d) for d in rng.integers(2, max_dim + 1, size=3))
        a = rng.standard_normal((count, p, q))
        b = rng.standard_normal((count, q, r))
        sigma_a = _jacobi_batch(a)
        sigma_b = _jacobi_batch(b)
        sigma_ab = _jacobi_batch(np.matmul(a, b))
        sigma_max_a = sigma_a[:, 0]
        slack = sigma_ab[:, -1] - sigma_max_a * sigma_b[:, -1]
        scale = np.maximum(sigma_max_a * sigma_b[:, 0], 1e-300)
        worst = max(worst, float((slack / scale).max()))
    return float(worst)


def check_cosine_euclidean_bridge(
    samples: int = 1000, dim: int = 32, seed: int = 0
) -> float:
    """Max |d^2 - 2 * (1 - cos)| over random unit-vector pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        u = rng.standard_normal(dim)
        v = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        d2 = float(np.sum((u - v) ** 2))
        cos_score = 1.0 - float(np.dot(u, v))
        worst = max(worst, abs(d2 - 2.0 * cos_score))
    return worst


# ---------------------------------------------------------------------------
# linear reconstruction toys
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ToyReconstruction:
    """A linear bottleneck/decoder pair fitted to reconstruct a normal set.

    Linearity makes every Jacobian equal the matrix itself, so the spectral
    quantities in the amplification bound are directly measurable.
    """

    ambient_dim: int           # D
    bottleneck_dim: int        # d < D (or == D for the identity regime)
    bottleneck: np.ndarray     # B, d x D
    decoder: np.ndarray        # Psi, D x d
    normal_set: np.ndarray     # n x D rows of anomaly-free features
    benign_basis: np.ndarray   # D x k orthonormal columns spanning the benign subspace

    @property
    def reconstruction(self) -> np.ndarray:
        return self.decoder @ self.bottleneck  # R = Psi B, D x D


@dataclass(eq=False)
class AmplificationReport:
    eta: float
    sigma_min_bottleneck_restricted: float
    sigma_max_decoder: float
    bound: float
    alpha: np.ndarray          # per-row reconstruction gaps
    delta_app: float           # mean gap
    degenerate: bool           # eta hit 1: bound check skipped
    bound_satisfied: bool
    toy: ToyReconstruction = field(repr=False, default=None)


def reconstruction_residuals(toy: ToyReconstruction) -> np.ndarray:
    """Per-row residual norms ||R x - x|| on the normal set; these equal the
    reconstruction gaps alpha(n) by definition."""
    recon = toy.normal_set @ toy.reconstruction.T
    return np.linalg.norm(recon - toy.normal_set, axis=1)


def build_toy(
    ambient_dim: int,
    bottleneck_dim: int,
    benign_dim: int,
    n_samples: int,
    seed: int,
    compression: float = 0.01,
    offmanifold_scale: float = 0.05,
) -> ToyReconstruction:
    """Construct the linear toy.

    The bottleneck keeps an orthonormal d-frame whose first ``benign_dim``
    directions span the benign subspace, scaled by ``compression``; features
    are benign-subspace samples plus a component the bottleneck annihilates,
    so a least-squares decoder must trade fidelity against gain.
    """
    if not (1 <= benign_dim <= bottleneck_dim <= ambient_dim):
        raise ValidationError("need 1 <= benign_dim <= bottleneck_dim <= ambient_dim")
    if not 0.0 < compression <= 1.0:
        raise ValidationError("compression must be in (0, 1]")
    if n_samples < benign_dim:
        raise ValidationError("need at least benign_dim samples for the fit")
    rng = np.random.default_rng(seed)

    frame = orthonormal_columns(rng, ambient_dim, bottleneck_dim)  # D x d
    benign = frame[:, :benign_dim]                                 # D x k
    scales = np.ones(bottleneck_dim)
    scales[:benign_dim] = compression
    bottleneck = scales[:, None] * frame.T                         # d x D

    coeffs = rng.standard_normal((n_samples, benign_dim))
    normal_set = coeffs @ benign.T
    lost_dims = min(benign_dim, ambient_dim - bottleneck_dim)
    if lost_dims > 0 and offmanifold_scale > 0:
        lost = _complement_columns(rng, frame, lost_dims)          # D x lost
        normal_set = normal_set + offmanifold_scale * rng.standard_normal(
            (n_samples, lost_dims)
        ) @ lost.T

    codes = normal_set @ bottleneck.T                              # n x d
    decoder_t, *_ = np.linalg.lstsq(codes, normal_set, rcond=None)
    return ToyReconstruction(
        ambient_dim=ambient_dim,
        bottleneck_dim=bottleneck_dim,
        bottleneck=bottleneck,
        decoder=decoder_t.T,
        normal_set=normal_set,
        benign_basis=benign,
    )


def amplification_demo(
    ambient_dim: int,
    bottleneck_dim: int,
    benign_dim: int,
    n_samples: int,
    seed: int,
    compression: float = 0.01,
    offmanifold_scale: float = 0.05,
) -> AmplificationReport:
    """Measure the decoder-gain lower bound on one constructed toy.

    eta is measured (1 minus the smallest singular value of the
    reconstruction restricted to the benign subspace, clamped to [0, 1]),
    never assumed; with eta < 1 the decoder must satisfy
    sigma_max(decoder) >= (1 - eta) / sigma_min(bottleneck restricted).
    """
    toy = build_toy(
        ambient_dim,
        bottleneck_dim,
        benign_dim,
        n_samples,
        seed,
        compression,
        offmanifold_scale,
    )
    restricted_recon = toy.reconstruction @ toy.benign_basis       # D x k
    sigma_min_recon = float(jacobi_singular_values(restricted_recon)[-1])
    eta = min(max(1.0 - sigma_min_recon, 0.0), 1.0)
    sigma_min_b = float(
        jacobi_singular_values(toy.bottleneck @ toy.benign_basis)[-1]
    )
    sigma_max_psi = float(jacobi_singular_values(toy.decoder)[0])

    alpha = reconstruction_residuals(toy)
    degenerate = eta >= 1.0 or sigma_min_b <= 0.0
    bound = float("nan") if degenerate else (1.0 - eta) / sigma_min_b
    satisfied = bool(not degenerate and sigma_max_psi >= bound - 1e-9)
    return AmplificationReport(
        eta=eta,
        sigma_min_bottleneck_restricted=sigma_min_b,
        sigma_max_decoder=sigma_max_psi,
        bound=bound,
        alpha=alpha,
        delta_app=float(alpha.mean()),
        degenerate=degenerate,
        bound_satisfied=satisfied,
        toy=toy,
    )


# ---------------------------------------------------------------------------
# aggregate runner (backs the verify-theory CLI)
# ---------------------------------------------------------------------------

def run_all_checks(
    seed: int = 0,
    trials: int = 1000,
    pair_samples: int = 10_000,
    memory_size: int = 256,
    dim: int = 64,
    inject_bug: bool = False,
) -> list[dict]:
    """Run every contract check; returns one record per check.

    ``inject_bug`` deliberately corrupts the saturation input to prove the
    harness fails loudly.
    """
    rng = np.random.default_rng(seed)
    records: list[dict] = []

    def record(name: str, slack: float, tolerance: float) -> None:
        records.append(
            {
                "check": name,
                "max_slack": float(slack),
                "tolerance": float(tolerance),
                "passed": bool(slack <= tolerance),
            }
        )

    memory = rng.standard_normal((memory_size, dim))
    us = rng.standard_normal((pair_samples, dim))
    vs = us + 0.1 * rng.standard_normal((pair_samples, dim))
    record("nonexpansive", check_nonexpansive(memory, us, vs), 1e-9)

    sat_memory = memory.copy()
    if inject_bug:
        sat_memory = sat_memory + 1e-3  # stored points no longer self-match
        sat = max(
            distance_to_set(row, sat_memory)[0] for row in memory
        )
    else:
        sat = check_saturation(sat_memory)
    record("saturation", sat, 1e-6)

    extra = rng.standard_normal((64, dim))
    superset = np.concatenate([memory, extra])
    samples = rng.standard_normal((trials, dim))
    record("dominance", check_dominance(memory, superset, samples), 1e-9)

    record(
        "singular_value_inequality",
        check_sv_inequality(trials=trials, max_dim=32, seed=seed + 1),
        1e-9,
    )

    report = amplification_demo(
        ambient_dim=32,
        bottleneck_dim=8,
        benign_dim=4,
        n_samples=256,
        seed=seed + 2,
        compression=0.01,
    )
    amp_slack = (
        float("inf")
        if report.degenerate
        else report.bound - report.sigma_max_decoder
    )
    record("decoder_amplification", amp_slack, 1e-9)

    record(
        "cosine_euclidean_bridge",
        check_cosine_euclidean_bridge(samples=trials, dim=dim, seed=seed + 3),
        1e-6,
    )
    return records


def require_all_passed(records: list[dict]) -> None:
    failed = [r["check"] for r in records if not r["passed"]]
    if failed:
        raise ContractViolation(f"theory checks failed: {', '.join(failed)}")

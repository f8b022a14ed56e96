"""Neural tangent kernels of the exponential-activation network."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    Dataset,
    KernelMatrix,
    NetworkState,
    ParameterDomainError,
    StructuralError,
    check_dims,
    check_exponents,
    derive_rng,
)

_MC_CHUNK = 200_000


@dataclass(frozen=True)
class SpectralReport:
    lambda_min: float
    iterations: int
    residual: float


def _mirror_upper(H: np.ndarray) -> np.ndarray:
    """Copy the upper triangle onto the lower one (bit-exact symmetry)."""
    iu = np.triu_indices(H.shape[0], 1)
    H = H.copy()
    H[iu[1], iu[0]] = H[iu]
    return H


def h_cts_closed(ds: Dataset, sigma: float) -> KernelMatrix:
    """Expected kernel over w ~ N(0, sigma^2 I).

    Uses E[exp(<w, u>)] = exp(sigma^2 ||u||^2 / 2) with u = x_i + x_j.
    """
    if not sigma > 0:
        raise ParameterDomainError("sigma must be positive")
    X = ds.X
    gram = X @ X.T
    S = X[:, None, :] + X[None, :, :]
    sq = np.einsum("ijk,ijk->ij", S, S)
    H = gram * np.exp(sigma**2 * sq / 2.0)
    return KernelMatrix(_mirror_upper(H), "cts_closed")


def h_cts_mc(ds: Dataset, sigma: float, samples: int, seed: int = 0) -> KernelMatrix:
    """Monte Carlo estimate of the expected kernel from shared Gaussian draws.

    The returned matrix carries entrywise standard errors in ``stderr``.
    """
    if int(samples) < 1:
        raise ParameterDomainError("samples must be >= 1")
    if not sigma >= 0:
        raise ParameterDomainError("sigma must be nonnegative")
    X = ds.X
    n, d = X.shape
    rng = derive_rng(seed, 3)
    s1 = np.zeros((n, n))
    s2 = np.zeros((n, n))
    done = 0
    while done < samples:
        k = min(_MC_CHUNK, samples - done)
        Wc = sigma * rng.standard_normal((d, k))
        Z = X @ Wc
        check_exponents(Z)
        E = np.exp(Z)
        s1 += E @ E.T
        E2 = E * E
        s2 += E2 @ E2.T
        done += k
    gram = X @ X.T
    mean_prod = s1 / samples
    H = gram * mean_prod
    if samples > 1:
        var = np.maximum(s2 / samples - mean_prod**2, 0.0) * samples / (samples - 1)
        se = np.abs(gram) * np.sqrt(var / samples)
    else:
        se = np.full((n, n), np.inf)
    return KernelMatrix(_mirror_upper(H), "cts_mc", stderr=_mirror_upper(se))


def h_dis(ds: Dataset, state: NetworkState) -> KernelMatrix:
    """Finite-width kernel (1/m) <x_i, x_j> sum_r exp(<w_r, x_i>) exp(<w_r, x_j>)."""
    check_dims(state, ds)
    Z = ds.X @ state.W
    check_exponents(Z)
    E = np.exp(Z)
    H = kernel_from_activations(ds.X, E)
    return KernelMatrix(H, "dis" if state.t == 0 else "at_time")


def kernel_from_activations(X: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Kernel matrix from the (n, m) array of exp(<w_r, x_i>)."""
    m = E.shape[1]
    return _mirror_upper((X @ X.T) * (E @ E.T) / m)


def _symmetry_gap(H: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(H)))) if H.size else 1.0
    return float(np.max(np.abs(H - H.T))) / scale if H.size else 0.0


def _as_array(K) -> np.ndarray:
    return K.H if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)


def lambda_min(K) -> SpectralReport:
    """Smallest eigenvalue of a symmetric matrix with its eigen-residual.

    A dense symmetric solve gives the first estimate; inverse iteration
    refines it only if the residual misses ``1e-10 * max(1, ||H||_F)``.
    """
    H = _as_array(K)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise StructuralError(f"expected a square matrix, got shape {H.shape}")
    if _symmetry_gap(H) > 1e-12:
        raise StructuralError("matrix is not symmetric")
    Hs = (H + H.T) / 2.0
    vals, vecs = np.linalg.eigh(Hs)
    lam, v = float(vals[0]), vecs[:, 0]
    tol = 1e-10 * max(1.0, fro_norm(H))
    res = float(np.linalg.norm(H @ v - lam * v))
    it = 0
    n = H.shape[0]
    while res > tol and it < 50:
        it += 1
        shift = lam - 1e-14 * max(1.0, abs(lam))
        try:
            v = np.linalg.solve(Hs - shift * np.eye(n), v)
        except np.linalg.LinAlgError:
            break
        v /= np.linalg.norm(v)
        lam = float(v @ H @ v)
        res = float(np.linalg.norm(H @ v - lam * v))
    return SpectralReport(lam, it, res)


def fro_norm(K) -> float:
    H = _as_array(K)
    return float(np.sqrt(np.sum(H * H)))


def inf_norm(K) -> float:
    """Largest absolute entry."""
    H = _as_array(K)
    return float(np.max(np.abs(H))) if H.size else 0.0


def spectral_norm(K, rtol: float = 1e-10, maxiter: int = 100_000) -> float:
    """Largest singular value by power iteration on H^T H."""
    H = _as_array(K)
    if not H.size or not np.any(H):
        return 0.0
    A = H.T @ H
    v = derive_rng(0, 4).standard_normal(H.shape[1])
    v /= np.linalg.norm(v)
    est = float(v @ A @ v)
    for _ in range(maxiter):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = float(v @ A @ v)
        if abs(new - est) <= rtol * abs(new):
            est = new
            break
        est = new
    return math.sqrt(max(est, 0.0))


def d_warning(d: int, delta: float) -> bool:
    """Warn when d < log(1/delta); the concentration statement assumes d grows with it."""
    if d < math.log(1.0 / delta):
        warnings.warn(f"d = {d} is below log(1/delta) = {math.log(1 / delta):.3f}", stacklevel=3)
        return True
    return False


def write_kernel_csv(K: KernelMatrix, path) -> None:
    Path(path).write_text(kernel_csv_text(K))


def kernel_csv_text(K: KernelMatrix) -> str:
    lines = [f"# kind={K.kind} n={K.n}"]
    lines += [",".join(format(float(v), ".17g") for v in row) for row in K.H]
    return "\n".join(lines) + "\n"


def read_kernel_csv(path) -> KernelMatrix:
    lines = Path(path).read_text().splitlines()
    head = dict(tok.split("=") for tok in lines[0].lstrip("#").split())
    H = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()])
    if H.shape != (int(head["n"]), int(head["n"])):
        raise StructuralError(f"{path}: header says n={head['n']}, body has shape {H.shape}")
    return KernelMatrix(H, head["kind"])

"""Domain types and seeded generation of datasets and initial weights.

Gaussian draws come from numpy's PCG64 generator (``standard_normal``,
ziggurat method); a given seed reproduces identical arrays for a fixed
numpy release.  Derived seeds are built with :class:`numpy.random.SeedSequence`
from ``(master_seed, *counters)`` so sweeps can be regenerated piecewise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

EXP_ARG_LIMIT = 700.0

DATASET_KINDS = ("sphere_interior", "normalized_gaussian")
KERNEL_KINDS = ("cts_closed", "cts_mc", "dis", "at_time")
# slack for files written by other tools; generated data satisfies <= 1 exactly
_NORM_SLACK = 4 * np.finfo(float).eps


class ParameterDomainError(ValueError):
    """A scalar parameter is outside its admissible range."""


class StructuralError(ValueError):
    """Shapes, lengths or structural preconditions do not match."""


class RangeError(OverflowError):
    """An exponent argument left the representable range.

    ``step`` is set when the failure happened inside a training loop.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class PreconditionError(ValueError):
    """A bound precondition (e.g. a perturbation radius) is violated."""


def derive_rng(seed: int, *counters: int) -> np.random.Generator:
    """Generator for ``seed`` combined with a structured counter path."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, counters)]))


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray  # (n, d), row i is x_i
    y: np.ndarray  # (n,)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise StructuralError(f"X must be a non-empty (n, d) array, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise StructuralError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ParameterDomainError("dataset contains non-finite values")
        norms = np.linalg.norm(X, axis=1)
        if np.any(norms > 1.0 + _NORM_SLACK):
            i = int(np.argmax(norms))
            raise ParameterDomainError(f"||x_{i}||_2 = {norms[i]!r} exceeds 1")
        if np.any(np.abs(y) > 1.0):
            raise ParameterDomainError("labels must satisfy |y_i| <= 1")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def with_labels(self, y) -> "Dataset":
        return Dataset(self.X, y)


@dataclass(frozen=True, eq=False)
class NetworkState:
    W: np.ndarray  # (d, m), column r is w_r
    a: np.ndarray  # (m,), entries in {-1, +1}
    t: int = 0

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] < 1:
            raise StructuralError(f"W must be (d, m) with m >= 1, got shape {W.shape}")
        if a.shape != (W.shape[1],):
            raise StructuralError(f"a must have shape ({W.shape[1]},), got {a.shape}")
        if not np.all((a == 1.0) | (a == -1.0)):
            raise ParameterDomainError("every entry of a must be exactly -1 or +1")
        if int(self.t) < 0:
            raise ParameterDomainError("timestep must be nonnegative")
        object.__setattr__(self, "W", _frozen(W))
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "t", int(self.t))

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.W.shape[1]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, W=self.W, a=self.a, t=np.int64(self.t))

    @classmethod
    def load(cls, path) -> "NetworkState":
        with np.load(path) as z:
            return cls(z["W"], z["a"], int(z["t"]))


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    H: np.ndarray
    kind: str
    # entrywise standard errors, only for Monte Carlo estimates
    stderr: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ParameterDomainError(f"unknown kernel kind {self.kind!r}")
        H = np.asarray(self.H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise StructuralError(f"kernel must be square, got shape {H.shape}")
        object.__setattr__(self, "H", _frozen(H))
        if self.stderr is not None:
            object.__setattr__(self, "stderr", _frozen(self.stderr))

    @property
    def n(self) -> int:
        return self.H.shape[0]


def theory_B(C: float, sigma: float, n: int, delta: float) -> float:
    """B = C * sigma * sqrt(log(n / delta))."""
    return C * sigma * math.sqrt(math.log(n / delta))


def empirical_B(state: NetworkState, ds: Dataset) -> float:
    """Realized max_{r,i} |<w_r, x_i>| of a weight draw."""
    return float(np.max(np.abs(ds.X @ state.W)))


def prescribed_eta(lam: float, m: int, n: int, B: float) -> float:
    """eta = 0.01 * lambda / (m * n^2 * exp(4B))."""
    return 0.01 * lam / (m * n**2 * math.exp(4.0 * B))


def prescribed_iterations(lam: float, m: int, eta: float, n: int, eps: float) -> int:
    """Iteration count log(n/eps) / (m * eta * lambda), rounded up."""
    return int(math.ceil(math.log(n / eps) / (m * eta * lam)))


def drift_radius(lam: float, B: float, R: float, n: int, m: int, init_residual_norm: float) -> float:
    """D = 8 / lambda * exp(B + R) * sqrt(n) / m * ||y - F(0)||_2."""
    return 8.0 / lam * math.exp(B + R) * math.sqrt(n) / m * init_residual_norm


@dataclass(frozen=True)
class HyperParams:
    """Scalar run parameters.

    ``B``, ``eta`` and ``T`` may be left ``None`` and filled by
    :meth:`resolved` once lambda and the weight draw are known.
    """

    n: int
    d: int
    m: int
    sigma: float = 1.0
    C: float = 11.0
    delta: float = 0.05
    eps: float = 0.01
    R: float = 0.005
    eta: float | None = None
    T: int | None = None
    B: float | None = None
    b_source: str = "empirical"
    eta_source: str = "paper-formula"
    lam: float | None = None

    def __post_init__(self):
        for name in ("n", "d", "m"):
            if int(getattr(self, name)) < 1:
                raise ParameterDomainError(f"{name} must be a positive integer")
        if not self.sigma > 0:
            raise ParameterDomainError("sigma must be positive")
        if not self.C > 10:
            raise ParameterDomainError("C must exceed 10")
        if not 0 < self.delta < 0.1:
            raise ParameterDomainError("delta must lie in (0, 0.1)")
        if not 0 < self.eps < 0.1:
            raise ParameterDomainError("eps must lie in (0, 0.1)")
        if not 0 < self.R < 0.01:
            raise ParameterDomainError("R must lie in (0, 0.01)")
        if self.b_source not in ("theory", "empirical"):
            raise ParameterDomainError(f"unknown b_source {self.b_source!r}")
        if self.eta_source not in ("paper-formula", "override"):
            raise ParameterDomainError(f"unknown eta_source {self.eta_source!r}")
        if self.eta_source == "override" and self.eta is None:
            raise ParameterDomainError("eta_source=override requires eta")
        if self.eta is not None and not self.eta > 0:
            raise ParameterDomainError("eta must be positive")
        if self.T is not None and int(self.T) < 0:
            raise ParameterDomainError("T must be nonnegative")
        if self.B is not None:
            if not self.B > 0:
                raise ParameterDomainError("B must be positive")
            if self.b_source == "theory" and not math.isclose(
                self.B, theory_B(self.C, self.sigma, self.n, self.delta), rel_tol=1e-12
            ):
                raise ParameterDomainError("b_source=theory requires B = C*sigma*sqrt(log(n/delta))")
            if not self.R < self.B:
                raise PreconditionError(f"R = {self.R} must be smaller than B = {self.B}")
        if self.eta_source == "paper-formula" and None not in (self.eta, self.lam, self.B):
            if not math.isclose(self.eta, prescribed_eta(self.lam, self.m, self.n, self.B), rel_tol=1e-12):
                raise ParameterDomainError("eta_source=paper-formula requires the prescribed step size")

    @property
    def is_resolved(self) -> bool:
        return None not in (self.B, self.eta, self.lam, self.T)

    def resolved(self, lam: float, state0: NetworkState | None = None, ds: Dataset | None = None) -> "HyperParams":
        """Fill B, eta and T from lambda and (for empirical B) the initial draw."""
        if not lam > 0:
            raise ParameterDomainError(f"lambda_min(H^cts) = {lam!r} must be positive")
        B = self.B
        if B is None:
            if self.b_source == "theory":
                B = theory_B(self.C, self.sigma, self.n, self.delta)
            else:
                if state0 is None or ds is None:
                    raise StructuralError("empirical B needs the initial state and the dataset")
                B = empirical_B(state0, ds)
        eta = self.eta if self.eta_source == "override" else prescribed_eta(lam, self.m, self.n, B)
        T = self.T if self.T is not None else prescribed_iterations(lam, self.m, eta, self.n, self.eps)
        return replace(self, B=B, eta=eta, lam=lam, T=T)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        return cls(**data)


@dataclass
class TrainTrace:
    """Per-step observables of one training run.

    Record ``t`` holds quantities of the state at step t; ``ratio`` and the
    decomposition terms belong to the step t -> t+1 and are NaN on the
    final record.
    """

    t: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    ratio: list = field(default_factory=list)
    max_drift: list = field(default_factory=list)
    max_grad: list = field(default_factory=list)
    C1: list = field(default_factory=list)
    C2: list = field(default_factory=list)
    C3: list = field(default_factory=list)
    resid: list = field(default_factory=list)
    lambda_min: list = field(default_factory=list)
    hp: HyperParams | None = None
    stop_step: int | None = None
    stop_reason: str = ""
    init_mode: str = ""
    seed: int | None = None
    state0: NetworkState | None = None
    final_state: NetworkState | None = None
    snapshots: dict = field(default_factory=dict)

    COLUMNS = ("t", "loss", "ratio", "max_drift", "max_grad", "C1", "C2", "C3", "resid", "lambda_min")

    def __len__(self):
        return len(self.t)

    def append(self, **rec):
        t = rec["t"]
        if self.t and t != self.t[-1] + 1:
            raise StructuralError(f"trace records must be consecutive, got {t} after {self.t[-1]}")
        if not (np.isfinite(rec["loss"]) and rec["loss"] >= 0):
            raise ParameterDomainError(f"loss at step {t} is not a finite nonnegative number")
        for col in self.COLUMNS:
            getattr(self, col).append(rec.get(col, math.nan))

    def set_step_terms(self, **terms):
        """Fill the step terms of the most recent record."""
        for key, value in terms.items():
            getattr(self, key)[-1] = value

    def array(self, col: str) -> np.ndarray:
        return np.asarray(getattr(self, col), dtype=np.float64)

    @property
    def final_loss(self) -> float:
        return self.loss[-1]

    @property
    def reached_eps(self) -> bool:
        return self.hp is not None and self.final_loss <= self.hp.eps


def _check_counts(n: int, d: int):
    if int(n) < 1 or int(d) < 1:
        raise ParameterDomainError(f"n and d must be >= 1, got n={n}, d={d}")


def gen_dataset(n: int, d: int, seed: int, kind: str = "normalized_gaussian") -> Dataset:
    """Random inputs inside the unit ball and labels uniform on [-1, 1]."""
    _check_counts(n, d)
    if kind not in DATASET_KINDS:
        raise ParameterDomainError(f"unknown dataset kind {kind!r}")
    rng = derive_rng(seed, 0)
    G = rng.standard_normal((n, d))
    norms = np.linalg.norm(G, axis=1)
    while np.any(norms == 0):  # measure-zero, redraw the offending rows
        zero = norms == 0
        G[zero] = rng.standard_normal((int(zero.sum()), d))
        norms = np.linalg.norm(G, axis=1)
    if kind == "sphere_interior":
        radius = 1.0 - rng.random(n)  # uniform on (0, 1]
    else:
        radius = np.ones(n)
    X = G / norms[:, None] * radius[:, None]
    X = _clip_to_ball(X)
    y = rng.uniform(-1.0, 1.0, n)
    return Dataset(X, y)


def _clip_to_ball(X: np.ndarray) -> np.ndarray:
    # rounding can leave ||x|| one ulp above 1; shrink those rows until it is not
    # (row-wise and batched norms may round differently, so both must agree)
    X = X.copy()
    shrink = 1.0 - np.finfo(float).eps
    while True:
        over = (np.linalg.norm(X, axis=1) > 1.0) | np.array([np.linalg.norm(row) > 1.0 for row in X])
        if not over.any():
            return X
        X[over] *= shrink


def _check_init(d, m, sigma):
    if int(d) < 1 or int(m) < 1:
        raise ParameterDomainError(f"d and m must be >= 1, got d={d}, m={m}")
    if not sigma >= 0:
        raise ParameterDomainError("sigma must be nonnegative")


def init_standard(d: int, m: int, sigma: float = 1.0, seed: int = 0) -> NetworkState:
    """Independent N(0, sigma^2 I) columns and uniform random signs."""
    _check_init(d, m, sigma)
    if m % 2:
        raise ParameterDomainError(f"m must be even, got {m}")
    rng = derive_rng(seed, 1)
    W = sigma * rng.standard_normal((d, m))
    a = np.where(rng.random(m) < 0.5, -1.0, 1.0)
    return NetworkState(W, a, 0)


def init_paired(d: int, m: int, sigma: float = 1.0, seed: int = 0) -> NetworkState:
    """Duplicated columns with opposite signs, so the initial output is zero."""
    _check_init(d, m, sigma)
    if m % 2:
        raise ParameterDomainError(f"paired initialization needs even m, got {m}")
    rng = derive_rng(seed, 2)
    half = sigma * rng.standard_normal((d, m // 2))
    a_half = np.where(rng.random(m // 2) < 0.5, -1.0, 1.0)
    W = np.repeat(half, 2, axis=1)
    a = np.empty(m)
    a[0::2] = a_half
    a[1::2] = -a_half
    return NetworkState(W, a, 0)


def init_state(mode: str, d: int, m: int, sigma: float, seed: int) -> NetworkState:
    if mode == "standard":
        return init_standard(d, m, sigma, seed)
    if mode == "paired":
        return init_paired(d, m, sigma, seed)
    raise ParameterDomainError(f"unknown init mode {mode!r}")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(ds: Dataset, path) -> None:
    lines = [f"{ds.n} {ds.d}"]
    for x, label in zip(ds.X, ds.y):
        lines.append(" ".join(_fmt(v) for v in (*x, label)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path, label_file=None) -> Dataset:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 2:
        raise StructuralError(f"{path}: first line must be 'n d'")
    n, d = int(rows[0][0]), int(rows[0][1])
    body = rows[1:]
    if len(body) != n or any(len(r) != d + 1 for r in body):
        raise StructuralError(f"{path}: expected {n} rows of {d + 1} values")
    data = np.array([[float(v) for v in r] for r in body])
    y = data[:, d]
    if label_file is not None:
        y = read_labels(label_file, n)
    return Dataset(data[:, :d], y)


def read_labels(path, n: int) -> np.ndarray:
    vals = np.array([float(v) for v in Path(path).read_text().split()])
    if vals.shape != (n,):
        raise StructuralError(f"{path}: expected {n} labels, found {vals.size}")
    return vals


def check_dims(state: NetworkState, ds: Dataset) -> None:
    if state.d != ds.d:
        raise StructuralError(f"weight dimension {state.d} does not match input dimension {ds.d}")


def check_exponents(Z: np.ndarray, step=None) -> None:
    """Refuse pre-activations whose exp would overflow."""
    if Z.size and (Z.max() > EXP_ARG_LIMIT or Z.min() < -EXP_ARG_LIMIT):
        where = "" if step is None else f" at step {step}"
        raise RangeError(f"|<w_r, x_i>| exceeds {EXP_ARG_LIMIT}{where}", step=step)


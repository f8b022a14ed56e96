"""Forward pass, exact gradient and full-batch gradient descent."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .datamodel import (
    Dataset,
    HyperParams,
    NetworkState,
    ParameterDomainError,
    RangeError,
    StructuralError,
    TrainTrace,
    check_dims,
    check_exponents,
    init_state,
)
from .kernel import h_cts_closed, kernel_from_activations, lambda_min


@dataclass(frozen=True, eq=False)
class GradientMatrix:
    dW: np.ndarray  # (d, m), column r is the gradient for w_r

    def __post_init__(self):
        dW = np.array(self.dW, dtype=np.float64)
        if dW.ndim != 2:
            raise StructuralError(f"gradient must be (d, m), got shape {dW.shape}")
        if not np.all(np.isfinite(dW)):
            raise RangeError("gradient has non-finite entries")
        dW.setflags(write=False)
        object.__setattr__(self, "dW", dW)

    def column_norms(self) -> np.ndarray:
        return np.sqrt(np.einsum("dr,dr->r", self.dW, self.dW))


def activations(state: NetworkState, ds: Dataset, step=None) -> np.ndarray:
    """(n, m) array of exp(<w_r, x_i>)."""
    check_dims(state, ds)
    Z = ds.X @ state.W
    check_exponents(Z, step)
    return np.exp(Z)


def predict_from_activations(E: np.ndarray, a: np.ndarray) -> np.ndarray:
    """F_i = sum_r a_r E[i, r], adding neurons (1,2), (3,4), ... pairwise first.

    With paired weights every pair is a*e + (-a)*e = 0 exactly, so the
    initial output vanishes in floating point too.
    """
    P = E * a
    m = P.shape[1]
    F = (P[:, 0 : m - 1 : 2] + P[:, 1:m:2]).sum(axis=1)
    if m % 2:
        F = F + P[:, -1]
    return F


def forward(state: NetworkState, ds: Dataset) -> np.ndarray:
    return predict_from_activations(activations(state, ds), state.a)


def loss(F, y) -> float:
    """Squared residual norm ||F - y||_2^2 (twice the objective L)."""
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if F.shape != y.shape:
        raise StructuralError(f"prediction shape {F.shape} does not match label shape {y.shape}")
    r = F - y
    return float(np.sum(r * r))


def objective(F, y) -> float:
    """L(W) = 1/2 ||F - y||_2^2."""
    return 0.5 * loss(F, y)


def gradient_from_activations(X: np.ndarray, E: np.ndarray, resid: np.ndarray, a: np.ndarray) -> np.ndarray:
    return (X.T @ (resid[:, None] * E)) * a


def gradient(state: NetworkState, ds: Dataset) -> GradientMatrix:
    """Columns sum_i (F_i - y_i) a_r x_i exp(<w_r, x_i>), the gradient of L."""
    E = activations(state, ds)
    F = predict_from_activations(E, state.a)
    return GradientMatrix(gradient_from_activations(ds.X, E, F - ds.y, state.a))


def gd_step(state: NetworkState, eta: float, g: GradientMatrix) -> NetworkState:
    if not eta >= 0:
        raise ParameterDomainError("eta must be nonnegative")
    if g.dW.shape != state.W.shape:
        raise StructuralError(f"gradient shape {g.dW.shape} does not match weights {state.W.shape}")
    return NetworkState(state.W - eta * g.dW, state.a, state.t + 1)


def _column_norms(A: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("dr,dr->r", A, A))


def train(
    hp: HyperParams,
    ds: Dataset,
    init_mode: str = "paired",
    seed: int = 0,
    record_kernel_every: int = 0,
    early_stop: bool = True,
    max_seconds: float | None = None,
    snapshot_every: int = 0,
    state0: NetworkState | None = None,
) -> TrainTrace:
    """Run full-batch gradient descent and record a :class:`TrainTrace`.

    Unresolved ``B``/``eta``/``T`` in ``hp`` are filled first (lambda from
    the closed-form kernel, empirical B from the initial draw).  The loop
    stops after ``hp.T`` steps, when the loss reaches ``hp.eps`` (if
    ``early_stop``), or when ``max_seconds`` of wall time are used.
    ``snapshot_every`` keeps every k-th state in ``trace.snapshots``.
    """
    from . import theory

    if (hp.n, hp.d) != (ds.n, ds.d):
        raise StructuralError(f"hyperparameters (n={hp.n}, d={hp.d}) do not match dataset ({ds.n}, {ds.d})")
    if state0 is None:
        state0 = init_state(init_mode, hp.d, hp.m, hp.sigma, seed)
    elif state0.m != hp.m:
        raise StructuralError("initial state width does not match hp.m")
    if not hp.is_resolved:
        lam = hp.lam if hp.lam is not None else lambda_min(h_cts_closed(ds, hp.sigma)).lambda_min
        hp = hp.resolved(lam, state0, ds)

    trace = TrainTrace(hp=hp, init_mode=init_mode, seed=seed, state0=state0)
    X, y, eta, m = ds.X, ds.y, hp.eta, hp.m
    start = time.perf_counter()

    state = state0
    E = activations(state, ds, step=0)
    F = predict_from_activations(E, state.a)
    r = F - y
    L = loss(F, y)
    t = 0
    while True:
        G = gradient_from_activations(X, E, r, state.a)
        if not np.all(np.isfinite(G)):
            raise RangeError(f"non-finite gradient at step {t}", step=t)
        rec = dict(
            t=t,
            loss=L,
            max_drift=float(np.max(_column_norms(state.W - state0.W))),
            max_grad=float(np.max(_column_norms(G))),
        )
        H = None
        if record_kernel_every and t % record_kernel_every == 0:
            H = kernel_from_activations(X, E)
            rec["lambda_min"] = lambda_min(H).lambda_min
        trace.append(**rec)
        if snapshot_every and t % snapshot_every == 0:
            trace.snapshots[t] = state

        if early_stop and L <= hp.eps:
            trace.stop_reason = "eps"
            break
        if t >= hp.T:
            trace.stop_reason = "T"
            break
        if max_seconds is not None and time.perf_counter() - start > max_seconds:
            trace.stop_reason = "time_budget"
            break

        if H is None:
            H = kernel_from_activations(X, E)
        C1, C2, C3 = theory.step_terms(X, state.a, E, r, G, eta, H)
        state = NetworkState(state.W - eta * G, state.a, t + 1)
        try:
            E = activations(state, ds, step=t + 1)
        except RangeError as err:
            raise RangeError(str(err), step=t + 1) from err
        F = predict_from_activations(E, state.a)
        r = F - y
        L_next = loss(F, y)
        trace.set_step_terms(
            ratio=L_next / L if L > 0 else math.nan,
            C1=C1,
            C2=C2,
            C3=C3,
            resid=L_next - (L + C1 + C2 + C3),
        )
        L = L_next
        t += 1

    trace.stop_step = t
    trace.final_state = state
    return trace


def write_trace_csv(trace: TrainTrace, path) -> None:
    with open(path, "w") as fh:
        fh.write(trace_csv_text(trace))


def trace_csv_text(trace: TrainTrace) -> str:
    def cell(v):
        v = float(v)
        return "" if math.isnan(v) else format(v, ".17g")

    lines = [",".join(TrainTrace.COLUMNS)]
    cols = [getattr(trace, c) for c in TrainTrace.COLUMNS]
    for k in range(len(trace)):
        lines.append(",".join([str(int(cols[0][k]))] + [cell(col[k]) for col in cols[1:]]))
    return "\n".join(lines) + "\n"


def read_trace_csv(path) -> TrainTrace:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != TrainTrace.COLUMNS:
            raise StructuralError(f"{path}: unexpected trace header {header}")
        trace = TrainTrace()
        for line in fh:
            if not line.strip():
                continue
            vals = line.rstrip("\n").split(",")
            rec = {c: (math.nan if v == "" else float(v)) for c, v in zip(header, vals)}
            rec["t"] = int(rec["t"])
            trace.append(**rec)
    return trace

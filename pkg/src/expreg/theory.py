"""Empirical certification of the bounds behind the convergence argument.

Every check yields a :class:`BoundCheck`.  Deterministic inequalities are
single trials (``violation_rate`` 0 or 1, budget 0); probabilistic
statements are repeated over derived seeds and pass when the observed
violation frequency stays within the stated failure budget.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .datamodel import (
    Dataset,
    HyperParams,
    NetworkState,
    ParameterDomainError,
    PreconditionError,
    StructuralError,
    TrainTrace,
    check_dims,
    derive_rng,
    drift_radius,
    empirical_B,
)
from .kernel import d_warning, h_cts_closed, h_dis, kernel_from_activations, lambda_min
from .training import activations, gradient_from_activations, predict_from_activations

# below this |u| the series through u^10 is exact to double precision
_SERIES_CUTOFF = 0.1
_SERIES_COEFFS = tuple(1.0 / math.factorial(k) for k in range(2, 11))


@dataclass
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    holds: bool
    trials: int = 1
    violation_rate: float = 0.0
    allowed_failure: float = 0.0
    diagnostic: bool = False
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def single(name: str, lhs: float, rhs: float, diagnostic: bool = False, **detail) -> BoundCheck:
    ok = bool(lhs <= rhs)
    return BoundCheck(name, float(lhs), float(rhs), ok, 1, 0.0 if ok else 1.0, 0.0, diagnostic, detail)


def aggregate(name: str, checks, allowed_failure: float = 0.0, diagnostic: bool = False, **detail) -> BoundCheck:
    """Fold repeated trials into one check; reports the worst-margin trial."""
    checks = list(checks)
    if not checks:
        raise StructuralError(f"no trials to aggregate for {name}")
    fails = sum(not c.holds for c in checks)
    rate = fails / len(checks)
    worst = max(checks, key=lambda c: c.lhs - c.rhs)
    return BoundCheck(
        name, worst.lhs, worst.rhs, rate <= allowed_failure, len(checks), rate, allowed_failure, diagnostic, detail
    )


def expm1_minus_id(u: np.ndarray) -> np.ndarray:
    """exp(u) - 1 - u without cancellation for small |u|."""
    u = np.asarray(u, dtype=np.float64)
    if u.size == 0:
        return u.copy()
    umax = float(np.max(np.abs(u)))
    # keep only the terms that matter at this magnitude
    k = 1
    while k < len(_SERIES_COEFFS) and umax**k * _SERIES_COEFFS[k] > 1e-17 * _SERIES_COEFFS[0]:
        k += 1
    acc = np.full_like(u, _SERIES_COEFFS[k - 1])
    for c in _SERIES_COEFFS[k - 2 :: -1]:
        acc = c + u * acc
    series = u * u * acc
    if umax < _SERIES_CUTOFF:
        return series
    return np.where(np.abs(u) < _SERIES_CUTOFF, series, np.expm1(u) - u)


def step_terms(X, a, E, resid, G, eta, H):
    """C1, C2, C3 of one gradient step from the state's activations.

    The step changes each pre-activation by u = -eta <grad_r, x_i>, so
    F(t+1) - F(t) = v1 + v2 with the linear part v1 = -m eta H r and the
    remainder v2_i = sum_r a_r E_ir (exp(u_ir) - 1 - u_ir), evaluated
    directly instead of by differencing two nearly equal outputs.
    """
    m = E.shape[1]
    v1 = -m * eta * (H @ resid)
    U = -eta * (X @ G)
    v2 = (E * expm1_minus_id(U)) @ a
    C1 = -2.0 * m * eta * float(resid @ H @ resid)
    C2 = 2.0 * float(resid @ v2)
    dF = v1 + v2
    C3 = float(dF @ dF)
    return C1, C2, C3


def decompose_loss_step(before: NetworkState, after: NetworkState, ds: Dataset, eta: float):
    """Split the loss change of one GD step into (C1, C2, C3, residual)."""
    check_dims(before, ds)
    E = activations(before, ds)
    F = predict_from_activations(E, before.a)
    r = F - ds.y
    G = gradient_from_activations(ds.X, E, r, before.a)
    expected = before.W - eta * G
    if (
        after.W.shape != before.W.shape
        or after.t != before.t + 1
        or not np.array_equal(after.a, before.a)
        or not np.allclose(after.W, expected, rtol=1e-12, atol=0.0)
    ):
        raise StructuralError("'after' is not a gradient step of 'before' with this eta")
    H = kernel_from_activations(ds.X, E)
    C1, C2, C3 = step_terms(ds.X, before.a, E, r, G, eta, H)
    L0 = float(np.sum(r * r))
    r1 = predict_from_activations(activations(after, ds), after.a) - ds.y
    L1 = float(np.sum(r1 * r1))
    return C1, C2, C3, L1 - (L0 + C1 + C2 + C3)


def _max_col_dist(A: NetworkState, B: NetworkState) -> float:
    D = A.W - B.W
    return float(np.max(np.sqrt(np.einsum("dr,dr->r", D, D))))


def check_exp_bounds(state0: NetworkState, perturbed: NetworkState, ds: Dataset, B: float, R: float):
    """Parts 1-6 of the inner-product and exponential bounds, over all (r, i[, j])."""
    check_dims(state0, ds)
    check_dims(perturbed, ds)
    if perturbed.W.shape != state0.W.shape:
        raise StructuralError("perturbed state has a different shape")
    dist = _max_col_dist(perturbed, state0)
    if dist > R:
        raise PreconditionError(f"max_r ||v_r - w_r||_2 = {dist:.3e} exceeds R = {R:.3e}")
    X = ds.X
    Zw = X @ state0.W
    Zv = X @ perturbed.W
    dZ = X @ (state0.W - perturbed.W)  # (n, m) of <w_r - v_r, x_i>
    pair = np.abs(dZ[:, None, :] + dZ[None, :, :])  # <w_r - v_r, x_i + x_j>
    pair_signed = dZ[:, None, :] + dZ[None, :, :]
    return [
        single("exp_bounds.part1", np.max(np.abs(Zw)), B),
        single("exp_bounds.part2", np.max(np.abs(Zv)), B + R),
        single("exp_bounds.part3", np.max(pair), 2 * R),
        single("exp_bounds.part4", np.max(np.exp(Zw)), math.exp(B)),
        single("exp_bounds.part5", np.max(np.exp(Zv)), math.exp(B + R)),
        single("exp_bounds.part6", np.max(np.abs(np.expm1(pair_signed))), 4 * R),
    ]


def concentration_threshold(lam: float, n: int, B: float, delta: float) -> float:
    """Width lambda^-2 n^2 exp(2B) sqrt(log(n/delta)) (unit constant)."""
    return n**2 * math.exp(2 * B) * math.sqrt(math.log(n / delta)) / lam**2


def fit_loglog_slope(ms, values) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(ms, float)), np.log(np.asarray(values, float)), 1)
    return float(slope)


def check_kernel_concentration(
    ds: Dataset,
    sigma: float,
    m_grid,
    trials: int,
    seed: int,
    lam: float,
    delta: float = 0.05,
    slope_band=(-0.65, -0.35),
    threshold_B: float | None = None,
):
    """Finite-width kernels against the expected kernel over a grid of widths.

    Per width: frequency of ||H^dis - H^cts||_F <= lambda/4 and of
    lambda_min(H^dis) >= 3 lambda / 4 against budget delta.  Widths under
    the unit-constant threshold are flagged diagnostic.  With two or more
    widths a log-log fit of the median Frobenius error is checked against
    ``slope_band``.  The threshold uses ``threshold_B`` when given, else the
    largest realized B among the trials.
    """
    if int(trials) < 1:
        raise ParameterDomainError("trials must be >= 1")
    d_warning(ds.d, delta)
    Hc = h_cts_closed(ds, sigma).H
    X = ds.X
    out, medians = [], []
    for m in m_grid:
        m = int(m)
        errs, lmins, Bs = [], [], []
        for k in range(trials):
            W = sigma * derive_rng(seed, 5, m, k).standard_normal((ds.d, m))
            Z = X @ W
            Hd = kernel_from_activations(X, np.exp(Z))
            errs.append(float(np.linalg.norm(Hd - Hc)))
            lmins.append(lambda_min(Hd).lambda_min)
            Bs.append(float(np.max(np.abs(Z))))
        m_star = concentration_threshold(lam, ds.n, max(Bs) if threshold_B is None else threshold_B, delta)
        diag = m < m_star
        medians.append(float(np.median(errs)))
        info = dict(m=m, m_star=m_star, median_error=medians[-1])
        out.append(
            aggregate(
                f"kernel_concentration.part1[m={m}]",
                [single("", e, lam / 4) for e in errs],
                delta,
                diag,
                **info,
            )
        )
        out.append(
            aggregate(
                f"kernel_concentration.part2[m={m}]",
                [single("", -lm, -0.75 * lam) for lm in lmins],
                delta,
                diag,
                **info,
            )
        )
    if len(medians) >= 2:
        slope = fit_loglog_slope(list(m_grid), medians)
        lo, hi = slope_band
        centre, half = (lo + hi) / 2, (hi - lo) / 2
        out.append(single("kernel_concentration.scaling", abs(slope - centre), half, slope=slope, medians=medians))
    return out


def check_perturbation(
    ds: Dataset,
    state: NetworkState,
    R: float,
    B: float | None = None,
    trials: int = 50,
    seed: int = 0,
    sigma: float | None = None,
    delta: float = 0.05,
) -> BoundCheck:
    """Kernel change under weight perturbations of radius at most R.

    Reference weights are ``state.W`` or, when ``sigma`` is given, a fresh
    N(0, sigma^2 I) draw per trial.  Each trial perturbs every column in a
    uniform direction by R*u, u ~ U(0, 1]; extra worst-case probes shift all
    columns by R x_i / ||x_i||.  ``B=None`` uses each draw's empirical B.
    """
    check_dims(state, ds)
    loose = not 0 < R < 0.001
    if loose:
        warnings.warn(f"R = {R} is outside (0, 0.001), the perturbation statement's range", stacklevel=2)
    X, n = ds.X, ds.n
    d, m = state.W.shape

    def kernel(W):
        return kernel_from_activations(X, np.exp(X @ W))

    results, gaps = [], []
    for k in range(trials):
        rng = derive_rng(seed, 6, k)
        Wt = state.W if sigma is None else sigma * rng.standard_normal((d, m))
        Bk = empirical_B(NetworkState(Wt, state.a), ds) if B is None else B
        rhs = 3 * n * R * math.exp(2 * Bk)
        Ht = kernel(Wt)
        U = rng.standard_normal((d, m))
        U /= np.linalg.norm(U, axis=0)
        radius = R * (1.0 - rng.random(m))
        gap = float(np.linalg.norm(kernel(Wt + U * radius) - Ht))
        gaps.append(gap)
        results.append(single("", gap, rhs))
        for i in range(n):
            nx = np.linalg.norm(X[i])
            if nx == 0:
                continue
            shift = np.repeat((R * X[i] / nx)[:, None], m, axis=1)
            results.append(single("", float(np.linalg.norm(kernel(Wt + shift) - Ht)), rhs))
    budget = min(1.0, n**2 * math.exp(-m * R / 10) + delta)
    return aggregate("perturbed_w", results, budget, loose_R=loose, gaps=gaps)


def check_claims(C1, C2, C3, loss_t, hp: HyperParams, lam: float):
    """The three one-step claims, bounds evaluated with the in-force B."""
    m, eta, n, B = hp.m, hp.eta, hp.n, hp.B
    c3_bound = 4 * m**2 * eta**2 * n**2 * math.exp(8 * B) * loss_t
    return [
        single("claim.C1", C1, -m * eta * lam * loss_t),
        single("claim.C2", abs(C2), 2 * m * eta**2 * n * math.exp(4 * B) * loss_t),
        single("claim.C3", C3, c3_bound),
        single("claim.C3.slack", C3, c3_bound, diagnostic=True, slack=(c3_bound / C3) if C3 > 0 else math.inf),
    ]


def _step_rows(trace: TrainTrace):
    """Indices of records that carry step terms (all but a final record)."""
    return [k for k in range(len(trace)) if not math.isnan(trace.C1[k])]


def check_claims_c1_c2_c3(trace: TrainTrace, hp: HyperParams | None = None, lam: float | None = None):
    """Claims C1-C3 at every recorded step, folded into one check per claim."""
    hp = hp or trace.hp
    lam = lam if lam is not None else hp.lam
    per_step = [check_claims(trace.C1[k], trace.C2[k], trace.C3[k], trace.loss[k], hp, lam) for k in _step_rows(trace)]
    if not per_step:
        return []
    out = []
    for j, name in enumerate(("claim.C1", "claim.C2", "claim.C3")):
        out.append(aggregate(name, [row[j] for row in per_step]))
    slacks = [row[3].detail["slack"] for row in per_step]
    out.append(BoundCheck("claim.C3.slack", float(min(slacks)), math.inf, True, len(slacks), 0.0, 0.0, True,
                          {"min_slack_ratio": float(min(slacks))}))
    return out


def check_contraction(trace: TrainTrace, hp: HyperParams | None = None, lam: float | None = None, factor: float = 4.0):
    """Every per-step loss ratio stays below 1 - m eta lambda / factor."""
    hp = hp or trace.hp
    lam = lam if lam is not None else hp.lam
    bound = 1.0 - hp.m * hp.eta * lam / factor
    rows = [k for k in _step_rows(trace) if not math.isnan(trace.ratio[k])]
    if not rows:
        return single("contraction", 0.0, bound, steps=0)
    return aggregate("contraction", [single("", trace.ratio[k], bound) for k in rows], bound=bound)


def trace_drift_radius(trace: TrainTrace, hp: HyperParams | None = None, lam: float | None = None) -> float:
    hp = hp or trace.hp
    lam = lam if lam is not None else hp.lam
    return drift_radius(lam, hp.B, hp.R, hp.n, hp.m, math.sqrt(trace.loss[0]))


def check_induction(trace: TrainTrace, hp: HyperParams | None = None, lam: float | None = None, D: float | None = None):
    """Weight drift, loss decay and gradient size at every recorded step."""
    hp = hp or trace.hp
    lam = lam if lam is not None else hp.lam
    D = D if D is not None else trace_drift_radius(trace, hp, lam)
    q = hp.m * hp.eta * lam / 2
    loss0 = trace.loss[0]
    drift, decay, grad = [], [], []
    for k, t in enumerate(trace.t):
        drift.append(single("", trace.max_drift[k], D))
        decay.append(single("", trace.loss[k], loss0 * math.exp(t * math.log1p(-q))))
        grad.append(single("", hp.eta * trace.max_grad[k], 0.01))
    return [
        aggregate("induction.weights", drift, D=D),
        aggregate("induction.loss", decay, rate=1 - q),
        aggregate("induction.gradient", grad),
        single("induction.D_below_R", D, hp.R, diagnostic=True, D_over_R=D / hp.R),
    ]


def _check_drift(state, initial, R):
    if initial is not None:
        dist = _max_col_dist(state, initial)
        if dist > R:
            raise PreconditionError(f"weights drifted {dist:.3e} from initialization, beyond R = {R:.3e}")


def check_h_asy_inf(ds: Dataset, state: NetworkState, B: float, R: float, initial: NetworkState | None = None):
    """Max-abs entry of the asymmetric kernel at the extremal choice p = 1."""
    check_dims(state, ds)
    _check_drift(state, initial, R)
    H = h_dis(ds, state).H
    return single("h_asy_inf", np.max(np.abs(H)), math.exp(2 * (B + R)))


def check_gradient_norm_bound(state: NetworkState, ds: Dataset, B: float, R: float, initial: NetworkState | None = None):
    """max_r ||grad_r||_2 against exp(B + R) sqrt(n) ||y - F||_2."""
    check_dims(state, ds)
    _check_drift(state, initial, R)
    E = activations(state, ds)
    r = predict_from_activations(E, state.a) - ds.y
    G = gradient_from_activations(ds.X, E, r, state.a)
    lhs = float(np.max(np.sqrt(np.einsum("dr,dr->r", G, G))))
    return single("gradient_norm", lhs, math.exp(B + R) * math.sqrt(ds.n) * float(np.linalg.norm(r)))


def tail_bounds(kind: str, **params) -> float:
    """Tail-probability bound.

    hoeffding: ``t`` and either ``ranges`` [(lo, hi), ...] or ``width_sq_sum``.
    bernstein: ``t``, ``var`` (sum of second moments), ``M`` (a.s. bound).
    chi_square: ``k`` degrees of freedom and deviation parameter ``t``; the
    one-sided deviations (2 sqrt(kt) + 2t) sigma^2 above and 2 sqrt(kt)
    sigma^2 below k sigma^2 each have probability at most exp(-t);
    ``side="two_sided"`` returns the union bound.
    """
    if kind == "hoeffding":
        t = _nonneg(params, "t")
        if "ranges" in params:
            ranges = np.asarray(params["ranges"], dtype=float).reshape(-1, 2)
            if np.any(ranges[:, 1] < ranges[:, 0]):
                raise ParameterDomainError("each range must satisfy lo <= hi")
            wsq = float(np.sum((ranges[:, 1] - ranges[:, 0]) ** 2))
        else:
            wsq = _nonneg(params, "width_sq_sum")
        if wsq == 0:
            return 2.0 if t == 0 else 0.0
        return 2.0 * math.exp(-2.0 * t * t / wsq)
    if kind == "bernstein":
        t, var, M = _nonneg(params, "t"), _nonneg(params, "var"), _nonneg(params, "M")
        denom = var + M * t / 3.0
        if denom == 0:
            return 1.0 if t == 0 else 0.0
        return math.exp(-(t * t / 2.0) / denom)
    if kind == "chi_square":
        k, t = params.get("k"), _nonneg(params, "t")
        if k is None or int(k) != k or k < 1:
            raise ParameterDomainError("k must be a positive integer")
        if params.get("sigma2", 1.0) <= 0:
            raise ParameterDomainError("sigma2 must be positive")
        side = params.get("side", "upper")
        if side not in ("upper", "lower", "two_sided"):
            raise ParameterDomainError(f"unknown side {side!r}")
        return (2.0 if side == "two_sided" else 1.0) * math.exp(-t)
    raise ParameterDomainError(f"unknown tail bound {kind!r}")


def chi_square_deviations(k: int, t: float, sigma2: float = 1.0):
    """Upper and lower deviation thresholds paired with probability exp(-t)."""
    return (2 * math.sqrt(k * t) + 2 * t) * sigma2, 2 * math.sqrt(k * t) * sigma2


def _nonneg(params, key) -> float:
    if key not in params:
        raise ParameterDomainError(f"missing parameter {key!r}")
    v = float(params[key])
    if not v >= 0:
        raise ParameterDomainError(f"{key} must be nonnegative, got {v}")
    return v


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def all_pass(checks) -> bool:
    return all(c.holds for c in checks if not c.diagnostic)


def verdict_json(checks, **context) -> str:
    doc = {
        **{k: _clean(v) for k, v in context.items()},
        "all_pass": all_pass(checks),
        "checks": [_clean(c.to_dict()) for c in checks],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"

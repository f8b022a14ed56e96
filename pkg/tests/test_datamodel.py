import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from expreg.datamodel import (
    Dataset,
    HyperParams,
    KernelMatrix,
    NetworkState,
    ParameterDomainError,
    PreconditionError,
    StructuralError,
    TrainTrace,
    empirical_B,
    gen_dataset,
    init_paired,
    init_standard,
    prescribed_eta,
    prescribed_iterations,
    read_dataset,
    theory_B,
    write_dataset,
)


def test_gen_dataset_sphere_interior_small():
    ds = gen_dataset(3, 2, 7, "sphere_interior")
    assert ds.X.shape == (3, 2)
    assert np.all(np.linalg.norm(ds.X, axis=1) <= 1.0)
    assert np.all(np.abs(ds.y) <= 1.0)


def test_gen_dataset_single_point_has_unit_norm():
    ds = gen_dataset(1, 1, 0, "normalized_gaussian")
    assert abs(ds.X[0, 0]) == 1.0


def test_gen_dataset_is_deterministic():
    for kind in ("sphere_interior", "normalized_gaussian"):
        a, b = gen_dataset(5, 4, 11, kind), gen_dataset(5, 4, 11, kind)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_gen_dataset_rejects_empty():
    with pytest.raises(ParameterDomainError):
        gen_dataset(0, 3, 0)
    with pytest.raises(ParameterDomainError):
        gen_dataset(3, 0, 0)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 12),
    d=st.integers(1, 12),
    seed=st.integers(0, 2**32 - 1),
    kind=st.sampled_from(["sphere_interior", "normalized_gaussian"]),
)
@example(n=1, d=8, seed=2000000, kind="normalized_gaussian")  # batched norm rounded to 1 + ulp
def test_dataset_invariants_hold_for_any_seed(n, d, seed, kind):
    ds = gen_dataset(n, d, seed, kind)
    norms = np.linalg.norm(ds.X, axis=1)
    assert ds.X.shape == (n, d)
    assert np.all(norms <= 1.0)
    assert np.all(norms > 0)
    assert np.all(np.abs(ds.y) <= 1.0)
    if kind == "normalized_gaussian":
        np.testing.assert_allclose(norms, 1.0, rtol=0, atol=1e-15)


def test_dataset_validation():
    with pytest.raises(ParameterDomainError):
        Dataset(np.array([[1.5, 0.0]]), np.array([0.0]))
    with pytest.raises(ParameterDomainError):
        Dataset(np.array([[0.5, 0.0]]), np.array([1.5]))
    with pytest.raises(StructuralError):
        Dataset(np.array([[0.5, 0.0]]), np.array([0.0, 0.1]))


def test_dataset_is_read_only():
    ds = gen_dataset(2, 2, 0)
    with pytest.raises(ValueError):
        ds.X[0, 0] = 0.0


def test_init_standard_signs():
    s = init_standard(2, 4, 1.0, 1)
    assert set(np.unique(s.a)) <= {-1.0, 1.0}
    assert s.t == 0 and s.W.shape == (2, 4)


def test_init_standard_mean_within_standard_error():
    s = init_standard(5, 1000, 1.0, 2)
    assert abs(s.W.mean()) <= 4 / math.sqrt(5000)


def test_init_standard_zero_sigma():
    s = init_standard(3, 10, 0.0, 0)
    assert np.array_equal(s.W, np.zeros((3, 10)))


def test_init_rejects_odd_width():
    with pytest.raises(ParameterDomainError):
        init_standard(2, 3, 1.0, 0)
    with pytest.raises(ParameterDomainError):
        init_paired(2, 3, 1.0, 0)


def test_init_paired_two_neurons():
    s = init_paired(2, 2, 1.0, 3)
    assert tuple(s.a) in {(1.0, -1.0), (-1.0, 1.0)}
    assert np.array_equal(s.W[:, 0], s.W[:, 1])


def test_init_paired_columns_bitwise_equal():
    s = init_paired(1, 4, 1.0, 5)
    assert s.W[0, 0] == s.W[0, 1] and s.W[0, 2] == s.W[0, 3]
    assert s.a[0] == -s.a[1] and s.a[2] == -s.a[3]


def test_init_is_deterministic():
    for f in (init_standard, init_paired):
        a, b = f(3, 8, 0.5, 9), f(3, 8, 0.5, 9)
        assert np.array_equal(a.W, b.W) and np.array_equal(a.a, b.a)


def test_network_state_rejects_bad_signs():
    with pytest.raises(ParameterDomainError):
        NetworkState(np.zeros((2, 2)), np.array([1.0, 0.5]))


def test_state_roundtrip(tmp_path):
    s = init_standard(3, 6, 0.7, 4)
    path = tmp_path / "s.npz"
    s.save(path)
    back = NetworkState.load(path)
    assert np.array_equal(back.W, s.W) and np.array_equal(back.a, s.a) and back.t == s.t


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 10), d=st.integers(1, 10), seed=st.integers(0, 10**6))
def test_dataset_file_roundtrip_is_bit_exact(tmp_path_factory, n, d, seed):
    ds = gen_dataset(n, d, seed, "sphere_interior")
    path = tmp_path_factory.mktemp("ds") / "data.txt"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)


def test_label_file_overrides_labels(tmp_path):
    ds = gen_dataset(3, 2, 0)
    write_dataset(ds, tmp_path / "d.txt")
    (tmp_path / "y.txt").write_text("0.5\n-0.25\n1\n")
    back = read_dataset(tmp_path / "d.txt", tmp_path / "y.txt")
    assert np.array_equal(back.y, [0.5, -0.25, 1.0])
    (tmp_path / "bad.txt").write_text("0.5\n")
    with pytest.raises(StructuralError):
        read_dataset(tmp_path / "d.txt", tmp_path / "bad.txt")


def test_kernel_matrix_requires_symmetric_square():
    with pytest.raises(StructuralError):
        KernelMatrix(np.zeros((2, 3)), "dis")
    with pytest.raises(ParameterDomainError):
        KernelMatrix(np.eye(2), "unknown")


def test_theory_B_formula():
    assert theory_B(11.0, 0.5, 8, 0.05) == 11.0 * 0.5 * math.sqrt(math.log(160.0))


def test_prescribed_step_size_and_iterations():
    lam, m, n, B = 0.07, 4000, 8, 1.0
    eta = prescribed_eta(lam, m, n, B)
    assert eta == 0.01 * lam / (m * n**2 * math.exp(4 * B))
    assert prescribed_iterations(lam, m, eta, n, 0.01) == math.ceil(math.log(800.0) / (m * eta * lam))


def test_hyperparams_domain_checks():
    with pytest.raises(ParameterDomainError):
        HyperParams(n=4, d=2, m=4, C=10.0)
    with pytest.raises(ParameterDomainError):
        HyperParams(n=4, d=2, m=4, delta=0.2)
    with pytest.raises(ParameterDomainError):
        HyperParams(n=4, d=2, m=4, R=0.02)
    with pytest.raises(ParameterDomainError):
        HyperParams(n=4, d=2, m=4, b_source="theory", B=1.0)
    with pytest.raises(PreconditionError):
        HyperParams(n=4, d=2, m=4, B=0.001, R=0.005)
    with pytest.raises(ParameterDomainError):
        HyperParams(n=4, d=2, m=4, B=1.0, lam=0.1, eta=1e-3)


def test_hyperparams_resolution():
    ds = gen_dataset(4, 3, 0)
    s0 = init_paired(3, 10, 0.5, 0)
    hp = HyperParams(n=4, d=3, m=10, sigma=0.5).resolved(0.2, s0, ds)
    assert hp.B == empirical_B(s0, ds)
    assert hp.eta == prescribed_eta(0.2, 10, 4, hp.B)
    assert hp.T == prescribed_iterations(0.2, 10, hp.eta, 4, hp.eps)
    assert HyperParams.from_dict(hp.to_dict()) == hp
    theory = HyperParams(n=4, d=3, m=10, sigma=0.5, b_source="theory").resolved(0.2)
    assert theory.B == theory_B(11.0, 0.5, 4, 0.05)


@settings(max_examples=40, deadline=None)
@given(
    C=st.floats(10.01, 50),
    sigma=st.floats(0.01, 3),
    n=st.integers(1, 200),
    delta=st.floats(0.001, 0.099),
)
def test_theory_B_is_monotone(C, sigma, n, delta):
    b = theory_B(C, sigma, n, delta)
    assert theory_B(C * 1.1, sigma, n, delta) >= b
    assert theory_B(C, sigma * 1.1, n, delta) >= b
    assert theory_B(C, sigma, n + 1, delta) >= b
    assert theory_B(C, sigma, n, delta / 2) >= b


def test_trace_enforces_order_and_finite_loss():
    tr = TrainTrace()
    tr.append(t=0, loss=1.0)
    with pytest.raises(StructuralError):
        tr.append(t=2, loss=0.5)
    with pytest.raises(ParameterDomainError):
        tr.append(t=1, loss=float("nan"))
    with pytest.raises(ParameterDomainError):
        tr.append(t=1, loss=-1.0)
    tr.append(t=1, loss=0.5)
    assert tr.t == [0, 1] and math.isnan(tr.ratio[1])

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radkit.errors import ContractViolation, ValidationError
from radkit.theory import (
    amplification_demo,
    build_toy,
    check_cosine_euclidean_bridge,
    check_dominance,
    check_nonexpansive,
    check_saturation,
    check_sv_inequality,
    jacobi_singular_values,
    orthonormal_columns,
    reconstruction_residuals,
    require_all_passed,
    run_all_checks,
)


# --- Jacobi SVD ---------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    rows=st.integers(1, 20),
    cols=st.integers(1, 20),
)
def test_jacobi_matches_lapack_oracle(seed, rows, cols):
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((rows, cols))
    if seed % 3 == 0 and cols >= 2:
        matrix[:, -1] = matrix[:, 0]  # force rank deficiency
    ours = jacobi_singular_values(matrix)
    lapack = np.linalg.svd(matrix, compute_uv=False)
    expected = np.zeros(cols)
    expected[: lapack.size] = lapack[:cols]
    np.testing.assert_allclose(ours, expected, atol=1e-10 * max(1.0, expected[0]))


def test_jacobi_identity():
    np.testing.assert_allclose(jacobi_singular_values(np.eye(6)), np.ones(6))


def test_jacobi_rejects_empty():
    with pytest.raises(ValidationError):
        jacobi_singular_values(np.empty((0, 0)))


# --- retrieval-side lemmas ------------------------------------------------------


def test_nonexpansive_with_origin_memory():
    # gamma = {0}: the score is the norm, and the triangle inequality gives
    # | ||u|| - ||v|| | <= ||u - v||
    rng = np.random.default_rng(0)
    us = rng.standard_normal((500, 16))
    vs = rng.standard_normal((500, 16))
    violation = check_nonexpansive(np.zeros((1, 16)), us, vs)
    assert violation <= 1e-12


def test_nonexpansive_identical_pairs_have_zero_gap():
    rng = np.random.default_rng(1)
    memory = rng.standard_normal((32, 8))
    us = rng.standard_normal((50, 8))
    assert check_nonexpansive(memory, us, us) == 0.0


def test_nonexpansive_random_pairs():
    rng = np.random.default_rng(2)
    memory = rng.standard_normal((256, 64))
    us = rng.standard_normal((1000, 64))
    vs = us + rng.standard_normal((1000, 64)) * rng.random((1000, 1))
    assert check_nonexpansive(memory, us, vs) <= 1e-9


def test_saturation_exact_zero_in_double():
    rng = np.random.default_rng(3)
    memory = rng.standard_normal((128, 32))
    assert check_saturation(memory) == 0.0


def test_saturation_of_perturbed_point_bounded_by_delta():
    # non-expansiveness corollary: moving a stored point by delta after
    # banking scores it at most ||delta||
    rng = np.random.default_rng(4)
    memory = rng.standard_normal((64, 16))
    delta = 1e-3 * rng.standard_normal(16)
    from radkit.retrieval import distance_to_set

    moved = memory[10] + delta
    assert distance_to_set(moved, memory)[0] <= np.linalg.norm(delta) + 1e-15


def test_dominance_equal_sets_zero_everywhere():
    rng = np.random.default_rng(5)
    memory = rng.standard_normal((40, 8))
    samples = rng.standard_normal((100, 8))
    assert check_dominance(memory, memory, samples) == 0.0


def test_dominance_far_point_strictly_helps_nearby():
    rng = np.random.default_rng(6)
    memory = rng.standard_normal((20, 4))
    far = np.full((1, 4), 50.0)
    superset = np.concatenate([memory, far])
    near_far = far + rng.standard_normal((10, 4))
    worst = check_dominance(memory, superset, near_far)
    assert worst <= 0.0
    from radkit.retrieval import distance_to_set

    assert distance_to_set(near_far[0], superset)[0] < distance_to_set(near_far[0], memory)[0]


def test_dominance_rejects_non_superset():
    rng = np.random.default_rng(7)
    memory = rng.standard_normal((10, 4))
    with pytest.raises(ValidationError, match="superset"):
        check_dominance(memory, memory[:5], rng.standard_normal((5, 4)))


def test_dominance_random_nested_sets():
    rng = np.random.default_rng(8)
    memory = rng.standard_normal((100, 16))
    superset = np.concatenate([memory, rng.standard_normal((50, 16))])
    samples = rng.standard_normal((1000, 16))
    assert check_dominance(memory, superset, samples) <= 1e-9


# --- singular value inequality ---------------------------------------------------


def test_sv_inequality_identity_slack_zero():
    identity = np.eye(5)
    sigma_max_a = jacobi_singular_values(identity)[0]
    sigma_min_b = jacobi_singular_values(identity)[-1]
    sigma_min_ab = jacobi_singular_values(identity @ identity)[-1]
    assert sigma_min_ab == pytest.approx(sigma_max_a * sigma_min_b)


def test_sv_inequality_zero_column_forces_zero():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((6, 6))
    b = rng.standard_normal((6, 4))
    b[:, 2] = 0.0
    assert jacobi_singular_values(b)[-1] <= 1e-12
    assert jacobi_singular_values(a @ b)[-1] <= 1e-9 * jacobi_singular_values(a @ b)[0]


def test_sv_inequality_random_trials():
    assert check_sv_inequality(trials=100, max_dim=16, seed=10) <= 1e-9


# --- amplification demo ------------------------------------------------------------


def test_identity_bottleneck_regime():
    report = amplification_demo(12, 12, 4, 64, seed=0, compression=1.0)
    assert report.eta <= 1e-8
    assert report.bound == pytest.approx(1.0, abs=1e-8)
    assert report.sigma_max_decoder >= 1.0 - 1e-8
    assert report.bound_satisfied
    assert report.delta_app <= 1e-10


def test_compressed_bottleneck_forces_decoder_gain():
    report = amplification_demo(32, 8, 4, 256, seed=1, compression=0.01)
    assert report.eta <= 0.1
    assert not report.degenerate
    assert report.sigma_max_decoder >= report.bound - 1e-9
    assert report.sigma_max_decoder >= 90.0
    assert report.delta_app > 0.0


def test_bound_holds_across_seeds_and_shapes():
    for seed in range(6):
        report = amplification_demo(
            24, 6 + seed % 3, 3, 128, seed=seed, compression=0.05
        )
        assert report.degenerate or report.sigma_max_decoder >= report.bound - 1e-9


def test_residuals_equal_reconstruction_gaps():
    report = amplification_demo(16, 6, 3, 64, seed=2, compression=0.1)
    toy = report.toy
    # recompute row by row, independently of the library routine
    recon = toy.reconstruction
    expected = np.array(
        [np.linalg.norm(recon @ x - x) for x in toy.normal_set]
    )
    np.testing.assert_allclose(report.alpha, expected, atol=1e-12)
    np.testing.assert_allclose(
        reconstruction_residuals(toy), expected, atol=1e-12
    )
    assert report.delta_app == pytest.approx(expected.mean())


def test_toy_benign_basis_is_orthonormal():
    toy = build_toy(20, 8, 4, 64, seed=3, compression=0.02)
    gram = toy.benign_basis.T @ toy.benign_basis
    np.testing.assert_allclose(gram, np.eye(4), atol=1e-10)


def test_toy_dimension_validation():
    with pytest.raises(ValidationError):
        build_toy(8, 10, 2, 32, seed=0)  # bottleneck wider than ambient


def test_orthonormal_columns_shape_and_orthogonality():
    basis = orthonormal_columns(np.random.default_rng(4), 10, 6)
    np.testing.assert_allclose(basis.T @ basis, np.eye(6), atol=1e-12)


# --- bridge + aggregate runner -------------------------------------------------------


def test_cosine_euclidean_bridge():
    assert check_cosine_euclidean_bridge(samples=500, dim=48, seed=5) <= 1e-6


def test_run_all_checks_passes_and_schema():
    records = run_all_checks(seed=0, trials=50, pair_samples=200, memory_size=64, dim=16)
    assert {r["check"] for r in records} == {
        "nonexpansive",
        "saturation",
        "dominance",
        "singular_value_inequality",
        "decoder_amplification",
        "cosine_euclidean_bridge",
    }
    for r in records:
        assert set(r) == {"check", "max_slack", "tolerance", "passed"}
        assert r["passed"]
    require_all_passed(records)


def test_injected_bug_fails_loudly():
    records = run_all_checks(
        seed=0, trials=20, pair_samples=100, memory_size=32, dim=8, inject_bug=True
    )
    assert any(not r["passed"] for r in records)
    with pytest.raises(ContractViolation):
        require_all_passed(records)

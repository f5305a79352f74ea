import math

import numpy as np
import pytest

from cadrepair.metrics import (
    BadSigma,
    EmptyPopulation,
    EmptyScores,
    MmdConfig,
    SourceTag,
    TooFewPoints,
    TooFewRows,
    feasibility_rate,
    jsd,
    median_heuristic_sigma,
    mmd,
    mmd_histogram,
    pca_2d,
    rbf_kernel,
)


# ---------------------------------------------------------------- feasibility rate


def test_feasibility_rate_reference_counts():
    # two published count pairs for the same benchmark round to different
    # rates; both are asserted from the raw counts
    assert abs(feasibility_rate(7707, 808) - 0.90511) < 1e-5
    assert abs(feasibility_rate(8239, 276) - 0.96759) < 1e-5


def test_feasibility_rate_boundaries():
    assert feasibility_rate(0, 5) == 0.0
    assert feasibility_rate(5, 0) == 1.0
    with pytest.raises(EmptyPopulation):
        feasibility_rate(0, 0)
    with pytest.raises(ValueError):
        feasibility_rate(-1, 5)


def test_feasibility_rate_monotone_in_valid_count():
    rates = [feasibility_rate(v, 10) for v in range(0, 50, 5)]
    assert all(b > a for a, b in zip(rates, rates[1:]))
    assert all(0.0 <= r <= 1.0 for r in rates)


# ---------------------------------------------------------------- RBF kernel


def test_rbf_identical_points():
    assert rbf_kernel([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], sigma=0.7) == 1.0


def test_rbf_at_one_sigma():
    assert math.isclose(rbf_kernel([0, 0, 0], [0.5, 0, 0], sigma=0.5), math.exp(-0.5), rel_tol=1e-12)


def test_rbf_monotone_decreasing():
    values = [rbf_kernel([0, 0, 0], [d, 0, 0], sigma=1.0) for d in np.linspace(0, 3, 10)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_rbf_bad_sigma():
    with pytest.raises(BadSigma):
        rbf_kernel([0, 0, 0], [1, 0, 0], sigma=0.0)


# ---------------------------------------------------------------- median heuristic


def test_median_two_points():
    x = np.array([[0.0, 0.0, 0.0]])
    y = np.array([[3.0, 4.0, 0.0]])
    assert median_heuristic_sigma(x, y) == 5.0


def test_median_identical_points_fallback():
    cloud = np.zeros((10, 3))
    assert median_heuristic_sigma(cloud, cloud) == 1.0


def test_median_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.normal(size=(60, 3))
        y = rng.normal(size=(40, 3))
        pooled = np.vstack([x, y])
        dists = sorted(
            float(np.linalg.norm(pooled[i] - pooled[j]))
            for i in range(len(pooled))
            for j in range(i + 1, len(pooled))
        )
        k = len(dists)
        oracle = dists[k // 2] if k % 2 else 0.5 * (dists[k // 2 - 1] + dists[k // 2])
        assert math.isclose(median_heuristic_sigma(x, y), oracle, rel_tol=1e-9)


def test_median_too_few_points():
    with pytest.raises(TooFewPoints):
        median_heuristic_sigma(np.zeros((1, 3)), np.zeros((0, 3)))


def test_median_subsample_above_limit_deterministic():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1500, 3))
    y = rng.normal(size=(1500, 3))
    assert median_heuristic_sigma(x, y) == median_heuristic_sigma(x, y)


# ---------------------------------------------------------------- MMD


def mmd_oracle(x, y, sigma):
    m, n = len(x), len(y)

    def k(a, b):
        d = a - b
        return math.exp(-float(d @ d) / (2.0 * sigma * sigma))

    kxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m)) / (m * m)
    kyy = sum(k(y[i], y[j]) for i in range(n) for j in range(n)) / (n * n)
    kxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) * 2.0 / (m * n)
    return math.sqrt(max(kxx + kyy - kxy, 0.0))


def test_mmd_identical_clouds_is_zero():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 3))
    assert mmd(x, x.copy()) <= 1e-9


def test_mmd_hand_case():
    x = np.array([[0.0, 0.0, 0.0]])
    y = np.array([[1.0, 0.0, 0.0]])
    expected = math.sqrt(2.0 - 2.0 * math.exp(-0.5))
    assert abs(mmd(x, y, MmdConfig(sigma=1.0)) - expected) < 1e-9


def test_mmd_symmetric_bitwise():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(17, 3))
    y = rng.normal(size=(23, 3)) + 0.5
    cfg = MmdConfig(sigma=0.8)
    assert mmd(x, y, cfg) == mmd(y, x, cfg)


def test_mmd_matches_double_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(12):
        m = int(rng.integers(1, 65))
        n = int(rng.integers(1, 65))
        x = rng.normal(size=(m, 3))
        y = rng.normal(size=(n, 3)) + rng.normal(scale=0.5, size=3)
        sigma = float(rng.uniform(0.3, 2.0))
        assert abs(mmd(x, y, MmdConfig(sigma=sigma)) - mmd_oracle(x, y, sigma)) < 1e-12


def test_mmd_translation_invariance():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 3))
    y = rng.normal(size=(30, 3))
    shift = np.array([10.0, -4.0, 2.5])
    cfg = MmdConfig(sigma=1.0)
    assert abs(mmd(x, y, cfg) - mmd(x + shift, y + shift, cfg)) < 1e-12


def test_mmd_empty_cloud_raises():
    with pytest.raises(TooFewPoints):
        mmd(np.zeros((0, 3)), np.zeros((5, 3)))


def test_mmd_config_validates_sigma():
    with pytest.raises(BadSigma):
        MmdConfig(sigma=-1.0)


# ---------------------------------------------------------------- JSD


def test_jsd_identical_clouds():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(200, 3))
    assert jsd(x, x.copy()) == 0.0


def test_jsd_disjoint_halves_is_one():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.0, 0.4, size=(300, 3))
    y = rng.uniform(0.6, 1.0, size=(300, 3))
    assert math.isclose(jsd(x, y, bins_per_axis=8), 1.0, rel_tol=1e-12)


def test_jsd_bounded():
    rng = np.random.default_rng(8)
    for _ in range(10):
        x = rng.normal(size=(100, 3))
        y = rng.normal(loc=rng.uniform(-1, 1), size=(120, 3))
        value = jsd(x, y)
        assert 0.0 <= value <= 1.0


def test_jsd_degenerate_axis():
    x = np.column_stack([np.linspace(0, 1, 50), np.zeros(50), np.zeros(50)])
    y = x.copy()
    assert jsd(x, y) == 0.0


# ---------------------------------------------------------------- histogram


def test_histogram_single_score():
    hist = mmd_histogram([0.37], bins=16)
    assert hist.counts.sum() == 1
    assert hist.counts[-1] == 1
    assert hist.edges[0] == 0.0
    assert math.isclose(hist.edges[-1], 0.37)


def test_histogram_counts_sum():
    rng = np.random.default_rng(9)
    scores = rng.uniform(0, 1, 137)
    hist = mmd_histogram(scores)
    assert hist.counts.sum() == 137
    assert len(hist.counts) == 16


def test_histogram_hand_fixture():
    hist = mmd_histogram([0.1, 0.2, 0.4, 0.8], bins=4)
    np.testing.assert_array_equal(hist.counts, [1, 1, 1, 1])
    np.testing.assert_allclose(hist.edges, [0.0, 0.2, 0.4, 0.6, 0.8])


def test_histogram_empty_raises():
    with pytest.raises(EmptyScores):
        mmd_histogram([])


def test_histogram_all_zero_scores():
    hist = mmd_histogram([0.0, 0.0], bins=4)
    assert hist.counts.sum() == 2
    assert hist.edges[-1] == 1.0  # degenerate range guard


# ---------------------------------------------------------------- PCA


def power_iteration_top2(cov, iters=2000, seed=0):
    rng = np.random.default_rng(seed)
    comps = []
    deflated = cov.copy()
    for _ in range(2):
        v = rng.normal(size=len(cov))
        v /= np.linalg.norm(v)
        for _ in range(iters):
            v = deflated @ v
            norm = np.linalg.norm(v)
            if norm == 0:
                break
            v /= norm
        lam = float(v @ cov @ v)
        comps.append(v.copy())
        deflated = deflated - lam * np.outer(v, v)
    return np.array(comps)


def principal_angles(a, b):
    sv = np.linalg.svd(a @ b.T, compute_uv=False)
    return np.arccos(np.clip(sv, -1.0, 1.0))


def test_pca_components_orthonormal():
    rng = np.random.default_rng(10)
    latents = rng.normal(size=(200, 21))
    proj = pca_2d(latents, [SourceTag.BASELINE] * 200)
    gram = proj.components @ proj.components.T
    np.testing.assert_allclose(gram, np.eye(2), atol=1e-9)


def test_pca_rank_one_data():
    rng = np.random.default_rng(11)
    direction = rng.normal(size=21)
    latents = np.outer(rng.normal(size=100), direction)
    proj = pca_2d(latents, [SourceTag.GROUND_TRUTH] * 100)
    assert proj.explained_variance[0] > 0.999
    assert proj.explained_variance[0] >= proj.explained_variance[1] >= 0.0


def test_pca_matches_power_iteration_oracle():
    rng = np.random.default_rng(12)
    latents = rng.normal(size=(300, 21)) @ np.diag(rng.uniform(0.2, 3.0, 21))
    proj = pca_2d(latents, [SourceTag.BASELINE] * 300)
    centered = latents - latents.mean(axis=0)
    cov = centered.T @ centered / (len(latents) - 1)
    oracle = power_iteration_top2(cov)
    angles = principal_angles(proj.components, oracle)
    assert angles.max() < 1e-6


def test_pca_sign_convention():
    rng = np.random.default_rng(13)
    latents = rng.normal(size=(50, 21))
    proj = pca_2d(latents, [SourceTag.BASELINE] * 50)
    for row in proj.components:
        assert row[np.argmax(np.abs(row))] > 0.0


def test_pca_projection_non_expansive():
    rng = np.random.default_rng(14)
    latents = rng.normal(size=(80, 21))
    proj = pca_2d(latents, [SourceTag.BASELINE] * 80)
    for _ in range(100):
        i, j = rng.integers(0, 80, 2)
        d2 = np.linalg.norm(proj.coords[i] - proj.coords[j])
        dfull = np.linalg.norm(latents[i] - latents[j])
        assert d2 <= dfull + 1e-9


def test_pca_reconstruction_error_equals_trailing_eigenvalues():
    rng = np.random.default_rng(15)
    latents = rng.normal(size=(120, 21)) @ np.diag(rng.uniform(0.1, 2.0, 21))
    proj = pca_2d(latents, [SourceTag.BASELINE] * 120)
    centered = latents - latents.mean(axis=0)
    resid = centered - proj.coords @ proj.components
    per_sample = (resid**2).sum() / (len(latents) - 1)
    eigvals = np.linalg.eigvalsh(centered.T @ centered / (len(latents) - 1))
    trailing = eigvals[:-2].sum()
    assert abs(per_sample - trailing) < 1e-8


def test_pca_too_few_rows():
    with pytest.raises(TooFewRows):
        pca_2d(np.zeros((2, 21)), [SourceTag.BASELINE] * 2)


def test_pca_tag_count_must_match():
    with pytest.raises(ValueError):
        pca_2d(np.zeros((5, 21)), [SourceTag.BASELINE] * 4)

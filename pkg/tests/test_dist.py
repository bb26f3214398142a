import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wotlab.dist import (DistributionError, Empirical, Gaussian, GaussianMixture, GroupedSamples, SampleBatch,
                         SwissRoll, UniformSquare, eight_gaussians, empirical_moments, four_gaussians,
                         isotropic_gaussian, mixture_1d, sample, spec_digest, spec_from_dict, spec_to_dict)
from wotlab.rng import derive_seed, stream


def test_point_mass_sampling():
    batch = sample(Empirical(((3.0,),), (1.0,)), 5, seed=0)
    np.testing.assert_array_equal(batch.points, np.full((5, 1), 3.0))


def test_gaussian_law_of_large_numbers():
    # tolerances calibrated by Monte Carlo: std of the mean is 1/sqrt(n) ~ 0.003,
    # std of the variance estimate is sqrt(2/n) ~ 0.0045
    batch = sample(Gaussian((0.0, 0.0), (1.0, 1.0)), 100_000, seed=7)
    mean, cov, _ = empirical_moments(batch)
    assert np.all(np.abs(mean) <= 0.02)
    assert np.all(np.abs(cov - 1.0) <= 0.05)


def test_gaussian_moments_within_five_over_sqrt_n():
    n = 100_000
    spec = Gaussian((1.0, -2.0, 0.5), (0.25, 4.0, 1.0))
    mean, cov, _ = empirical_moments(sample(spec, n, seed=3))
    tol = 5 / np.sqrt(n)
    # scale by the spread of each coordinate so the bound is unit-free
    assert np.all(np.abs(mean - spec.mean) <= tol * np.sqrt(spec.cov_diag))
    assert np.all(np.abs(cov - spec.cov_diag) <= tol * np.sqrt(2) * np.asarray(spec.cov_diag))


def test_mixture_component_frequencies():
    n = 50_000
    spec = GaussianMixture((Gaussian((-100.0,), (1.0,)), Gaussian((0.0,), (1.0,)), Gaussian((100.0,), (1.0,))),
                           (0.2, 0.5, 0.3))
    pts = sample(spec, n, seed=11).points[:, 0]
    freq = np.array([(pts < -50).mean(), ((pts > -50) & (pts < 50)).mean(), (pts > 50).mean()])
    w = np.array(spec.weights)
    assert np.all(np.abs(freq - w) <= 4 * np.sqrt(w * (1 - w) / n))


def test_determinism_and_seed_sensitivity():
    spec = eight_gaussians()
    a, b = sample(spec, 100, 42), sample(spec, 100, 42)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.spec_digest == b.spec_digest
    assert not np.array_equal(a.points, sample(spec, 100, 43).points)


def test_streams_are_independent_per_purpose():
    a = stream(1, "x").standard_normal(5)
    b = stream(1, "y").standard_normal(5)
    assert not np.allclose(a, b)
    assert derive_seed(1, "x") == derive_seed(1, "x") != derive_seed(1, "y")


def test_empirical_moments_examples():
    mean, cov, second = empirical_moments(SampleBatch.of([[0.0], [2.0]]))
    assert mean == pytest.approx([1.0]) and cov == pytest.approx([2.0]) and second == pytest.approx(2.0)
    _, cov, _ = empirical_moments(SampleBatch.of(np.ones((4, 3))))
    np.testing.assert_array_equal(cov, 0.0)
    mean, _, second = empirical_moments(SampleBatch.of([[-1.0], [1.0]]))
    assert mean == pytest.approx([0.0]) and second == pytest.approx(1.0)


def test_empirical_moments_needs_two_points():
    with pytest.raises(DistributionError):
        empirical_moments(SampleBatch.of([[1.0]]))


@pytest.mark.parametrize("make", [
    lambda: Gaussian((0.0,), (0.0,)),
    lambda: Gaussian((0.0, 1.0), (1.0,)),
    lambda: GaussianMixture((), ()),
    lambda: GaussianMixture((Gaussian((0.0,), (1.0,)),), (0.9,)),
    lambda: GaussianMixture((Gaussian((0.0,), (1.0,)), Gaussian((0.0, 0.0), (1.0, 1.0))), (0.5, 0.5)),
    lambda: SwissRoll(dim=3),
    lambda: UniformSquare((0.0,), (0.0,)),
    lambda: Empirical(((1.0,), (2.0,)), (0.5, 0.6)),
    lambda: Empirical(((1.0,), (2.0,)), (-0.5, 1.5)),
])
def test_invalid_specs_rejected(make):
    with pytest.raises(DistributionError):
        make()


def test_sample_rejects_nonpositive_n():
    with pytest.raises(DistributionError):
        sample(isotropic_gaussian(2, 1.0), 0, 0)


def test_sample_batch_rejects_nan():
    with pytest.raises(DistributionError):
        SampleBatch.of([[np.nan]])


def test_swiss_roll_radius_and_uniform_bounds():
    pts = sample(SwissRoll(scale=2.0), 2000, 0).points
    r = np.linalg.norm(pts, axis=1)
    assert r.min() >= 2.0 * 1.5 / 4.5 - 1e-12 and r.max() <= 2.0 + 1e-12
    u = sample(UniformSquare((-1.0, 0.0), (1.0, 3.0)), 2000, 0).points
    assert np.all(u >= [-1.0, 0.0]) and np.all(u <= [1.0, 3.0])


@pytest.mark.parametrize("spec", [
    isotropic_gaussian(2, 0.5), eight_gaussians(), four_gaussians(), mixture_1d((-1.0, 1.0)),
    SwissRoll(2.5, 0.1), UniformSquare((-1.0, -1.0), (1.0, 1.0)), Empirical(((0.0, 1.0), (2.0, 3.0))),
])
def test_spec_dict_round_trip(spec):
    back = spec_from_dict(spec_to_dict(spec))
    assert back == spec
    assert spec_digest(back) == spec_digest(spec)


def test_unknown_spec_type():
    with pytest.raises(DistributionError):
        spec_from_dict({"type": "Cauchy"})


def test_grouped_samples_shapes():
    g = GroupedSamples(np.zeros((3, 2)), np.arange(12.0).reshape(3, 2, 2))
    assert g.per_input == 2 and g.flat().n == 6
    np.testing.assert_allclose(g.conditional_means()[0], [1.0, 2.0])
    with pytest.raises(DistributionError):
        GroupedSamples(np.zeros((3, 2)), np.zeros((2, 2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_moments_match_numpy(values):
    batch = SampleBatch.of(np.asarray(values)[:, None])
    mean, cov, second = empirical_moments(batch)
    assert mean[0] == pytest.approx(np.mean(values), abs=1e-9)
    assert cov[0] == pytest.approx(np.var(values, ddof=1), rel=1e-9, abs=1e-6)
    assert second == pytest.approx(np.mean(np.square(values)), rel=1e-12)

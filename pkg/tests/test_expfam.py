import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfjacd import expfam as ef
from cfjacd.expfam import BgNat, Categorical, GaussianMoment, GaussianNat

from oracles import bg_product_quadrature, categorical_product, cn_density, complex_grid, random_pd


def scalar_bg(lam, mu, var):
    return ef.bg_from_moments(lam, GaussianMoment([mu], [[var]]))


# --- Gaussian conversions -------------------------------------------------


def test_to_natural_identity():
    n = ef.gauss_to_natural(GaussianMoment(np.zeros(2), np.eye(2)))
    np.testing.assert_allclose(n.gamma, 0)
    np.testing.assert_allclose(n.lam, np.eye(2))


def test_to_natural_scalar():
    n = ef.gauss_to_natural(GaussianMoment([1 + 1j], [[2]]))
    np.testing.assert_allclose(n.gamma, [0.5 + 0.5j])
    np.testing.assert_allclose(n.lam, [[0.5]])


def test_to_natural_singular():
    with pytest.raises(ef.SingularMatrix):
        ef.gauss_to_natural(GaussianMoment([0, 0], np.ones((2, 2))))


def test_to_moment_cases():
    m = ef.gauss_to_moment(GaussianNat(np.zeros(3), np.eye(3)))
    np.testing.assert_allclose(m.mu, 0)
    np.testing.assert_allclose(m.cov, np.eye(3))
    m = ef.gauss_to_moment(GaussianNat([2], [[4]]))
    np.testing.assert_allclose(m.mu, [0.5])
    np.testing.assert_allclose(m.cov, [[0.25]])
    with pytest.raises(ef.NotProper):
        ef.gauss_to_moment(GaussianNat.identity(1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_natural_moment_round_trip(seed):
    rng = np.random.default_rng(seed)
    cov = random_pd(rng, 3)
    mu = rng.normal(size=3) + 1j * rng.normal(size=3)
    back = ef.gauss_to_moment(ef.gauss_to_natural(GaussianMoment(mu, cov)))
    np.testing.assert_allclose(back.mu, mu, atol=1e-10)
    np.testing.assert_allclose(back.cov, cov, atol=1e-10)


def test_logpdf_scalar_values():
    assert ef.gauss_logpdf([0], GaussianMoment([0], [[1]])) == pytest.approx(np.log(1 / np.pi))
    assert ef.gauss_logpdf([1], GaussianMoment([0], [[1]])) == pytest.approx(np.log(1 / np.pi) - 1)


def test_logpdf_normalizes_in_two_dims():
    # C^2 = R^4: trapezoid rule on a product grid, one z2 slice at a time.
    from cfjacd import linalg

    cov = np.array([[1.0, 0.3 + 0.2j], [0.3 - 0.2j, 0.8]])
    mu = np.array([0.2 - 0.1j, -0.3 + 0.4j])
    axis = np.arange(-6.0, 6.0 + 1e-9, 0.3)
    pts = (axis[:, None] + 1j * axis[None, :]).ravel()
    da = 0.3**2
    total = 0.0
    for z2 in pts:
        x = np.stack([pts, np.full_like(pts, z2)], axis=-1)
        total += np.exp(linalg.cn_logpdf(x, mu, cov)).sum() * da * da
    assert total == pytest.approx(1.0, abs=1e-6)
    assert ef.gauss_logpdf(mu, GaussianMoment(mu, cov)) == pytest.approx(
        -2 * np.log(np.pi) - np.log(np.linalg.det(cov).real)
    )


def test_logpdf_singular():
    with pytest.raises(ef.SingularMatrix):
        ef.gauss_logpdf([0, 0], GaussianMoment([0, 0], np.zeros((2, 2))))


# --- Gaussian product / quotient -----------------------------------------


def test_standard_product_against_quadrature():
    a = ef.gauss_to_natural(GaussianMoment([0], [[1]]))
    prod, log_z = ef.gauss_multiply(a, a)
    m = ef.gauss_to_moment(prod)
    assert m.cov[0, 0].real == pytest.approx(0.5)
    assert abs(m.mu[0]) < 1e-15
    z, da = complex_grid([0], 1.0, 1.0)
    mass = np.sum(cn_density(z, 0, 1) ** 2) * da
    assert log_z == pytest.approx(np.log(mass), rel=1e-10)
    assert log_z == pytest.approx(np.log(1 / (2 * np.pi)))


def test_product_with_identity():
    a = ef.gauss_to_natural(GaussianMoment([1 - 2j], [[3]]))
    prod, log_z = ef.gauss_multiply(a, GaussianNat.identity(1))
    np.testing.assert_allclose(prod.gamma, a.gamma)
    np.testing.assert_allclose(prod.lam, a.lam)
    assert log_z is None


def test_product_associative_and_symmetric():
    rng = np.random.default_rng(3)
    a, b, c = (
        ef.gauss_to_natural(GaussianMoment(rng.normal(size=2) + 1j, random_pd(rng, 2)))
        for _ in range(3)
    )
    ab_c, _ = ef.gauss_multiply(ef.gauss_multiply(a, b)[0], c)
    a_bc, _ = ef.gauss_multiply(a, ef.gauss_multiply(b, c)[0])
    np.testing.assert_allclose(ab_c.gamma, a_bc.gamma, atol=1e-12)
    np.testing.assert_allclose(ab_c.lam, a_bc.lam, atol=1e-12)
    assert ef.gauss_multiply(a, b)[1] == pytest.approx(ef.gauss_multiply(b, a)[1], abs=1e-12)


def test_divide():
    rng = np.random.default_rng(4)
    a = ef.gauss_to_natural(GaussianMoment([0.3j, 1], random_pd(rng, 2)))
    b = ef.gauss_to_natural(GaussianMoment([2, -1j], random_pd(rng, 2)))
    q = ef.gauss_divide(a, a)
    np.testing.assert_allclose(q.gamma, 0)
    np.testing.assert_allclose(q.lam, 0)
    back = ef.gauss_divide(ef.gauss_multiply(a, b)[0], b)
    np.testing.assert_allclose(back.gamma, a.gamma, atol=1e-12)
    np.testing.assert_allclose(back.lam, a.lam, atol=1e-12)
    q = ef.gauss_divide(GaussianNat([3], [[2]]), GaussianNat([1], [[0.5]]))
    np.testing.assert_allclose(q.gamma, [2])
    np.testing.assert_allclose(q.lam, [[1.5]])


# --- Bernoulli-Gaussian ---------------------------------------------------


def test_bg_from_moments_half():
    b = scalar_bg(0.5, 0, 1)
    assert b.kappa == pytest.approx(np.log(np.pi))


def test_bg_degenerate():
    with pytest.raises(ef.DegenerateBernoulli):
        scalar_bg(1.0, 0, 1)
    with pytest.raises(ef.DegenerateBernoulli):
        scalar_bg(0.0, 0, 1)
    # approaching the boundary drives kappa towards -inf relative to A_G
    b = scalar_bg(1 - 1e-12, 0, 1)
    assert b.kappa - b.gauss.log_partition() < -27


@pytest.mark.parametrize("lam", [1e-6, 1e-3, 0.1, 0.3, 0.5, 0.9, 1 - 1e-3, 1 - 1e-6])
def test_activity_round_trip(lam):
    rng = np.random.default_rng(int(lam * 1e6))
    m = GaussianMoment(rng.normal(size=2) + 0.5j, random_pd(rng, 2))
    assert ef.bg_activity(ef.bg_from_moments(lam, m)) == pytest.approx(lam, rel=1e-10, abs=1e-16)


def test_activity_inverse_logit():
    g = ef.gauss_to_natural(GaussianMoment([0.5], [[2]]))
    a = g.log_partition()
    assert ef.bg_activity(BgNat(a, g)) == pytest.approx(0.5)
    assert ef.bg_activity(BgNat(a + np.log(9), g)) == pytest.approx(0.1)
    assert ef.bg_activity(BgNat(a + 1, g)) < ef.bg_activity(BgNat(a, g))
    with pytest.raises(ef.NotProper):
        ef.bg_activity(BgNat.identity(1))


def test_bg_product_figure_examples():
    # Two BG laws whose slabs barely overlap: the product is mostly the atom.
    a, b = scalar_bg(0.8, -2, 1), scalar_bg(0.9, 3, 1)
    p_far = ef.bg_activity(ef.bg_multiply(a, b)[0])
    assert p_far == pytest.approx(bg_product_quadrature(0.8, -2, 1, 0.9, 3, 1)[0], rel=1e-8)
    assert p_far < 1e-3
    # Overlapping slabs: the activity mass survives.
    c = scalar_bg(0.9, -3, 1)
    p_near = ef.bg_activity(ef.bg_multiply(a, c)[0])
    assert p_near == pytest.approx(bg_product_quadrature(0.8, -2, 1, 0.9, -3, 1)[0], rel=1e-8)
    assert p_near > 0.7


def test_bg_product_reduces_to_gaussian_lemma():
    p = 1 - 1e-12
    a, b = scalar_bg(p, 1 + 1j, 2.0), scalar_bg(p, -0.5, 0.7)
    prod, log_z = ef.bg_multiply(a, b)
    gprod, glog_z = ef.gauss_multiply(a.gauss, b.gauss)
    assert ef.bg_activity(prod) == pytest.approx(1.0, abs=1e-8)
    assert log_z == pytest.approx(glog_z, abs=1e-8)
    np.testing.assert_allclose(prod.gauss.lam, gprod.lam)


def test_bg_multiply_gaussian_matches_mixture_algebra():
    lam1, mu1, v1 = 0.35, 0.8 - 0.3j, 1.5
    mu2, v2 = -0.4 + 0.9j, 0.6
    a = scalar_bg(lam1, mu1, v1)
    g = ef.gauss_to_natural(GaussianMoment([mu2], [[v2]]))
    out = ef.bg_multiply_gaussian(a, g)
    assert out.kappa == a.kappa
    # (1 - lam) delta(x) CN(0|mu2,v2) + lam CN(x|mu1,v1) CN(x|mu2,v2), renormalized
    atom = (1 - lam1) * cn_density(0, mu2, v2)
    slab = lam1 * cn_density(0, mu1 - mu2, v1 + v2)
    v = 1 / (1 / v1 + 1 / v2)
    mu = v * (mu1 / v1 + mu2 / v2)
    p, m = ef.bg_to_moments(out)
    assert p == pytest.approx(slab / (slab + atom), rel=1e-12)
    np.testing.assert_allclose(m.mu, [mu], rtol=1e-12)
    np.testing.assert_allclose(m.cov, [[v]], rtol=1e-12)
    same = ef.bg_multiply_gaussian(a, GaussianNat.identity(1))
    assert same.kappa == a.kappa
    np.testing.assert_allclose(same.gauss.gamma, a.gauss.gamma)


def test_bg_divide():
    a, b = scalar_bg(0.3, 1j, 2), scalar_bg(0.6, -1, 0.5)
    q = ef.bg_divide(a, a)
    assert q.kappa == 0
    np.testing.assert_allclose(q.gauss.lam, 0)
    back = ef.bg_divide(ef.bg_multiply(a, b)[0], b)
    assert back.kappa == pytest.approx(a.kappa, abs=1e-12)
    np.testing.assert_allclose(back.gauss.gamma, a.gauss.gamma, atol=1e-12)
    np.testing.assert_allclose(back.gauss.lam, a.gauss.lam, atol=1e-12)
    q = ef.bg_divide(BgNat(2.0, GaussianNat([1j], [[3]])), BgNat(0.5, GaussianNat([1], [[1]])))
    assert q.kappa == 1.5
    np.testing.assert_allclose(q.gauss.gamma, [-1 + 1j])
    np.testing.assert_allclose(q.gauss.lam, [[2]])


def test_bg_density_normalizes():
    b = scalar_bg(0.37, 0.4 - 0.2j, 0.8)
    z, da = complex_grid([0.4 - 0.2j], np.sqrt(0.8), np.sqrt(0.8))
    z = z[np.abs(z) > 0]
    dens = np.exp([ef.bg_logpdf(x, b) for x in z.ravel()])
    np.testing.assert_allclose(dens, 0.37 * cn_density(z.ravel(), 0.4 - 0.2j, 0.8), rtol=1e-10)
    atom = np.exp(ef.bg_logpdf(0, b))
    assert atom == pytest.approx(0.63)
    assert atom + dens.sum() * da == pytest.approx(1.0, abs=1e-6)


# --- categorical ----------------------------------------------------------


def test_cat_combine_basic():
    u = Categorical.uniform([0, 1, 2])
    np.testing.assert_allclose(ef.cat_combine([u, u]).probs, 1 / 3)
    c = Categorical.from_probs([0, 1], [0.9, 0.1])
    np.testing.assert_allclose(ef.cat_combine([c, c]).probs, np.array([0.81, 0.01]) / 0.82)


def test_cat_combine_many():
    rng = np.random.default_rng(11)
    probs = rng.dirichlet(np.ones(4), size=10)
    msgs = [Categorical.from_probs("abcd", p) for p in probs]
    np.testing.assert_allclose(ef.cat_combine(msgs).probs, categorical_product(probs), atol=1e-12)


def test_cat_combine_mismatch():
    with pytest.raises(ef.SupportMismatch):
        ef.cat_combine([Categorical.uniform([0, 1]), Categorical.uniform([1, 0])])

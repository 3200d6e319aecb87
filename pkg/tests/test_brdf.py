import numpy as np
import pytest

from adaptivesl.brdf import (
    GgxParams,
    eval_ggx,
    ggx_shade,
    ggx_shade_vjp,
    normal_from_angles,
    shading_frame,
    shading_frame_vjp,
)
from adaptivesl.errors import DomainError


def rand_dir(rng, zmin=0.05):
    z = rng.uniform(zmin, 1.0)
    ph = rng.uniform(0, 2 * np.pi)
    s = np.sqrt(1 - z * z)
    return np.array([s * np.cos(ph), s * np.sin(ph), z])


def rand_params(rng, C=1):
    return GgxParams(
        diffuse_albedo=rng.uniform(0.05, 0.95, C),
        specular_albedo=rng.uniform(0.05, 0.95, C),
        alpha_x=rng.uniform(0.03, 0.5),
        alpha_y=rng.uniform(0.03, 0.5),
        normal_theta=rng.uniform(0, 0.6),
        normal_phi=rng.uniform(-np.pi, np.pi),
        tangent_angle=rng.uniform(0, np.pi),
    )


def test_pure_lambertian(rng):
    p = GgxParams(np.array([1.0]), np.array([0.0]), 0.1, 0.1, 0.0, 0.0, 0.0)
    for _ in range(10):
        f = eval_ggx(p, rand_dir(rng), rand_dir(rng))
        assert f[0] == pytest.approx(1 / np.pi, abs=1e-12)


def test_ndf_at_normal_incidence():
    # isotropic alpha, wi = wo = n: f_spec = F D G / 4 with F = G = 1
    for a in (0.05, 0.2, 0.45):
        p = GgxParams(np.array([0.0]), np.array([1.0]), a, a, 0.0, 0.0, 0.0)
        n = np.array([0.0, 0.0, 1.0])
        f = eval_ggx(p, n, n)
        assert 4 * f[0] == pytest.approx(1 / (np.pi * a * a), rel=1e-12)


def test_below_horizon_is_zero(rng):
    p = rand_params(rng)
    wi = rand_dir(rng)
    wi[2] = -abs(wi[2])
    wi /= np.linalg.norm(wi)
    # normal along +z here, so a wi below the plane must give 0
    p2 = GgxParams(p.diffuse_albedo, p.specular_albedo, p.alpha_x, p.alpha_y,
                   0.0, 0.0, p.tangent_angle)
    assert np.all(eval_ggx(p2, wi, rand_dir(rng)) == 0.0)


def test_nonnegative_everywhere(rng):
    for _ in range(200):
        p = rand_params(rng, C=2)
        f = eval_ggx(p, rand_dir(rng, -1.0), rand_dir(rng, -1.0))
        assert np.all(f >= 0.0)


def test_specular_reciprocity(rng):
    for _ in range(100):
        p = rand_params(rng)
        wi, wo = rand_dir(rng), rand_dir(rng)
        assert np.allclose(eval_ggx(p, wi, wo), eval_ggx(p, wo, wi), atol=1e-9)


def test_hemispherical_energy(rng):
    """Monte-Carlo check: integral of f (n.wi) dwi <= diffuse + specular + 0.05."""
    n_samples = 100_000
    for trial in range(3):
        p = rand_params(rng)
        wo = rand_dir(rng, 0.2)
        # uniform hemisphere sampling, pdf = 1/(2 pi)
        z = rng.uniform(0, 1, n_samples)
        phi = rng.uniform(0, 2 * np.pi, n_samples)
        s = np.sqrt(1 - z**2)
        wi = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
        n = p.normal()
        t, b = shading_frame(n, p.tangent_angle)
        wi_l = np.stack([wi @ t, wi @ b, wi @ n], axis=-1)
        wo_l = np.array([wo @ t, wo @ b, wo @ n])
        vals = ggx_shade(wi_l, wo_l, p.alpha_x, p.alpha_y,
                         p.specular_albedo, p.diffuse_albedo)
        integral = vals.mean() * 2 * np.pi
        assert integral <= p.diffuse_albedo[0] + p.specular_albedo[0] + 0.05


def test_channel_mismatch_rejected():
    with pytest.raises(DomainError):
        GgxParams(np.array([0.5, 0.5]), np.array([0.5]), 0.1, 0.1, 0.0, 0.0, 0.0)
    with pytest.raises(DomainError):
        GgxParams(np.array([0.5]), np.array([0.5]), 0.001, 0.1, 0.0, 0.0, 0.0)


def test_normal_round_trip(rng):
    for _ in range(20):
        theta = rng.uniform(0, 1.3)
        phi = rng.uniform(-np.pi, np.pi)
        n = normal_from_angles(theta, phi)
        assert np.linalg.norm(n) == pytest.approx(1.0, abs=1e-12)


def test_frame_orthonormal(rng):
    for _ in range(30):
        n = rand_dir(rng, 0.17)
        psi = rng.uniform(0, np.pi)
        t, b = shading_frame(n, psi)
        assert abs(np.dot(t, n)) < 1e-9
        assert abs(np.dot(b, n)) < 1e-9
        assert abs(np.dot(t, b)) < 1e-9
        assert np.linalg.norm(t) == pytest.approx(1.0, abs=1e-9)


class TestVjps:
    def test_ggx_shade_vjp_matches_fd(self, rng):
        fails = 0
        for _ in range(40):
            wi, wo = rand_dir(rng), rand_dir(rng)
            ax, ay = rng.uniform(0.02, 0.5, 2)
            spec = rng.uniform(0.05, 0.95, 2)
            diff = rng.uniform(0.05, 0.95, 2)
            up = rng.normal(size=2)
            g = ggx_shade_vjp(wi, wo, ax, ay, spec, diff, up)

            def loss(wi_=wi, wo_=wo, ax_=ax, ay_=ay, s_=spec, d_=diff):
                return float(np.sum(up * ggx_shade(wi_, wo_, ax_, ay_, s_, d_)))

            h = 1e-6
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                fd = (loss(wi_=wi + e) - loss(wi_=wi - e)) / (2 * h)
                if abs(fd - g["wi_l"][k]) > 1e-4 * max(1.0, abs(fd)):
                    fails += 1
                fd = (loss(wo_=wo + e) - loss(wo_=wo - e)) / (2 * h)
                if abs(fd - g["wo_l"][k]) > 1e-4 * max(1.0, abs(fd)):
                    fails += 1
            fd = (loss(ax_=ax + h) - loss(ax_=ax - h)) / (2 * h)
            if abs(fd - g["alpha_x"]) > 1e-4 * max(1.0, abs(fd)):
                fails += 1
            for k in range(2):
                e = np.zeros(2)
                e[k] = h
                fd = (loss(s_=spec + e) - loss(s_=spec - e)) / (2 * h)
                if abs(fd - g["spec"][k]) > 1e-4 * max(1.0, abs(fd)):
                    fails += 1
        assert fails == 0

    def test_frame_vjp_matches_fd(self, rng):
        for _ in range(25):
            n = rand_dir(rng, 0.2)
            psi = rng.uniform(0, np.pi)
            dt = rng.normal(size=3)
            db = rng.normal(size=3)
            dn, dpsi = shading_frame_vjp(n, psi, dt, db)

            def loss(n_, psi_):
                t, b = shading_frame(n_, psi_)
                return float(np.dot(dt, t) + np.dot(db, b))

            h = 1e-7
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                fd = (loss(n + e, psi) - loss(n - e, psi)) / (2 * h)
                assert abs(fd - dn[k]) <= 1e-4 * max(1.0, abs(fd))
            fd = (loss(n, psi + h) - loss(n, psi - h)) / (2 * h)
            assert abs(fd - dpsi) <= 1e-4 * max(1.0, abs(fd))

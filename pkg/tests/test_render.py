import numpy as np
import pytest

from adaptivesl.brdf import Candidate, GgxParams
from adaptivesl.errors import DomainError
from adaptivesl.patterns import LightPattern, MaskPattern, PatternPair, random_pattern_pair
from adaptivesl.prob import default_brdf_ranges
from adaptivesl.render import (
    Renderer,
    measurement_grad_patterns,
    render_scene,
    simulate_measurement,
    view_frame,
)
from adaptivesl.rig import camera_ray, depth_range, mask_hit
from adaptivesl.scene import NoiseModel, gen_scene


def center_ray(geom):
    ray = camera_ray(geom, (geom.cam_res_w / 2, geom.cam_res_h / 2))
    ray.z_min, ray.z_max = depth_range(geom, ray)
    return ray


def rand_candidate(rng, ray, C=1):
    ranges = default_brdf_ranges(C)
    vals = {k: rng.uniform(lo, hi) for k, (lo, hi) in ranges.items()}
    return Candidate(
        depth=rng.uniform(ray.z_min, ray.z_max),
        brdf=GgxParams.from_scalars(vals, C),
    )


def rand_pair(geom, rng, C=1):
    light = rng.uniform(0, 1, (geom.led_rows, geom.led_cols, C))
    mask = rng.uniform(0, 1, (geom.mask_res_h, geom.mask_res_w))
    return PatternPair(LightPattern(light), MaskPattern(mask))


class TestSimulateMeasurement:
    def test_zero_mask_zero_measurement(self, geom, led, rng):
        ray = center_ray(geom)
        cand = rand_candidate(rng, ray)
        pair = PatternPair(
            LightPattern(np.ones((geom.led_rows, geom.led_cols, 1))),
            MaskPattern(np.zeros((geom.mask_res_h, geom.mask_res_w))),
        )
        assert np.all(simulate_measurement(geom, led, pair, ray, cand) == 0.0)

    def test_zero_light_zero_measurement(self, geom, led, rng):
        ray = center_ray(geom)
        cand = rand_candidate(rng, ray)
        pair = PatternPair(
            LightPattern(np.zeros((geom.led_rows, geom.led_cols, 1))),
            MaskPattern(np.ones((geom.mask_res_h, geom.mask_res_w))),
        )
        assert np.all(simulate_measurement(geom, led, pair, ray, cand) == 0.0)

    def test_single_term_hand_expansion(self, geom, led, rng):
        """One LED on, one mask pixel open, Lambertian candidate: agreement
        with an independent scalar expansion of the forward model."""
        ray = center_ray(geom)
        brdf = GgxParams(np.array([0.8]), np.array([0.0]), 0.1, 0.1, 0.25, 0.4, 0.1)
        cand = Candidate(depth=0.5 * (ray.z_min + ray.z_max), brdf=brdf)
        x_k = ray.point_at(cand.depth)
        led_pos = geom.led_positions()
        uv = mask_hit(geom, led_pos[0], x_k)
        mask = np.zeros((geom.mask_res_h, geom.mask_res_w))
        mask[int(uv[1] - 0.5), int(uv[0] - 0.5)] = 1.0
        light = np.zeros((geom.led_rows, geom.led_cols, 1))
        light[0, 0, 0] = 1.0
        pair = PatternPair(LightPattern(light), MaskPattern(mask))
        got = simulate_measurement(geom, led, pair, ray, cand)[0]

        # independent expansion: per-sample parametric hit + manual bilinear
        frames = view_frame(ray.direction)
        n_world = frames @ brdf.normal()
        offs = led.sample_offsets()
        acc = 0.0
        for s in range(25):
            xs = led_pos[0] + np.array([offs[s, 0], offs[s, 1], 0.0])
            uvs = mask_hit(geom, xs, x_k)
            tu, tv = uvs[0] - 0.5, uvs[1] - 0.5
            i0, j0 = int(np.floor(tu)), int(np.floor(tv))
            fu, fv = tu - i0, tv - j0
            bil = 0.0
            for ii, jj, w in [(i0, j0, (1 - fu) * (1 - fv)), (i0 + 1, j0, fu * (1 - fv)),
                              (i0, j0 + 1, (1 - fu) * fv), (i0 + 1, j0 + 1, fu * fv)]:
                if 0 <= ii < geom.mask_res_w and 0 <= jj < geom.mask_res_h:
                    bil += w * mask[jj, ii]
            acc += led.kernel.ravel()[s] * bil
        v = led_pos[0] - x_k
        r = np.linalg.norm(v)
        wi = v / r
        cos_led = -(wi @ geom.led_normal())
        zi = wi @ n_world
        expected = (0.8 / np.pi) * max(zi, 0) * max(cos_led, 0) / r**2 * cos_led * acc
        assert got == pytest.approx(expected, rel=1e-6)

    def test_depth_out_of_range_rejected(self, geom, led, rng):
        ray = center_ray(geom)
        cand = rand_candidate(rng, ray)
        cand.depth = ray.z_max + 0.01
        with pytest.raises(DomainError):
            simulate_measurement(geom, led, rand_pair(geom, rng), ray, cand)


class TestBilinearity:
    def test_scaling_and_superposition(self, geom, led):
        """Acceptance-criterion-level check: rel err < 1e-9 on 100 draws."""
        rng = np.random.default_rng(42)
        ray = center_ray(geom)
        for _ in range(100):
            cand = rand_candidate(rng, ray)
            l1 = rng.uniform(0, 0.5, (geom.led_rows, geom.led_cols, 1))
            l2 = rng.uniform(0, 0.5, (geom.led_rows, geom.led_cols, 1))
            m1 = rng.uniform(0, 0.5, (geom.mask_res_h, geom.mask_res_w))
            m2 = rng.uniform(0, 0.5, (geom.mask_res_h, geom.mask_res_w))
            a = rng.uniform(0.1, 1.0)

            def I(light, mask):
                return simulate_measurement(
                    geom, led, PatternPair(LightPattern(light), MaskPattern(mask)),
                    ray, cand)[0]

            base = I(l1, m1)
            assert I(a * l1, m1) == pytest.approx(a * base, rel=1e-9, abs=1e-300)
            assert I(l1 + l2, m1) == pytest.approx(base + I(l2, m1), rel=1e-9)
            assert I(l1, a * m1) == pytest.approx(a * base, rel=1e-9, abs=1e-300)
            assert I(l1, m1 + m2) == pytest.approx(base + I(l1, m2), rel=1e-9)

    def test_monotonicity(self, geom, led, rng):
        ray = center_ray(geom)
        cand = rand_candidate(rng, ray)
        light = rng.uniform(0, 0.8, (geom.led_rows, geom.led_cols, 1))
        mask = rng.uniform(0, 0.8, (geom.mask_res_h, geom.mask_res_w))
        base = simulate_measurement(
            geom, led, PatternPair(LightPattern(light), MaskPattern(mask)), ray, cand)[0]
        for _ in range(20):
            light2 = light.copy()
            light2[rng.integers(geom.led_rows), rng.integers(geom.led_cols), 0] += 0.2
            got = simulate_measurement(
                geom, led, PatternPair(LightPattern(light2), MaskPattern(mask)), ray, cand)[0]
            assert got >= base - 1e-15
            mask2 = mask.copy()
            mask2[rng.integers(geom.mask_res_h), rng.integers(geom.mask_res_w)] += 0.2
            got = simulate_measurement(
                geom, led, PatternPair(LightPattern(light), MaskPattern(np.clip(mask2, 0, 1))),
                ray, cand)[0]
            assert got >= base - 1e-15


class TestGradPatterns:
    def test_zero_form_factor_led_has_zero_grad(self, geom, led, rng):
        ray = center_ray(geom)
        # normal at the maximum tilt away: some LEDs end up below the horizon
        brdf = GgxParams(np.array([0.5]), np.array([0.2]), 0.1, 0.1,
                         np.deg2rad(79.0), 0.0, 0.0)
        cand = Candidate(depth=0.5 * (ray.z_min + ray.z_max), brdf=brdf)
        pair = rand_pair(geom, rng)
        d_light, _ = measurement_grad_patterns(geom, led, pair, ray, cand)
        r = Renderer(geom, led)
        x_k = ray.point_at(cand.depth)
        frames = view_frame(ray.direction)
        wi, g = r.led_geometry(x_k)
        sh = r.shade(frames, wi, brdf.normal_theta, brdf.normal_phi,
                     brdf.tangent_angle, brdf.alpha_x, brdf.alpha_y,
                     brdf.specular_albedo, brdf.diffuse_albedo)
        dead = (sh[..., 0] * g) == 0.0
        assert np.all(d_light.reshape(-1, 1)[dead] == 0.0)

    def test_linearity_identity(self, geom, led, rng):
        """Doubling one light entry changes I by exactly its cofactor."""
        ray = center_ray(geom)
        cand = rand_candidate(rng, ray)
        pair = rand_pair(geom, rng)
        d_light, _ = measurement_grad_patterns(geom, led, pair, ray, cand)
        I0 = simulate_measurement(geom, led, pair, ray, cand)[0]
        light2 = pair.light.values.copy()
        light2[0, 1, 0] = min(1.0, 2 * light2[0, 1, 0])
        delta = light2[0, 1, 0] - pair.light.values[0, 1, 0]
        I1 = simulate_measurement(
            geom, led, PatternPair(LightPattern(light2), pair.mask), ray, cand)[0]
        assert I1 - I0 == pytest.approx(delta * d_light[0, 1, 0], rel=1e-9, abs=1e-15)

    def test_matches_finite_differences(self, geom, led):
        rng = np.random.default_rng(7)
        ray = center_ray(geom)
        checked = 0
        for _ in range(10):
            cand = rand_candidate(rng, ray)
            pair = rand_pair(geom, rng)
            d_light, d_mask = measurement_grad_patterns(geom, led, pair, ray, cand)
            h = 1e-4
            for _ in range(5):
                r_, c_ = rng.integers(geom.led_rows), rng.integers(geom.led_cols)
                lp = pair.light.values.copy()
                lp[r_, c_, 0] += h
                lm = pair.light.values.copy()
                lm[r_, c_, 0] -= h
                fd = (simulate_measurement(geom, led, PatternPair(LightPattern(np.clip(lp, 0, 1)), pair.mask), ray, cand)[0]
                      - simulate_measurement(geom, led, PatternPair(LightPattern(np.clip(lm, 0, 1)), pair.mask), ray, cand)[0]) / (2 * h)
                assert abs(fd - d_light[r_, c_, 0]) <= 1e-4 * max(abs(fd), 1e-12)
                checked += 1
            touched = np.argwhere(np.abs(d_mask[..., 0]) > 0)
            for jj, ii in touched[rng.permutation(len(touched))[:5]]:
                mp = pair.mask.values.copy()
                mp[jj, ii] += h
                mm = pair.mask.values.copy()
                mm[jj, ii] -= h
                fd = (simulate_measurement(geom, led, PatternPair(pair.light, MaskPattern(np.clip(mp, 0, 1))), ray, cand)[0]
                      - simulate_measurement(geom, led, PatternPair(pair.light, MaskPattern(np.clip(mm, 0, 1))), ray, cand)[0]) / (2 * h)
                assert abs(fd - d_mask[jj, ii, 0]) <= 1e-4 * max(abs(fd), 1e-12)
                checked += 1
        assert checked >= 100


class TestRenderScene:
    def test_noiseless_equals_per_pixel_measurement(self, geom, led, rng):
        scene = gen_scene("wavy", geom, rng)
        pair = rand_pair(geom, rng)
        img = render_scene(geom, led, pair, scene, noise=None)
        from adaptivesl.rig import pixel_grid_rays
        _, _, zr = pixel_grid_rays(geom)
        rows, cols = np.nonzero(scene.alpha)
        for r_, c_ in list(zip(rows, cols))[:10]:
            ray = camera_ray(geom, (c_ + 0.5, r_ + 0.5))
            ray.z_min, ray.z_max = zr[r_, c_]
            cand = Candidate(depth=scene.depth[r_, c_], brdf=scene.brdf_at(r_, c_))
            ref = simulate_measurement(geom, led, pair, ray, cand)
            assert img[r_, c_] == pytest.approx(ref, rel=1e-12)

    def test_zero_alpha_zero_image(self, geom, led, rng):
        scene = gen_scene("wavy", geom, rng)
        scene.alpha[:] = False
        pair = rand_pair(geom, rng)
        img = render_scene(geom, led, pair, scene, noise=None)
        assert np.all(img == 0.0)

    def test_fixed_seed_bitwise_identical(self, geom, led, rng):
        scene = gen_scene("wavy", geom, rng)
        pair = rand_pair(geom, rng)
        nm = NoiseModel(noise_level=0.02)
        a = render_scene(geom, led, pair, scene, nm, np.random.default_rng(5))
        b = render_scene(geom, led, pair, scene, nm, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_resolution_mismatch_rejected(self, geom16, geom, led, rng):
        scene = gen_scene("plane", geom16, rng)
        with pytest.raises(DomainError):
            render_scene(geom, led, rand_pair(geom, rng), scene, noise=None)

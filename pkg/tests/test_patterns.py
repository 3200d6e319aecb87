import numpy as np
import pytest
from scipy.special import expit

from adaptivesl.patterns import (
    FreePatternVars,
    LightPattern,
    MaskPattern,
    PatternPair,
    init_free_vars,
    load_pattern_pair,
    realize,
    realize_grad,
    save_pattern_pair,
)
from adaptivesl.errors import DomainError


def test_zero_raw_is_half():
    v = FreePatternVars(np.zeros((2, 2, 1)), np.zeros((4, 4)))
    pair = realize(v)
    assert np.all(pair.light.values == 0.5)
    assert np.all(pair.mask.values == 0.5)


def test_mask_scale_pushes_binary():
    v = FreePatternVars(np.zeros((1, 1, 1)), np.array([[1e-7]]), mask_scale=1e8)
    pair = realize(v)
    # sigma(10), evaluated independently
    assert pair.mask.values[0, 0] == pytest.approx(1 / (1 + np.exp(-10.0)), abs=1e-12)
    assert pair.mask.values[0, 0] == pytest.approx(0.9999546, abs=1e-7)

    v = FreePatternVars(np.zeros((1, 1, 1)), np.array([[-1e-6]]), mask_scale=1e8)
    assert realize(v).mask.values[0, 0] < 1e-3


def test_realize_bounded_for_any_finite_input(rng):
    v = FreePatternVars(rng.normal(0, 1e6, (3, 3, 2)), rng.normal(0, 1e3, (5, 5)))
    pair = realize(v)
    assert np.all((pair.light.values >= 0) & (pair.light.values <= 1))
    assert np.all((pair.mask.values >= 0) & (pair.mask.values <= 1))


def test_binary_push_beyond_threshold(rng):
    raw = rng.uniform(1e-7, 1e-5, 200) * rng.choice([-1, 1], 200)
    v = FreePatternVars(np.zeros((1, 1, 1)), raw.reshape(10, 20))
    m = realize(v).mask.values.ravel()
    assert np.all(np.minimum(m, 1 - m) < 1e-3)


def test_grad_at_zero_is_quarter():
    v = FreePatternVars(np.zeros((1, 1, 1)), np.zeros((1, 1)))
    gl, gm = realize_grad(v, np.ones((1, 1, 1)), np.zeros((1, 1)))
    assert gl[0, 0, 0] == pytest.approx(0.25, abs=1e-15)


def test_grad_saturates():
    v = FreePatternVars(np.zeros((1, 1, 1)), np.array([[0.5]]), mask_scale=1e8)
    _, gm = realize_grad(v, np.zeros((1, 1, 1)), np.ones((1, 1)))
    assert gm[0, 0] == 0.0


def test_grad_matches_finite_differences(rng):
    """Central differences on 100 random entries, rel err < 1e-4."""
    light_raw = rng.normal(0, 1.0, (5, 5, 2))
    mask_raw = rng.normal(0, 2e-8, (5, 5))
    v = FreePatternVars(light_raw, mask_raw)
    up_l = rng.normal(size=light_raw.shape)
    up_m = rng.normal(size=mask_raw.shape)
    gl, gm = realize_grad(v, up_l, up_m)

    def total(lr, mr):
        p = realize(FreePatternVars(lr, mr))
        return float((p.light.values * up_l).sum() + (p.mask.values * up_m).sum())

    h = 1e-5
    for k in range(50):
        i = tuple(rng.integers(0, s) for s in light_raw.shape)
        lr = light_raw.copy()
        lr[i] += h
        fp = total(lr, mask_raw)
        lr[i] -= 2 * h
        fm = total(lr, mask_raw)
        fd = (fp - fm) / (2 * h)
        assert abs(fd - gl[i]) <= 1e-4 * max(abs(fd), 1e-9)
    hm = 1e-12  # 1e-4 through the 1e8 gain
    for k in range(50):
        i = tuple(rng.integers(0, s) for s in mask_raw.shape)
        mr = mask_raw.copy()
        mr[i] += hm
        fp = total(light_raw, mr)
        mr[i] -= 2 * hm
        fm = total(light_raw, mr)
        fd = (fp - fm) / (2 * hm)
        assert abs(fd - gm[i]) <= 1e-4 * max(abs(fd), abs(gm[i]), 1e-3 * np.abs(gm).max())


def test_value_validation():
    with pytest.raises(DomainError):
        LightPattern(np.full((2, 2, 1), 1.5))
    with pytest.raises(DomainError):
        MaskPattern(np.full((2, 2), -0.1))
    with pytest.raises(DomainError):
        FreePatternVars(np.array([[[np.inf]]]), np.zeros((1, 1)))


def test_init_shapes_and_scales(geom, rng):
    v = init_free_vars(geom, 2, rng)
    assert v.light_raw.shape == (geom.led_rows, geom.led_cols, 2)
    assert v.mask_raw.shape == (geom.mask_res_h, geom.mask_res_w)
    assert np.abs(v.light_raw).max() < 1.0
    assert np.abs(v.mask_raw).max() < 1e-5


def test_serialization_round_trip(tmp_path, geom, rng):
    pair = realize(init_free_vars(geom, 3, rng))
    save_pattern_pair(tmp_path, "p0", pair)
    back = load_pattern_pair(tmp_path, "p0")
    # float32 storage: round trip exact at float32 resolution
    assert np.array_equal(back.light.values, pair.light.values.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.mask.values, pair.mask.values.astype(np.float32).astype(np.float64))
    assert (tmp_path / "p0_light.png").exists()
    assert (tmp_path / "p0_mask.png").exists()

import numpy as np
import pytest

from sscpgan import numerics as nx
from sscpgan.compositing import MaskRangeError, composite
from sscpgan.numerics import ShapeError, Tensor


def triple(seed=0, n=2, h=5):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3, h, h)), rng.random((n, 3, h, h)), rng.random((n, 1, h, h))


def test_mask_extremes():
    f, b, _ = triple()
    np.testing.assert_array_equal(composite(f, b, np.ones((2, 1, 5, 5))), f)
    np.testing.assert_array_equal(composite(f, b, np.zeros((2, 1, 5, 5))), b)


def test_scalar_hand_value():
    out = composite(np.full((1, 1, 1, 1), 0.8), np.full((1, 1, 1, 1), 0.4), np.full((1, 1, 1, 1), 0.25))
    assert out.item() == pytest.approx(0.5, abs=1e-15)


def test_convexity_and_identity():
    for seed in range(20):
        f, b, m = triple(seed)
        out = composite(f, b, m)
        assert np.all(out >= np.minimum(f, b) - 1e-15) and np.all(out <= np.maximum(f, b) + 1e-15)
        np.testing.assert_allclose(composite(f, f, m), f, atol=1e-15)


def test_mask_gradient_is_fg_minus_bg():
    f, b, m = triple(3, n=1, h=3)
    mt = Tensor(m, requires_grad=True)
    nx.mean(composite(Tensor(f), Tensor(b), mt) * 1.0).backward()
    np.testing.assert_allclose(mt.grad, (f - b).sum(axis=1, keepdims=True) / f.size, rtol=1e-12)
    err, _ = nx.gradient_check(lambda a, c, mm: nx.mean(composite(a, c, mm) * f), [f, b, m])
    assert err < 1e-4


def test_validation_errors():
    f, b, m = triple()
    with pytest.raises(MaskRangeError):
        composite(f, b, m + 1.5)
    with pytest.raises(MaskRangeError):
        composite(f, b, np.full_like(m, np.nan))
    with pytest.raises(ShapeError):
        composite(f, b, np.ones((2, 3, 5, 5)))
    with pytest.raises(ShapeError):
        composite(f, b[:, :, :4], m)

import numpy as np
import pytest

import volseq.layers as L
from volseq.errors import GradientCheckError
from volseq.gradcheck import COMPONENTS, TOLERANCE, gradient_check, model_check, numeric_grad, relative_error


class TestHelpers:
    def test_relative_error(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert relative_error(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == 2.0

    def test_numeric_grad_quadratic(self):
        x = np.array([1.0, -2.0, 0.5])
        g = numeric_grad(lambda: float((x**2).sum()), x)
        np.testing.assert_allclose(g, 2 * np.array([1.0, -2.0, 0.5]), rtol=0, atol=1e-8)
        # the array is restored after perturbation
        np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])


@pytest.mark.parametrize("component", sorted(COMPONENTS))
def test_component(component):
    report = gradient_check(component)
    assert report.max_error <= TOLERANCE, report.lines()


@pytest.mark.parametrize("arch", ["lstm", "gru"])
def test_end_to_end(arch):
    report = model_check(arch, n_samples=50)
    assert report.passed, report.lines()


class TestNegativeControl:
    @pytest.fixture
    def broken_conv(self, monkeypatch):
        real = L.conv3d_backward

        def flipped(*args, **kwargs):
            dx, grads = real(*args, **kwargs)
            return dx, {k: -v for k, v in grads.items()}

        monkeypatch.setattr(L, "conv3d_backward", flipped)

    def test_component_fails(self, broken_conv):
        with pytest.raises(GradientCheckError):
            gradient_check("conv3d")

    def test_model_fails(self, broken_conv):
        assert not model_check("lstm", n_samples=20).passed

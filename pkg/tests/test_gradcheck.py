import time

import numpy as np
import pytest

from listereo import autodiff as ad
from listereo import gradcheck


def test_relative_error_scale():
    assert gradcheck.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0
    assert gradcheck.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)


def test_check_op_detects_a_wrong_gradient():
    def bad_square(x):
        # forward x^2 but backward as if it were 3x
        return ad._make(x.data ** 2, (x,), lambda g: (3 * g,))

    assert not gradcheck.check_op("bad", bad_square, [np.full((1, 1, 2, 2), 0.7)]).passed
    assert gradcheck.check_op("good", lambda x: ad.mul(x, x), [np.full((1, 1, 2, 2), 0.7)]).passed


def test_primitive_instances_are_small():
    for name, _, inputs in gradcheck.primitive_cases(0):
        # convolution weights are parameters, not instances
        acts = [inputs[0]] if name.startswith(("conv", "sparse_conv")) else inputs
        for a in acts:
            assert a.ndim == 4 and all(d <= m for d, m in zip(a.shape, (1, 4, 6, 8))), name


def test_all_primitives_and_end_to_end_pass():
    start = time.perf_counter()
    results = gradcheck.check_primitives(1e-4, seed=0)
    names = {r.name for r in results}
    assert {"conv2d", "correlation", "sample_horizontal", "batch_norm_train", "batch_norm_eval", "softmax_channel"} <= names
    failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert failed == []
    for kind in ("regular_conv", "sparse_conv"):
        r = gradcheck.check_end_to_end(n_params=20, tolerance=1e-3, seed=0, lidar_branch_kind=kind)
        assert r.passed, (kind, r.max_rel_error)
    assert time.perf_counter() - start < 120

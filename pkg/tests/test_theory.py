import math

import numpy as np
import pytest
import torch

from dpspg.checks import binary_bound_rows, gradient_rows, margin_rows, pipeline_rows, softmax_jacobian_rows
from dpspg.errors import InvalidInput, InvalidParameter, NumericFailure
from dpspg.inference import PromptModels, fusion_logits
from dpspg.numkernel import DTYPE, softmax
from dpspg.theory import (
    CheckRow,
    binary_jacobian_bound_check,
    checks_csv,
    fd_jacobian,
    input_jacobian_report,
    linearization_residual,
    margin_report,
    margin_sensitivity_correlation,
    softmax_jacobian_error,
)


def test_margin_example():
    r = margin_report([2.0, 1.0], [0.5, 1.5], y=0, alpha=0.2)
    assert r.delta_plus.tolist() == [1.0]
    assert r.delta_constraint == 1.0
    assert abs(float(r.delta_combined[0]) - 1.2) < 1e-15
    assert r.premise and r.bound_satisfied and r.identity_holds


def test_margin_alpha_zero_and_flat_negative():
    sp, sn = np.array([0.4, 0.9, -0.3]), np.array([0.1, 0.7, 0.2])
    r = margin_report(sp, sn, 1, 0.0)
    assert np.array_equal(r.delta_combined, r.delta_plus)
    r = margin_report(sp, np.full(3, 0.37), 1, 0.8)
    assert np.allclose(r.delta_combined, r.delta_plus, atol=1e-15, rtol=0)


def test_margin_explicit_delta_implication():
    # gaps are (1.0,); asking for delta 2 makes the premise false
    r = margin_report([2.0, 1.0], [0.5, 1.5], 0, 0.2, delta=2.0)
    assert not r.premise and r.bound_satisfied
    r = margin_report([2.0, 1.0], [0.5, 1.5], 0, 0.2, delta=0.5)
    assert r.premise and r.bound_satisfied


def test_margin_errors():
    with pytest.raises(InvalidInput):
        margin_report([1.0], [0.0], 0, 0.2)
    with pytest.raises(InvalidInput):
        margin_report([1.0, 0.0], [0.0, 0.0], 2, 0.2)
    with pytest.raises(InvalidParameter):
        margin_report([1.0, 0.0], [0.0, 0.0], 0, -1.0)


def test_binary_bound_examples():
    r = binary_jacobian_bound_check(2.0, 1.0)
    assert abs(r.extra["f_i"] - 0.11920292202211755) < 1e-15
    assert abs(r.analytic_norm - 0.10499358540350652) < 1e-15
    assert abs(r.bound - 0.1353352832366127) < 1e-15
    assert r.holds and abs(r.fd_norm - r.analytic_norm) < 1e-8
    r = binary_jacobian_bound_check(0.0, 1.0)
    assert r.analytic_norm == 0.25 and r.bound == 1.0
    with pytest.raises(InvalidParameter):
        binary_jacobian_bound_check(1.0, 0.0)


def test_binary_bound_large_margin_no_overflow():
    r = binary_jacobian_bound_check(10.0, 0.05)
    assert math.isfinite(r.analytic_norm) and r.holds


def test_softmax_jacobian_error_small():
    assert softmax_jacobian_error([0.3, -1.2, 0.8, 0.0], 0.1) < 1e-6


def test_linearization_zero_step():
    fn = lambda x: softmax(torch.stack([x[0] * x[1], x[1] ** 2]), 1.0)  # noqa: E731
    assert linearization_residual(fn, torch.tensor([0.3, 0.7], dtype=DTYPE), torch.tensor([1.0, 0.0]), 0.0) == 0.0


def test_linearization_quadratic_decay():
    fn = lambda x: softmax(torch.stack([x[0] * x[1], x[1] ** 2, torch.sin(x[0])]), 0.5)  # noqa: E731
    x, d = torch.tensor([0.3, 0.7], dtype=DTYPE), torch.tensor([0.6, 0.8], dtype=DTYPE)
    r = linearization_residual(fn, x, d, 1e-2) / linearization_residual(fn, x, d, 5e-3)
    assert 3.5 <= r <= 4.5


def test_rank_correlation_sign():
    assert margin_sensitivity_correlation([0.1, 0.5, 1.0, 2.0], [4.0, 3.0, 1.0, 0.5]) == -1.0


def test_fd_jacobian_non_finite():
    with pytest.raises(NumericFailure):
        fd_jacobian(lambda x: x / 0.0, torch.ones(2, dtype=DTYPE))


def test_checks_csv_format():
    text = checks_csv([CheckRow("a", "k=1", 0.5, 1.0, True), CheckRow("b", "", 2.0, 1.0, False)])
    assert text.splitlines() == ["check,params,lhs,rhs,pass", "a,k=1,0.5,1.0,true", "b,,2.0,1.0,false"]


def test_batteries_pass():
    for rows in (gradient_rows(), softmax_jacobian_rows(20), margin_rows(200), binary_bound_rows(200)):
        assert rows and all(r.passed for r in rows), [r for r in rows if not r.passed][:3]


def test_input_jacobian_on_small_pipeline(small_world, small_pair):
    w = small_world
    m = PromptModels(w.vlm, w.vocab, small_pair.g_pos, small_pair.g_neg, provenance=small_pair.provenance)
    pipe = lambda x: fusion_logits(m, x, 0.2)  # noqa: E731
    x = torch.as_tensor(w.ds.x[w.ds.indices(2)[0]], dtype=DTYPE)
    r = input_jacobian_report(pipe, x, 0, 1, 0.1, 0.2)
    assert abs(r.fd_norm - r.analytic_norm) < 1e-5
    assert r.fd_norm <= r.lipschitz_bound * (1 + 1e-9)
    assert r.extra["empirical"]


def test_pipeline_rows_on_small_pipeline(small_world, small_pair):
    w = small_world
    m = PromptModels(w.vlm, w.vocab, small_pair.g_pos, small_pair.g_neg, provenance=small_pair.provenance)
    idx = w.ds.indices(2, "test")[:5]
    rows = pipeline_rows(m, w.ds.x[idx], w.ds.labels[idx], 0.2, 0.1)
    names = {r.check for r in rows}
    assert {"linearization_ratio_median", "input_jacobian_bound", "input_jacobian_fd",
            "margin_sensitivity_rank_correlation"} <= names
    med = [r for r in rows if r.check == "linearization_ratio_median"][0]
    assert med.passed
    assert all(r.passed for r in rows if r.check in ("input_jacobian_fd", "input_jacobian_bound"))

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpspg.diagnostics import variability
from dpspg.inference import fuse
from dpspg.numkernel import DTYPE, softmax
from dpspg.promptlabels import negative_target
from dpspg.theory import binary_jacobian_bound_check, margin_report

finite = st.floats(-5, 5, allow_nan=False)


def vec(k):
    return arrays(np.float64, k, elements=finite)


@given(vec(6), st.floats(-50, 50), st.floats(0.05, 2.0))
def test_softmax_shift_invariant(z, c, tau):
    a = softmax(torch.tensor(z, dtype=DTYPE), tau)
    b = softmax(torch.tensor(z + c, dtype=DTYPE), tau)
    assert torch.allclose(a, b, atol=1e-12)
    assert abs(float(a.sum()) - 1) < 1e-12


@given(st.integers(2, 8).flatmap(lambda k: st.tuples(vec(k), vec(k), st.integers(0, k - 1))),
       st.floats(0, 2))
def test_margin_identity_and_bound(args, alpha):
    sp, sn, y = args
    r = margin_report(sp, sn, y, alpha)
    assert r.identity_holds and r.bound_satisfied


@given(st.integers(2, 9).flatmap(lambda k: st.tuples(st.just(k), st.integers(0, k - 1))))
def test_negative_target_sums(args):
    k, y = args
    t = negative_target(y, k)
    assert float(t.sum()) == k - 1 and float(t[y]) == 0.0


@given(st.floats(0, 8), st.floats(0.05, 3))
def test_binary_bound_always_holds(delta, tau):
    assert binary_jacobian_bound_check(delta, tau).holds


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 20))
def test_lambda_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    sets = {d: rng.normal(2 * d, 1, (5, 3, 2)) for d in range(3)}
    a = variability(sets, 0).lam
    b = variability({d: c * v for d, v in sets.items()}, 0).lam
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


@given(vec(4), vec(4), st.floats(0.05, 1))
def test_fuse_alpha_zero_matches_softmax(sp, sn, tau):
    p = torch.tensor(sp, dtype=DTYPE)
    assert torch.equal(fuse(p, torch.tensor(sn, dtype=DTYPE), 0.0, tau).probs, softmax(p, tau))

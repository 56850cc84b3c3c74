import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cscon.loss import (
    alignment_target_loss,
    cosine_sim,
    inner_instance_loss,
    inter_instance_loss,
    similarity_matrix,
    simplex_floor,
)
from cscon.numerics import Tensor, grad_check


def oracle_loss(vc, vs, tau):
    """Pure-python InfoNCE over rows of one sample."""
    def cos(a, b):
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(x * x for x in b))
        return sum(x * y for x, y in zip(a, b)) / (max(na, 1e-12) * max(nb, 1e-12))

    m = len(vc)
    total = 0.0
    for i in range(m):
        logits = [cos(vc[i], vs[j]) / tau for j in range(m)]
        top = max(logits)
        lse = top + math.log(sum(math.exp(l - top) for l in logits))
        total += lse - logits[i]
    return total / m


def loss_from_sim(s, tau=1.0):
    s = np.asarray(s, dtype=np.float64) / tau
    top = s.max(1, keepdims=True)
    lse = (top + np.log(np.exp(s - top).sum(1, keepdims=True)))[:, 0]
    return float((lse - np.diag(s)).mean())


def test_single_patch_is_zero(rng):
    v = rng.standard_normal((1, 5))
    assert float(inner_instance_loss(v, rng.standard_normal((1, 5))).data) == 0.0


@pytest.mark.parametrize("m", [2, 5, 19])
def test_identical_embeddings_give_log_m(m, rng):
    v = np.tile(rng.standard_normal(6), (m, 1))
    assert float(inner_instance_loss(v, v).data) == pytest.approx(math.log(m), abs=1e-12)


def test_two_by_two_identity_similarity():
    v = np.eye(2)
    assert float(inner_instance_loss(v, v).data) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)
    assert math.log(1 + math.exp(-1)) == pytest.approx(0.31326, abs=1e-5)


@given(
    arrays(np.float64, (4, 6), elements=st.floats(-3, 3)),
    arrays(np.float64, (4, 6), elements=st.floats(-3, 3)),
    st.floats(0.05, 3.0),
)
def test_matches_python_oracle(vc, vs, tau):
    got = float(inner_instance_loss(vc, vs, tau).data)
    assert got == pytest.approx(oracle_loss(vc.tolist(), vs.tolist(), tau), abs=1e-9)


@given(
    arrays(np.float64, (2, 5, 4), elements=st.floats(-3, 3)),
    arrays(np.float64, (2, 5, 4), elements=st.floats(-3, 3)),
    st.floats(0.01, 100),
    st.floats(0.01, 100),
)
def test_scale_invariance(vc, vs, a, b):
    # holds above the norm floor that keeps zero rows finite
    assume(min(np.linalg.norm(vc, axis=-1).min(), np.linalg.norm(vs, axis=-1).min()) > 1e-6)
    base = float(inner_instance_loss(vc, vs).data)
    assert float(inner_instance_loss(vc * a, vs * b).data) == pytest.approx(base, abs=1e-5)


@given(arrays(np.float64, (1, 6, 4), elements=st.floats(-3, 3)), arrays(np.float64, (1, 6, 4), elements=st.floats(-3, 3)))
def test_inner_equals_inter_for_one_sample(vc, vs):
    assert float(inner_instance_loss(vc, vs).data) == float(inter_instance_loss(vc, vs).data)


@given(
    arrays(np.float64, (3, 5, 4), elements=st.floats(-3, 3)),
    arrays(np.float64, (3, 5, 4), elements=st.floats(-3, 3)),
    st.floats(0.05, 2.0),
)
def test_upper_bound(vc, vs, tau):
    assert float(inner_instance_loss(vc, vs, tau).data) <= 2 / tau + math.log(5) + 1e-9


def test_batch_mean_of_samples(rng):
    vc, vs = rng.standard_normal((2, 3, 4, 5))
    per = [float(inner_instance_loss(vc[i], vs[i]).data) for i in range(3)]
    assert float(inner_instance_loss(vc, vs).data) == pytest.approx(np.mean(per), abs=1e-12)


def test_inter_pools_the_batch(rng):
    vc, vs = rng.standard_normal((2, 3, 4, 5))
    pooled = oracle_loss(vc.reshape(12, 5).tolist(), vs.reshape(12, 5).tolist(), 1.0)
    assert float(inter_instance_loss(vc, vs).data) == pytest.approx(pooled, abs=1e-10)


def test_symmetric_averages_both_directions(rng):
    vc, vs = rng.standard_normal((2, 4, 5))
    fwd = oracle_loss(vc.tolist(), vs.tolist(), 1.0)
    back = oracle_loss(vs.tolist(), vc.tolist(), 1.0)
    assert float(inner_instance_loss(vc, vs, symmetric=True).data) == pytest.approx((fwd + back) / 2, abs=1e-10)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_bad_temperature(tau, rng):
    with pytest.raises(ValueError):
        inner_instance_loss(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), tau)


def test_mismatched_shapes(rng):
    with pytest.raises(ValueError):
        inner_instance_loss(rng.standard_normal((3, 4)), rng.standard_normal((2, 4)))


def test_small_temperature_is_stable(rng):
    v = rng.standard_normal((6, 4))
    out = float(inner_instance_loss(v, -v, 1e-3).data)
    assert math.isfinite(out) and out > 100


def test_diagonal_margin_monotone():
    # diag d, off-diagonal -1: loss falls monotonically toward 0 as d -> 1 and tau -> small
    prev = math.inf
    for d in np.linspace(-0.5, 1.0, 16):
        s = np.full((3, 3), -1.0)
        np.fill_diagonal(s, d)
        val = loss_from_sim(s, 0.1)
        assert val < prev
        prev = val
    assert prev < 1e-7


def test_gradients(rng):
    vc, vs = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True), Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
    for fn in (lambda: inner_instance_loss(vc, vs, 0.5), lambda: inter_instance_loss(vc, vs, 0.5), lambda: alignment_target_loss(vc, vs)):
        rep = grad_check(fn, [vc, vs], h=1e-5, tol=1e-6)
        assert rep.passed(1.0)


def test_similarity_matrix_range(rng):
    s = similarity_matrix(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)))
    assert s.shape == (5, 5) and np.all(np.abs(s) <= 1 + 1e-12)


def test_cosine_degenerate():
    assert cosine_sim([0, 0, 0], [1, 2, 3]) == (0.0, True)
    assert cosine_sim([1, 0], [0, 2]).value == 0.0
    assert cosine_sim([1, 1], [2, 2]).value == pytest.approx(1.0)
    with pytest.raises(ValueError):
        cosine_sim([np.inf, 0], [1, 0])


def test_alignment_loss_is_negative_cosine(rng):
    a = rng.standard_normal((2, 3, 4))
    assert float(alignment_target_loss(a, 2 * a).data) == pytest.approx(-1.0)
    assert float(alignment_target_loss(a, -a).data) == pytest.approx(1.0)


@pytest.mark.parametrize("m", [2, 3, 4, 8])
def test_simplex_floor_matches_construction(m):
    # regular simplex: M unit vectors with pairwise cosine -1/(M-1)
    e = np.eye(m) - 1.0 / m
    v = e / np.linalg.norm(e, axis=1, keepdims=True)
    assert float(inner_instance_loss(v, v).data) == pytest.approx(simplex_floor(m), abs=1e-10)


@given(arrays(np.float64, (6, 8), elements=st.floats(-3, 3)), arrays(np.float64, (6, 8), elements=st.floats(-3, 3)))
def test_loss_never_below_simplex_floor(vc, vs):
    assert float(inner_instance_loss(vc, vs).data) >= simplex_floor(6) - 1e-9

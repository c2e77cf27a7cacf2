"""Gradient and semantics tests for the reverse-mode engine."""

import numpy as np
import pytest

from dsam import autodiff as ad
from dsam.autodiff import (AutodiffError, NondeterministicLossError,
                           NonFiniteError, Tensor)

FD_TOL = 1e-4


def check_op(build, params, eps=1e-5, tol=FD_TOL):
    """FD-check a scalar graph builder against its autodiff gradients."""
    err = ad.finite_difference_check(build, params, eps=eps)
    assert err < tol, f"finite-difference mismatch: {err}"


class Scalarizer:
    """Fixed random projections to a scalar so every output element matters.

    Projections are drawn once per shape and reused, keeping any loss
    built from them deterministic across re-evaluations.
    """

    def __init__(self, rng):
        self._rng = rng
        self._cache = {}

    def __call__(self, t):
        r = self._cache.get(t.shape)
        if r is None:
            r = Tensor(self._rng.standard_normal(t.shape))
            self._cache[t.shape] = r
        return ad.total(ad.mul(t, r))


def test_square_value_and_grad():
    x = ad.tensor(3.0, requires_grad=True)
    y = ad.mul(x, x)
    ad.backward(y)
    assert y.item() == 9.0
    assert float(x.grad) == 6.0


def test_sum_grad_is_ones():
    x = ad.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.total(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_softmax_cross_entropy_composite_grad():
    rng = np.random.default_rng(7)
    logits = ad.tensor(rng.standard_normal((4, 1)), requires_grad=True)

    def loss():
        return ad.cross_entropy_logits(logits, 2)

    err = ad.finite_difference_check(loss, [logits], eps=1e-5)
    assert err < 1e-6


def test_fd_check_quadratic_is_nearly_exact():
    x = ad.tensor(1.0, requires_grad=True)
    err = ad.finite_difference_check(lambda: ad.mul(x, x), [x], eps=1e-5)
    assert err < 1e-8


def test_fd_check_reports_kink():
    # |x| evaluated within eps of the kink: central difference sees the
    # bend while the analytic gradient does not
    x = ad.tensor(5e-6, requires_grad=True)

    def absval():
        return ad.total(ad.add(ad.relu(x), ad.relu(ad.mul(x, -1.0))))

    err = ad.finite_difference_check(absval, [x], eps=1e-5)
    assert err > 0.1


def test_fd_check_rejects_nondeterministic_loss():
    state = {"n": 0}

    def noisy():
        state["n"] += 1
        return ad.tensor(float(state["n"]))

    with pytest.raises(NondeterministicLossError):
        ad.finite_difference_check(noisy, [])


def test_forward_backward_zero_for_unused():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    unused = ad.tensor([[3.0]], requires_grad=True)
    loss = ad.total(ad.mul(x, x))
    grads = ad.forward_backward(loss, [x, unused])
    assert np.allclose(grads[0], [2.0, 4.0])
    assert grads[1].shape == (1, 1) and grads[1][0, 0] == 0.0


def test_backward_requires_scalar():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(AutodiffError):
        ad.backward(ad.mul(x, x))


def test_non_finite_forward_rejected():
    with pytest.raises(NonFiniteError):
        ad.tensor([1.0, np.nan])
    big = ad.tensor([1000.0], requires_grad=True)
    with pytest.raises(NonFiniteError) as exc:
        ad.exp(big)
    assert "node" in str(exc.value)


def test_gradient_reverse_forward_identity_and_backward_sign():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    y = ad.gradient_reverse(x, 0.05)
    assert np.array_equal(y.data, [1.0, 2.0])
    ad.backward(ad.total(y))
    assert np.allclose(x.grad, [-0.05, -0.05])


def test_gradient_reverse_zero_scale():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.total(ad.gradient_reverse(x, 0.0)))
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_gradient_reverse_matches_negated_downstream():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((3, 4))
    for scale in (0.01, 0.05, 1.0):
        x1 = ad.tensor(rng.standard_normal(4), requires_grad=True)
        x2 = ad.tensor(x1.data.copy(), requires_grad=True)
        s1 = ad.total(ad.tanh(ad.matmul(Tensor(w), ad.gradient_reverse(x1, scale))))
        s2 = ad.mul(ad.total(ad.tanh(ad.matmul(Tensor(w), x2))), -scale)
        ad.backward(s1)
        ad.backward(s2)
        assert np.max(np.abs(x1.grad - x2.grad)) < 1e-15


def test_softmax_rows_normalized_and_positive():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = Tensor(rng.standard_normal((5, 7)) * 3)
        y = ad.softmax(x, axis=1)
        assert np.all(np.abs(y.data.sum(axis=1) - 1.0) < 1e-12)
        assert np.all(y.data > 0)


def test_split_concat_roundtrip_bitwise():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((2, 4)))
    joined = ad.concat([a, b], axis=0)
    ra, rb = ad.split(joined, [3, 2], axis=0)
    assert np.array_equal(ra.data, a.data)
    assert np.array_equal(rb.data, b.data)


def test_split_size_mismatch():
    x = ad.tensor(np.zeros((4, 2)))
    with pytest.raises(AutodiffError):
        ad.split(x, [3, 2], axis=0)


def test_embedding_out_of_range():
    table = ad.tensor(np.zeros((4, 2)), requires_grad=True)
    with pytest.raises(AutodiffError):
        ad.embedding(table, [0, 4])


def test_bce_mean_and_empty_mask():
    p = ad.tensor([0.5, 0.5], requires_grad=True)
    loss = ad.bce(p, np.array([1.0, 0.0]))
    assert abs(loss.item() - (-np.log(0.5))) < 1e-12
    with pytest.raises(AutodiffError):
        ad.bce(p, np.array([1.0, 0.0]), mask=np.zeros(2))


def test_mse_masked_ignores_masked_elements():
    pred = ad.tensor([1.0, 5.0, 2.0], requires_grad=True)
    target = np.array([0.0, 100.0, 0.0])
    loss = ad.mse(pred, target, mask=np.array([1.0, 0.0, 1.0]))
    assert abs(loss.item() - (1.0 + 4.0) / 2.0) < 1e-12
    ad.backward(loss)
    assert pred.grad[1] == 0.0


def test_no_grad_blocks_graph():
    x = ad.tensor([2.0], requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad


# ---------------------------------------------------------------------------
# finite-difference property sweep over the full op inventory

def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _op_cases(rng):
    """One FD case per required op, with randomized small shapes."""
    proj = Scalarizer(rng)
    m, k, n = (int(rng.integers(2, 5)) for _ in range(3))
    length = int(rng.integers(3, 7))

    a2 = ad.tensor(_rand(rng, m, k), requires_grad=True)
    b2 = ad.tensor(_rand(rng, k, n), requires_grad=True)
    v1 = ad.tensor(_rand(rng, k), requires_grad=True)
    yield "matmul_22", lambda: proj(ad.matmul(a2, b2)), [a2, b2]
    yield "matmul_21", lambda: proj(ad.matmul(a2, v1)), [a2, v1]
    vm = ad.tensor(_rand(rng, m), requires_grad=True)
    yield "matmul_12", lambda: proj(ad.matmul(vm, a2)), [vm, a2]

    x = ad.tensor(_rand(rng, m, n), requires_grad=True)
    ybc = ad.tensor(_rand(rng, m, 1), requires_grad=True)
    yield "add_broadcast", lambda: proj(ad.add(x, ybc)), [x, ybc]
    yield "sub_broadcast", lambda: proj(ad.sub(x, ybc)), [x, ybc]
    yield "mul_broadcast", lambda: proj(ad.mul(x, ybc)), [x, ybc]
    yield "tanh", lambda: proj(ad.tanh(x)), [x]
    yield "sigmoid", lambda: proj(ad.sigmoid(x)), [x]
    yield "exp", lambda: proj(ad.exp(x)), [x]
    yield "relu", lambda: proj(ad.relu(ad.add(x, 0.3))), [x]
    yield "softmax", lambda: proj(ad.softmax(x, axis=1)), [x]
    yield "reshape", lambda: proj(ad.reshape(x, (n, m))), [x]
    yield "transpose", lambda: proj(ad.transpose(x)), [x]

    c1 = ad.tensor(_rand(rng, m, 2), requires_grad=True)
    c2 = ad.tensor(_rand(rng, m, 3), requires_grad=True)
    yield ("concat",
           lambda: proj(ad.concat([c1, c2], axis=1)), [c1, c2])

    def split_loss():
        lo, hi = ad.split(x, [1, n - 1], axis=1)
        return ad.add(proj(lo), proj(hi))
    yield "split", split_loss, [x]

    parts = [ad.tensor(_rand(rng, n), requires_grad=True) for _ in range(3)]
    yield "stack", lambda: proj(ad.stack(parts)), parts

    def unstack_loss():
        pieces = ad.unstack(x)
        acc = proj(pieces[0])
        for p in pieces[1:]:
            acc = ad.add(acc, proj(p))
        return acc
    yield "unstack", unstack_loss, [x]

    table = ad.tensor(_rand(rng, 5, m), requires_grad=True)
    ids = rng.integers(0, 5, size=4)
    yield ("embedding",
           lambda: proj(ad.embedding(table, ids)), [table])

    for kern, dil in ((1, 1), (3, 1), (3, 2), (2, 3)):
        cx = ad.tensor(_rand(rng, k, length), requires_grad=True)
        cw = ad.tensor(_rand(rng, m, k, kern), requires_grad=True)
        cb = ad.tensor(_rand(rng, m), requires_grad=True)
        yield (f"conv1d_k{kern}d{dil}",
               lambda cx=cx, cw=cw, cb=cb, kern=kern, dil=dil:
                   proj(ad.conv1d(cx, cw, cb, dilation=dil)),
               [cx, cw, cb])

    hid = int(rng.integers(2, 5))
    lx = ad.tensor(_rand(rng, k), requires_grad=True)
    lh = ad.tensor(_rand(rng, hid), requires_grad=True)
    lc = ad.tensor(_rand(rng, hid), requires_grad=True)
    lw = ad.tensor(_rand(rng, 4 * hid, k + hid) * 0.5, requires_grad=True)
    lb = ad.tensor(_rand(rng, 4 * hid) * 0.5, requires_grad=True)
    yield ("lstm_cell",
           lambda: proj(ad.lstm_cell(lx, lh, lc, lw, lb)),
           [lx, lh, lc, lw, lb])

    # gradient_reverse is deliberately not the derivative of its forward;
    # its sign semantics are covered by the dedicated tests above

    tgt = _rand(rng, m, n)
    mask = (rng.random((m, n)) > 0.3).astype(float)
    if mask.sum() == 0:
        mask[0, 0] = 1.0
    yield "mse", lambda: ad.mse(x, tgt), [x]
    yield "mse_masked", lambda: ad.mse(x, tgt, mask=mask), [x]

    # keep probabilities away from the clamp so the FD step stays smooth
    probs = ad.tensor(rng.uniform(0.05, 0.95, size=(m, n)), requires_grad=True)
    btgt = (rng.random((m, n)) > 0.5).astype(float)
    yield "bce", lambda: ad.bce(probs, btgt), [probs]
    yield "bce_masked", lambda: ad.bce(probs, btgt, mask=mask), [probs]

    logits = ad.tensor(_rand(rng, 4, length), requires_grad=True)
    cids = rng.integers(0, 4, size=length)
    cmask = (rng.random(length) > 0.3).astype(float)
    if cmask.sum() == 0:
        cmask[0] = 1.0
    yield ("cross_entropy",
           lambda: ad.cross_entropy_logits(logits, cids), [logits])
    yield ("cross_entropy_masked",
           lambda: ad.cross_entropy_logits(logits, cids, mask=cmask), [logits])

    yield "sum", lambda: ad.total(ad.mul(x, x)), [x]
    yield "mean", lambda: ad.mean(ad.mul(x, x)), [x]


@pytest.mark.parametrize("seed", range(100))
def test_all_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, build, params in _op_cases(rng):
        err = ad.finite_difference_check(build, params, eps=1e-5)
        assert err < FD_TOL, f"{name} (seed {seed}): max rel error {err}"


def test_gradient_accumulates_over_shared_use():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(x, 3.0))  # x^2 + 3x
    ad.backward(ad.total(y))
    assert np.allclose(x.grad, [2 * 1 + 3, 2 * 2 + 3])

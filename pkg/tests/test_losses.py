import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradsuite import TOL, loss_cases
from helpers import randn
from segmate.errors import ConfigError, DataError, ShapeError
from segmate.losses import (
    LossWeights,
    boundary_loss,
    class_weights_from_frequency,
    cross_entropy,
    dice_loss,
    focal_loss,
    one_hot,
    presence_loss,
    presence_targets,
    seg_loss,
    seg_loss_terms,
    sobel_edges,
    total_loss,
)
from segmate.model import NetworkOutput
from segmate.tensor import Tensor, check_gradients, ops


def T(a):
    return Tensor(np.asarray(a, dtype=np.float32))


def brute_sobel(labels):
    """Per-pixel loop: any class indicator with non-zero Sobel magnitude marks an edge."""
    h, w = labels.shape
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    out = np.zeros((1, h, w), np.float32)
    for i in range(h):
        for j in range(w):
            for cls in set(labels.reshape(-1).tolist()):
                gx = gy = 0
                for u in range(3):
                    for v in range(3):
                        r = min(max(i + u - 1, 0), h - 1)
                        c = min(max(j + v - 1, 0), w - 1)
                        ind = 1 if labels[r, c] == cls else 0
                        gx += kx[u][v] * ind
                        gy += kx[v][u] * ind
                if math.hypot(gx, gy) > 0:
                    out[0, i, j] = 1
    return out


# -- dice --------------------------------------------------------------------


def test_dice_perfect_prediction_is_exactly_zero(rng):
    t = one_hot(rng.integers(0, 3, (2, 5, 5)), 3)
    for eps in (1.0, 1e-3):
        assert dice_loss(T(t), t, eps).item() == 0.0


def test_dice_absent_class_contributes_nothing():
    t = one_hot(np.zeros((1, 3, 3), int), 2)  # class 1 absent everywhere
    assert dice_loss(T(t), t, 1.0).item() == 0.0


def test_dice_hand_count():
    target = np.zeros((1, 1, 3, 3), np.float32)
    target[0, 0, 0, :2] = 1
    target[0, 0, 1, :2] = 1
    probs = np.zeros_like(target)
    probs[0, 0, 0, :2] = 1
    assert dice_loss(T(probs), target, eps=0.0).item() == pytest.approx(1 / 3, abs=1e-7)


@given(seed=st.integers(0, 10_000))
def test_dice_symmetric_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = ops.softmax(T(randn(rng, 2, 3, 4, 4)), 1).data
    t = one_hot(rng.integers(0, 3, (2, 4, 4)), 3)
    a, b = dice_loss(T(p), t).item(), dice_loss(T(t), p).item()
    assert a == pytest.approx(b, abs=1e-7)
    assert a >= 0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(T(np.zeros((1, 2, 3, 3))), np.zeros((1, 3, 3, 3), np.float32))


# -- focal / CE --------------------------------------------------------------


def test_focal_examples():
    t = one_hot(np.zeros((1, 1, 1), int), 2)
    assert focal_loss(T(t), t).item() == 0.0
    half = T(np.full((1, 2, 1, 1), 0.5))
    assert focal_loss(half, t, 2.0).item() == pytest.approx(0.25 * math.log(2), abs=1e-7)


def test_focal_clamps_zero_probability():
    t = one_hot(np.zeros((1, 1, 1), int), 2)
    p = T([[[[0.0]], [[1.0]]]])
    assert focal_loss(p, t, 0.0).item() == pytest.approx(-math.log(1e-7), rel=1e-5)


@given(seed=st.integers(0, 10_000), weighted=st.booleans())
def test_focal_gamma_zero_equals_cross_entropy(seed, weighted):
    rng = np.random.default_rng(seed)
    logits = T(randn(rng, 2, 4, 3, 3))
    labels = rng.integers(0, 4, (2, 3, 3))
    cw = rng.uniform(0.5, 2.0, 4).astype(np.float32) if weighted else None
    f = focal_loss(ops.softmax(logits, 1), one_hot(labels, 4), 0.0, cw).item()
    assert f == pytest.approx(cross_entropy(logits, labels, cw).item(), abs=1e-6)


def test_cross_entropy_examples(rng):
    assert cross_entropy(T(np.zeros((1, 4, 2, 2))), np.zeros((1, 2, 2), int)).item() == pytest.approx(
        math.log(4), abs=1e-6)
    labels = rng.integers(0, 3, (1, 2, 2))
    big = one_hot(labels, 3) * 1e6
    assert cross_entropy(T(big), labels).item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_direct_two_pixel(rng):
    logits = randn(rng, 1, 3, 1, 2).astype(np.float64)
    labels = np.array([[[2, 0]]])
    w = np.array([1.0, 2.0, 0.5])
    num = den = 0.0
    for j in range(2):
        z = logits[0, :, 0, j]
        k = labels[0, 0, j]
        lp = z[k] - math.log(sum(math.exp(v) for v in z))
        num += -w[k] * lp
        den += w[k]
    got = cross_entropy(T(logits), labels, w.astype(np.float32)).item()
    assert got == pytest.approx(num / den, abs=1e-6)


def test_cross_entropy_bad_label():
    with pytest.raises(DataError):
        cross_entropy(T(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 3))


# -- seg / total -------------------------------------------------------------


def test_seg_loss_alpha_one_no_ce_is_weighted_dice(rng):
    logits = T(randn(rng, 2, 3, 4, 4))
    labels = rng.integers(0, 3, (2, 4, 4))
    w = LossWeights(alpha=1.0, lambda_ce=0.0, lambda_dice=1.7)
    expected = 1.7 * dice_loss(ops.softmax(logits, 1), one_hot(labels, 3)).item()
    assert seg_loss(logits, labels, w).item() == pytest.approx(expected, abs=1e-7)


def test_seg_loss_all_zero_weights(rng):
    w = LossWeights(lambda_dice=0.0, lambda_ce=0.0)
    assert seg_loss(T(randn(rng, 1, 3, 4, 4)), rng.integers(0, 3, (1, 4, 4)), w).item() == 0.0


def test_seg_loss_recomposition(rng):
    logits = T(randn(rng, 2, 3, 4, 4))
    labels = rng.integers(0, 3, (2, 4, 4))
    w = LossWeights(alpha=0.3, lambda_dice=0.8, lambda_ce=1.4, per_class_weights=(0.5, 1.0, 2.0))
    terms = seg_loss_terms(logits, labels, w)
    manual = 0.8 * (0.3 * terms.dice.item() + 0.7 * terms.focal.item()) + 1.4 * terms.ce.item()
    assert terms.total.item() == pytest.approx(manual, abs=1e-6)


def test_exclude_background_drops_class_zero(rng):
    logits = T(randn(rng, 1, 3, 4, 4))
    labels = rng.integers(0, 3, (1, 4, 4))
    terms = seg_loss_terms(logits, labels, LossWeights(exclude_background=True))
    probs = ops.softmax(logits, 1)
    expected = dice_loss(probs, one_hot(labels, 3), 1.0, np.array([0, 1, 1], np.float32)).item()
    assert terms.dice.item() == pytest.approx(expected, abs=1e-7)


def _outputs(rng, k=3):
    return NetworkOutput(T(randn(rng, 2, k, 6, 6)), T(randn(rng, 2, 1, 6, 6)), T(randn(rng, 2, k)))


def test_total_loss_components_and_dot_product(rng):
    out = _outputs(rng)
    labels = rng.integers(0, 3, (2, 6, 6))
    w = LossWeights(lambda_seg=1.3, lambda_bdy=0.4, lambda_prs=0.7)
    br = total_loss(out, labels, w)
    c = br.components
    assert br.total.item() == pytest.approx(1.3 * c["seg"] + 0.4 * c["bdy"] + 0.7 * c["prs"], abs=1e-6)


def test_total_loss_only_seg_when_aux_weights_zero(rng):
    out = _outputs(rng)
    labels = rng.integers(0, 3, (2, 6, 6))
    w = LossWeights(lambda_seg=2.0, lambda_bdy=0.0, lambda_prs=0.0)
    assert total_loss(out, labels, w).total.item() == pytest.approx(
        2.0 * seg_loss(out.seg_logits, labels, w).item(), abs=1e-6)


@pytest.mark.parametrize("lam", ["lambda_seg", "lambda_bdy", "lambda_prs"])
def test_total_loss_linear_in_each_lambda(rng, lam):
    out = _outputs(rng)
    labels = rng.integers(0, 3, (2, 6, 6))
    vals = [total_loss(out, labels, LossWeights(**{lam: v})).total.item() for v in (0.0, 1.0, 2.5)]
    slope = vals[1] - vals[0]
    assert vals[2] == pytest.approx(vals[0] + 2.5 * slope, abs=1e-5)


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(alpha=1.5).validate()
    with pytest.raises(ConfigError):
        LossWeights(lambda_bdy=-1).validate()
    with pytest.raises(ConfigError):
        LossWeights(per_class_weights=(1.0, 1.0)).validate(3)


def test_class_weights_from_frequency():
    labels = [np.array([[0, 0, 0, 1]] * 4)]
    w = class_weights_from_frequency(labels, 3)
    assert np.mean(w) == pytest.approx(1.0)
    assert w[1] > w[0]
    assert w[2] > w[1]  # unseen class gets the largest, finite weight
    assert w[1] / w[0] == pytest.approx(math.sqrt(3))


# -- sobel / boundary --------------------------------------------------------


def test_sobel_constant_mask():
    assert not sobel_edges(np.full((5, 5), 2)).any()


def test_sobel_single_pixel_ring():
    m = np.zeros((4, 4), int)
    m[1, 1] = 1
    edges = sobel_edges(m)
    np.testing.assert_array_equal(edges, brute_sobel(m))
    ring = np.zeros((4, 4), np.float32)
    ring[0:3, 0:3] = 1
    ring[1, 1] = 0  # both Sobel kernels vanish at their own centre
    np.testing.assert_array_equal(edges[0], ring)


def test_sobel_square_in_6x6():
    m = np.zeros((6, 6), int)
    m[2:4, 2:4] = 1
    np.testing.assert_array_equal(sobel_edges(m), brute_sobel(m))


@given(seed=st.integers(0, 10_000))
def test_sobel_invariant_to_label_permutation(seed):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 4, (6, 6))
    perm = rng.permutation(4)
    np.testing.assert_array_equal(sobel_edges(m), sobel_edges(perm[m]))


def test_boundary_loss_examples(rng):
    edges = (rng.random((1, 1, 6, 6)) > 0.5).astype(np.float32)
    logits = np.where(edges > 0, 1e6, -1e6).astype(np.float32)
    assert boundary_loss(T(logits), edges).item() == pytest.approx(0.0, abs=1e-6)
    empty = np.zeros((1, 1, 6, 6), np.float32)
    assert boundary_loss(T(np.full_like(empty, -1e6)), empty).item() == 0.0


def test_boundary_loss_matches_two_class_dice(rng):
    logits = randn(rng, 1, 1, 5, 5)
    edges = (rng.random((1, 1, 5, 5)) > 0.6).astype(np.float32)
    p = ops.sigmoid(T(logits))
    # class weights (0, 1) select the foreground channel of the two-class stack
    probs = ops.concat([1.0 - p, p], axis=1)
    target = np.concatenate([1 - edges, edges], axis=1)
    expected = dice_loss(probs, target, 1.0, np.array([0.0, 1.0], np.float32)).item()
    assert boundary_loss(T(logits), edges).item() == pytest.approx(expected, abs=1e-6)


# -- presence ----------------------------------------------------------------


def test_presence_targets_examples(rng):
    assert presence_targets(np.zeros((1, 3, 3), int), 4).tolist() == [[1, 0, 0, 0]]
    assert presence_targets(np.arange(4).reshape(1, 2, 2), 4).tolist() == [[1, 1, 1, 1]]
    labels = rng.integers(0, 5, (3, 4, 4))
    y = presence_targets(labels, 6)
    for n in range(3):
        for k in range(6):
            assert y[n, k] == float((labels[n] == k).sum() > 0)


def test_presence_loss_zero_logits_is_ln2():
    y = np.array([[1, 0, 1]], np.float32)
    assert presence_loss(T(np.zeros((1, 3))), y).item() == pytest.approx(math.log(2), abs=1e-7)


def test_presence_loss_stable_for_huge_logits():
    y = np.array([[1, 0]], np.float32)
    assert presence_loss(T([[1e6, -1e6]]), y).item() == 0.0
    assert math.isfinite(presence_loss(T([[-1e6, 1e6]]), y).item())


@given(seed=st.integers(0, 10_000))
def test_all_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    out = _outputs(rng)
    labels = rng.integers(0, 3, (2, 6, 6))
    br = total_loss(out, labels, LossWeights())
    assert br.total.item() >= 0
    assert all(v >= 0 for v in br.components.values())


@pytest.mark.parametrize("name", sorted(loss_cases()))
def test_loss_gradients(name):
    fn, tensors = loss_cases()[name]()
    errs = check_gradients(fn, tensors)
    assert max(errs) < TOL, errs

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eadk import autodiff as ad
from eadk.errors import ContractError
from eadk.geometry import (
    box_iou,
    box_losses,
    cxcywh_to_xyxy,
    generalized_box_iou,
    giou,
    iou,
    xyxy_to_cxcywh,
)


def test_conversion_examples():
    assert cxcywh_to_xyxy([0.5, 0.5, 1, 1]).tolist() == [0, 0, 1, 1]
    assert cxcywh_to_xyxy([0.25, 0.25, 0.5, 0.5]).tolist() == [0, 0, 0.5, 0.5]


def test_conversion_round_trip():
    b = np.random.default_rng(0).random((1000, 4))
    assert np.max(np.abs(xyxy_to_cxcywh(cxcywh_to_xyxy(b)) - b)) < 1e-15


def test_conversion_rejects_negative_size():
    with pytest.raises(ContractError):
        cxcywh_to_xyxy([0.5, 0.5, -0.1, 0.2])
    with pytest.raises(ContractError):
        xyxy_to_cxcywh([0.5, 0.5, 0.4, 0.6])


def test_iou_examples():
    assert iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert iou([0, 0, 1, 1], [1, 0, 2, 1]) == 0.0
    assert iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, abs=1e-15)


def test_giou_examples():
    assert giou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert giou([0, 0, 1, 1], [1, 0, 2, 1]) == 0.0
    assert giou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7 - 2 / 9, abs=1e-15)
    assert abs(giou([0, 0, 2, 2], [1, 1, 3, 3]) - (-0.079365)) < 1e-6


def test_degenerate_conventions():
    # zero union with a non-empty enclosing box
    assert iou([0, 0, 0, 0], [1, 1, 1, 1]) == 0.0
    assert giou([0, 0, 0, 0], [1, 1, 1, 1]) == -1.0 + 0.0  # -(enclose - 0) / enclose
    # everything collapsed to a point
    assert giou([0.3, 0.3, 0.3, 0.3], [0.3, 0.3, 0.3, 0.3]) == 0.0
    # degenerate inputs stay within the closed range [-1, 1]
    assert giou([0, 0, 0, 0], [0, 1, 1, 1]) == -1.0


def test_box_losses_examples():
    same = ad.tensor([[0.3, 0.4, 0.2, 0.1]])
    l1, g = box_losses(same, [[0.3, 0.4, 0.2, 0.1]])
    assert l1.data.tolist() == [0.0] and g.data.tolist() == [0.0]
    l1, _ = box_losses(ad.tensor([[0.5, 0.5, 0.2, 0.2]]), [[0.5, 0.5, 0.4, 0.4]])
    assert l1.item() == pytest.approx(0.4, abs=1e-15)


def test_giou_loss_gradient():
    rng = np.random.default_rng(1)
    for _ in range(10):
        pred = np.concatenate([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))], axis=1)
        gt = np.concatenate([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))], axis=1)
        assert ad.grad_check(lambda t: box_losses(t, gt)[1].sum(), pred) < 1e-5
        assert ad.grad_check(lambda t: box_losses(t, gt)[0].sum(), pred) < 1e-5


def test_tensor_giou_matches_numpy():
    rng = np.random.default_rng(2)
    a = np.concatenate([rng.random((50, 2)), rng.uniform(0.01, 0.5, (50, 2))], axis=1)
    b = np.concatenate([rng.random((50, 2)), rng.uniform(0.01, 0.5, (50, 2))], axis=1)
    _, g = box_losses(ad.tensor(a), b)
    ref = np.diag(generalized_box_iou(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)))
    assert np.allclose(1 - g.data, ref, atol=1e-14)


# boxes with positive area; degenerate ones are covered by test_degenerate_conventions
corner = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(1e-3, 1), st.floats(1e-3, 1)).map(
    lambda t: [t[0], t[1], t[0] + t[2], t[1] + t[3]]
)


@settings(max_examples=300, deadline=None)
@given(corner, corner)
def test_symmetry_and_ranges(a, b):
    assert iou(a, b) == iou(b, a)
    assert giou(a, b) == giou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert -1.0 < giou(a, b) <= 1.0
    assert giou(a, b) <= iou(a, b) + 1e-15


@settings(max_examples=200, deadline=None)
@given(corner, corner, st.floats(0.01, 100))
def test_scale_invariance(a, b, s):
    a2, b2 = np.array(a) * s, np.array(b) * s
    assert abs(iou(a2, b2) - iou(a, b)) < 1e-12
    assert abs(giou(a2, b2) - giou(a, b)) < 1e-12


def test_giou_equals_iou_iff_enclosing_is_union():
    # nested boxes: enclosing box is the union
    assert giou([0, 0, 1, 1], [0.2, 0.2, 0.5, 0.5]) == iou([0, 0, 1, 1], [0.2, 0.2, 0.5, 0.5])
    assert giou([0, 0, 1, 1], [0.5, 0.5, 1.5, 1.5]) < iou([0, 0, 1, 1], [0.5, 0.5, 1.5, 1.5])


def test_pairwise_shapes():
    a = cxcywh_to_xyxy(np.random.default_rng(3).random((5, 4)))
    assert box_iou(a, a[:3]).shape == (5, 3)
    assert np.allclose(np.diag(box_iou(a, a)), 1.0)

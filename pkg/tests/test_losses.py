import math
import pathlib

import numpy as np
import pytest

from conftest import check_gradients
from jointsal.autodiff import Tensor
from jointsal.errors import ContractError, DataError, DimensionError
from jointsal.losses import STAGE_WEIGHTS, cross_entropy_loss, joint_loss, mse_loss, normalize_target, weighted_total


def test_mse_examples():
    gt = np.random.default_rng(0).random((4, 5))
    assert mse_loss(Tensor(gt), gt).data == 0.0
    assert mse_loss(Tensor(gt + 1), gt).data == pytest.approx(1.0, abs=1e-15)
    assert mse_loss(Tensor([[0.0, 1.0]]), np.array([[1.0, 1.0]])).data == 0.5
    with pytest.raises(DimensionError):
        mse_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


def test_mse_per_image_then_batch(rng):
    pred, gt = rng.random((3, 4, 5)), rng.random((3, 4, 5))
    want = np.mean([np.mean((pred[i] - gt[i]) ** 2) for i in range(3)])
    assert mse_loss(Tensor(pred), gt).data == pytest.approx(want, abs=1e-15)
    check_gradients(lambda p: mse_loss(p, gt), [pred], rng)


def test_ce_examples():
    labels = np.array([[[0, 3], [2, 1]]])
    logits = np.zeros((1, 4, 2, 2))
    assert cross_entropy_loss(Tensor(logits), labels).data == pytest.approx(math.log(4), abs=1e-14)
    sure = np.zeros((1, 4, 2, 2))
    for r in range(2):
        for c in range(2):
            sure[0, labels[0, r, c], r, c] = 40.0
    assert cross_entropy_loss(Tensor(sure), labels).data < 1e-10
    # p(true) = 0.5 and 0.25 on two pixels
    two = np.log(np.array([[[[3.0, 1.0]], [[1.0, 1.0]], [[1.0, 1.0]], [[1.0, 1.0]]]]))  # K=4, H=1, W=2
    val = cross_entropy_loss(Tensor(two), np.array([[[0, 0]]])).data
    assert val == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-14)


def test_ce_bad_label_reports_coordinate():
    labels = np.zeros((1, 3, 3), dtype=int)
    labels[0, 2, 1] = 7
    with pytest.raises(DataError, match=r"\(2, 1\)"):
        cross_entropy_loss(Tensor(np.zeros((1, 4, 3, 3))), labels)


def test_ce_gradient(rng):
    labels = rng.integers(0, 3, (2, 2, 3))
    check_gradients(lambda z: cross_entropy_loss(z, labels), [rng.standard_normal((2, 3, 2, 3))], rng)


def _leaf(v):
    return Tensor(np.array(v), requires_grad=True)


def test_weighted_total_examples():
    m = 0.37
    total = weighted_total([_leaf(m) for _ in range(4)], None, 0.1)
    assert total.data == pytest.approx(1.875 * m, abs=1e-15)
    mses = [_leaf(v) for v in (0.4, 0.2, 0.8, 0.8)]
    ce = _leaf(1.0)
    total = weighted_total(mses, ce, 0.1)
    assert abs(float(total.data) - 0.9) < 1e-12
    total.backward()
    assert float(ce.grad) == 0.1
    assert [float(m.grad) for m in mses] == list(STAGE_WEIGHTS)


def test_lambda_zero_ignores_ce():
    a = weighted_total([_leaf(0.3)], _leaf(5.0), 0.0).data
    b = weighted_total([_leaf(0.3)], _leaf(123.0), 0.0).data
    assert a == b == 0.3


def test_joint_loss_matches_formula(rng):
    gt = rng.random((2, 6, 8)) * 3
    stages = [Tensor(rng.random((2, 6, 8))) for _ in range(4)]
    logits = Tensor(rng.standard_normal((1, 4, 6, 8)))
    mask = rng.integers(0, 4, (1, 6, 8))
    br = joint_loss(stages, gt, logits, mask, 0.1)
    target = gt / gt.max(axis=(1, 2), keepdims=True)
    mses = [np.mean([np.mean((s.data[i] - target[i]) ** 2) for i in range(2)]) for s in stages]
    p = np.exp(logits.data) / np.exp(logits.data).sum(1, keepdims=True)
    ce = -np.mean(np.log(np.take_along_axis(p, mask[:, None], 1)))
    assert br.mse_per_stage == pytest.approx(mses, abs=1e-15)
    assert br.ce == pytest.approx(ce, abs=1e-14)
    assert br.total_value == pytest.approx(sum(w * m for w, m in zip(STAGE_WEIGHTS, mses)) + 0.1 * ce, abs=1e-14)


def test_joint_loss_contracts(rng):
    st = [Tensor(np.zeros((1, 2, 2)))]
    with pytest.raises(ContractError):
        joint_loss(st, None)
    with pytest.raises(ContractError):
        joint_loss(st, np.ones((1, 2, 2)), Tensor(np.zeros((1, 2, 2, 2))), None)
    with pytest.raises(ContractError):
        joint_loss(st, np.ones((1, 2, 2)), loss_lambda=-1)
    br = joint_loss(st, np.ones((1, 2, 2)))
    assert br.ce == 0.0


def test_normalize_target():
    t = normalize_target(np.array([[[0.0, 2.0], [1.0, 4.0]], [[0.0, 0.0], [0.0, 0.0]]]))
    assert t[0].max() == 1.0 and t[0, 0, 1] == 0.5
    assert not t[1].any()


def test_stage_weights_single_source():
    assert STAGE_WEIGHTS == (1.0, 0.5, 0.25, 0.125)
    src = pathlib.Path(__file__).resolve().parents[1] / "src" / "jointsal"
    hits = [p.name for p in src.glob("*.py") if "0.125" in p.read_text()]
    assert hits == ["losses.py"]

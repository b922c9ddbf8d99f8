import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import ContractError, DegenerateTargetError
from losses import LossInputs, cross_entropy_loss, dcel, dice_loss, evaluate_loss, flt_presence_loss, gdl, get_loss


def _problem(seed: int, k: int = 2, shape=(4, 4, 4)):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn((1, k, *shape), generator=g, dtype=torch.float64)
    target = torch.randint(0, k, (1, *shape), generator=g)
    flat = target.view(-1)
    flat[:k] = torch.arange(k)  # every class present
    return logits, target


def _numeric_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    out = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn(x).item()
        flat[i] = orig - eps
        lo = fn(x).item()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return grad


@pytest.mark.parametrize("loss", [dcel, gdl])
def test_analytic_gradient_matches_finite_differences(loss):
    for seed in range(20):
        logits, target = _problem(seed)
        x = logits.clone().requires_grad_(True)
        loss(x, target).backward()
        numeric = _numeric_grad(lambda z: loss(z, target), logits.clone())
        rel = (x.grad - numeric).norm() / numeric.norm().clamp_min(1e-12)
        assert rel.item() < 1e-6


def test_perfect_prediction_has_near_zero_dice_loss():
    target = torch.randint(0, 4, (2, 6, 6, 6), generator=torch.Generator().manual_seed(0))
    logits = 40.0 * F.one_hot(target, 4).movedim(-1, 1).double()
    assert dice_loss(logits, target).item() < 1e-4
    assert gdl(logits, target).item() < 1e-4
    assert dcel(logits, target).item() < 1e-4


def test_wrong_prediction_is_penalised():
    target = torch.zeros((1, 4, 4, 4), dtype=torch.long)
    target[0, :2] = 1
    good = 10.0 * F.one_hot(target, 2).movedim(-1, 1).double()
    assert dcel(-good, target) > dcel(good, target)
    assert gdl(-good, target) > gdl(good, target)


def test_unbatched_inputs_match_batched():
    logits, target = _problem(3, k=4, shape=(5, 5, 5))
    for fn in (dice_loss, cross_entropy_loss, dcel, gdl):
        assert torch.allclose(fn(logits[0], target[0]), fn(logits, target))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), axis=st.integers(0, 2))
def test_losses_ignore_voxel_order(seed, axis):
    logits, target = _problem(seed, k=3, shape=(4, 5, 6))
    flipped_logits = torch.flip(logits, dims=(axis + 2,))
    flipped_target = torch.flip(target, dims=(axis + 1,))
    for fn in (dcel, gdl):
        assert torch.allclose(fn(logits, target), fn(flipped_logits, flipped_target), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), perm=st.permutations([0, 1, 2]))
def test_losses_follow_a_relabeling_of_classes(seed, perm):
    logits, target = _problem(seed, k=3, shape=(4, 5, 6))
    order = torch.tensor(perm)
    relabeled_logits = logits[:, order]
    relabeled_target = torch.argsort(order)[target]
    for fn in (dice_loss, cross_entropy_loss, dcel, gdl):
        assert torch.allclose(fn(logits, target), fn(relabeled_logits, relabeled_target), atol=1e-12)


def test_losses_ignore_per_voxel_logit_shift():
    logits, target = _problem(6, k=4, shape=(5, 5, 5))
    shift = 7.0 * torch.randn((1, 1, 5, 5, 5), generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    for fn in (dice_loss, cross_entropy_loss, dcel, gdl):
        assert torch.allclose(fn(logits, target), fn(logits + shift, target), atol=1e-10)


def test_uniform_logits_closed_forms():
    two = torch.zeros((1, 2, 4, 4, 4), dtype=torch.float64)
    balanced2 = (torch.arange(64).reshape(1, 4, 4, 4) % 2).long()
    assert dice_loss(two, balanced2).item() == pytest.approx(0.5, abs=1e-6)

    four = torch.zeros((1, 4, 4, 4, 4), dtype=torch.float64)
    balanced4 = (torch.arange(64).reshape(1, 4, 4, 4) % 4).long()
    assert cross_entropy_loss(four, balanced4).item() == pytest.approx(np.log(4.0), abs=1e-12)
    assert dice_loss(four, balanced4).item() == pytest.approx(0.75, abs=1e-6)
    assert dcel(four, balanced4).item() == pytest.approx(0.75 + np.log(4.0), abs=1e-6)
    assert dcel(four, balanced4).item() == pytest.approx(
        dice_loss(four, balanced4).item() + cross_entropy_loss(four, balanced4).item(), abs=1e-12)


def test_single_voxel_cross_entropy():
    logits = torch.tensor([1.0, -0.5, 2.0], dtype=torch.float64).reshape(3, 1, 1, 1)
    target = torch.tensor([[[2]]])
    expected = -torch.log_softmax(logits.reshape(-1), dim=0)[2]
    assert cross_entropy_loss(logits, target).item() == pytest.approx(expected.item(), abs=1e-12)


def test_gdl_punishes_a_missed_minority_class_harder_than_dice():
    target = torch.zeros((1, 8, 8, 8), dtype=torch.long)
    target[0, 3:5, 3:5, 3] = 1  # four voxels
    all_background = torch.zeros((1, 2, 8, 8, 8), dtype=torch.float64)
    all_background[:, 0] = 30.0
    generalized = gdl(all_background, target).item()
    plain = dice_loss(all_background, target).item()
    assert plain == pytest.approx(0.5, abs=0.01)
    assert generalized > 0.95
    assert generalized > plain


def test_gdl_with_absent_class_matches_hand_computation():
    logits, target = _problem(1, k=3)
    target = torch.where(target == 2, torch.zeros_like(target), target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, 3).movedim(-1, 1).double()
    dims = (0, 2, 3, 4)
    vol = onehot.sum(dims)
    w = torch.where(vol > 0, 1.0 / vol.clamp_min(1) ** 2, torch.zeros_like(vol))
    num = 2 * (w * (probs * onehot).sum(dims)).sum()
    den = (w * (probs.sum(dims) + onehot.sum(dims))).sum()
    assert torch.allclose(gdl(logits, target), 1 - (num + 1e-5) / (den + 1e-5))
    assert torch.allclose(gdl(logits, target, epsilon=0.5), 1 - (num + 0.5) / (den + 0.5))
    cw = torch.tensor([1.0, 3.0, 1.0], dtype=torch.float64)
    weighted_num = 2 * (cw * w * (probs * onehot).sum(dims)).sum()
    weighted_den = (cw * w * (probs.sum(dims) + onehot.sum(dims))).sum()
    assert torch.allclose(gdl(logits, target, class_weights=[1.0, 3.0, 1.0]),
                          1 - (weighted_num + 1e-5) / (weighted_den + 1e-5))


def test_gdl_all_classes_absent():
    logits = torch.randn(1, 3, 4, 4, 4, dtype=torch.float64)
    target = torch.zeros((1, 4, 4, 4), dtype=torch.long)
    with pytest.raises(DegenerateTargetError):
        gdl(logits, target, include_background=False)
    assert torch.isfinite(gdl(logits, target))


def test_dice_without_background_averages_foreground_only():
    logits, target = _problem(2, k=3)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, 3).movedim(-1, 1).double()
    dims = (0, 2, 3, 4)
    per_class = (2 * (probs * onehot).sum(dims) + 1e-5) / (probs.sum(dims) + onehot.sum(dims) + 1e-5)
    assert torch.allclose(dice_loss(logits, target, include_background=False), 1 - per_class[1:].mean())
    assert torch.allclose(dice_loss(logits, target), 1 - per_class.mean())


def test_class_weights_shift_dice():
    logits, target = _problem(4, k=3)
    plain = dice_loss(logits, target)
    assert torch.allclose(dice_loss(logits, target, class_weights=[1.0, 1.0, 1.0]), plain)
    assert not torch.allclose(dice_loss(logits, target, class_weights=[0.1, 1.0, 5.0]), plain)


def test_shape_contracts():
    with pytest.raises(ContractError):
        dcel(torch.randn(1, 2, 4, 4, 4), torch.zeros((1, 4, 4, 5), dtype=torch.long))
    with pytest.raises(ContractError):
        dcel(torch.randn(1, 2, 4, 4, 4), torch.zeros((1, 4, 4, 4)))
    with pytest.raises(ContractError):
        dcel(torch.randn(1, 2, 4, 4, 4), torch.full((1, 4, 4, 4), 2, dtype=torch.long))
    with pytest.raises(ContractError):
        LossInputs(torch.randn(1, 2, 4, 4, 4), torch.zeros((1, 4, 4, 4), dtype=torch.long), class_weights=[1.0])


def test_registry():
    logits, target = _problem(5, k=2)
    assert torch.allclose(get_loss("dcel")(logits, target), dcel(logits, target))
    inputs = LossInputs(logits, target)
    assert torch.allclose(evaluate_loss("gdl", inputs), gdl(logits, target))
    with pytest.raises(ContractError):
        get_loss("focal")


def test_flt_presence_loss_is_binary_cross_entropy():
    logits = torch.tensor([2.0, -1.0, 0.5], dtype=torch.float64)
    flags = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    p = torch.sigmoid(logits)
    expected = -(flags * p.log() + (1 - flags) * (1 - p).log()).mean()
    assert torch.allclose(flt_presence_loss(logits, flags), expected)
    with pytest.raises(ContractError):
        flt_presence_loss(logits, flags[:2])
    assert np.isfinite(flt_presence_loss(logits, flags).item())

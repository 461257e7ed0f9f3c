import pytest
import torch

from conmatch_kit.gradcheck import LOSSES, central_difference, check_case, max_relative_error


def test_central_difference_on_quadratic():
    w = torch.tensor([1.0, -2.0, 0.5])
    grad = central_difference(lambda: (w ** 2).sum() + 3 * w[0], {"w": w})["w"]
    assert torch.allclose(grad, 2 * torch.tensor([1.0, -2.0, 0.5]) + torch.tensor([3.0, 0, 0]), atol=1e-8)
    assert torch.equal(w, torch.tensor([1.0, -2.0, 0.5]))


def test_relative_error_floor():
    a = {"w": torch.tensor([1e-12, 1.0])}
    n = {"w": torch.tensor([3e-12, 1.0])}
    assert max_relative_error(a, n) < 1e-6
    assert max_relative_error(a, n, floor=0.0) == pytest.approx(2 / 3)


@pytest.mark.parametrize("loss", LOSSES)
@pytest.mark.parametrize("seed", [100, 101, 102])
def test_loss_gradients(loss, seed):
    result = check_case(loss, seed)
    assert result.n_coords > 0
    assert result.rel_error < 1e-4, result


def test_unknown_loss():
    with pytest.raises(ValueError):
        check_case("nope", 0)

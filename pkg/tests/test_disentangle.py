import math

import numpy as np
import pytest
import torch

from conftest import central_difference, check_param_gradients, relative_error
from dgadmil.disentangle import (
    Decoupler,
    RegressionHead,
    decouple,
    draw_partners,
    loss_decp1,
    loss_decp2,
    loss_mse0,
    preliminary_age,
    safe_cosine,
)


def cos_np(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


def decp1_literal(e_stru, partners):
    """Direct transcription: L = -(1/N) sum_i (1/K) sum_j 1[i != k_i] cos(e_ij, e_kj)."""
    N, K = e_stru.shape[:2]
    total = 0.0
    for i in range(N):
        k = partners[i]
        l_i = sum((i != k) * cos_np(e_stru[i, j].ravel(), e_stru[k, j].ravel()) for j in range(K)) / K
        total += l_i
    return -total / N


def test_zero_decoupler_output():
    psi = Decoupler(4).double()
    psi.zero_output()
    e = torch.randn(3, 4, 2, 2, dtype=torch.float64)
    e_age, e_stru = decouple(psi, e)
    assert torch.equal(e_age, e) and torch.equal(e_stru, torch.zeros_like(e))


def test_additivity():
    psi = Decoupler(4)
    e = torch.randn(5, 4, 3, 3)
    e_age, e_stru = decouple(psi, e)
    # (e - s) + s reproduces e up to one rounding of the subtraction
    assert torch.allclose(e_age + e_stru, e, rtol=0, atol=4 * torch.finfo(e.dtype).eps * float(e_stru.abs().max() + 1))
    assert e_age.shape == e.shape


def test_decoupler_gradients():
    torch.manual_seed(0)
    psi = Decoupler(3).double()
    e = torch.randn(2, 3, 2, 2, dtype=torch.float64)
    w = torch.randn(2, 3, 2, 2, dtype=torch.float64)
    loss = lambda x=e: (decouple(psi, x)[1] * w).sum()
    assert check_param_gradients(loss, list(psi.parameters())) < 1e-4
    x = e.clone().requires_grad_(True)
    (ga,) = torch.autograd.grad(loss(x), x)
    assert relative_error(ga, central_difference(loss, e)) < 1e-4


def test_gap_of_constant_maps():
    phi = RegressionHead(2, hidden=4)
    for H in (1, 3, 5):
        e = torch.full((1, 3, 2, H, H), 0.7)
        assert torch.allclose(e.mean(dim=(-2, -1)).mean(dim=1), torch.full((1, 2), 0.7))


def test_zero_mlp_returns_bias():
    phi = RegressionHead(2, hidden=4, age_prior=61.5)
    e = torch.randn(3, 4, 2, 5, 5)
    assert torch.equal(preliminary_age(phi, e), torch.full((3,), 61.5))


def test_one_layer_head_arithmetic():
    phi = torch.nn.Linear(2, 1).double()
    with torch.no_grad():
        phi.weight.copy_(torch.tensor([[2.0, -1.0]]))
        phi.bias.fill_(50.0)
    e = torch.zeros(1, 2, 2, 2, 2, dtype=torch.float64)
    e[0, :, 0] = 3.0  # channel 0 constant 3
    e[0, 0, 1] = 1.0
    e[0, 1, 1] = 5.0  # channel 1 instance means 1 and 5
    y0 = preliminary_age(lambda v: phi(v).squeeze(-1), e)
    assert float(y0) == pytest.approx(50 + 2 * 3 - 1 * 3)


def test_mse0_values():
    y = torch.tensor([2.0, 5.0], dtype=torch.float64)
    assert float(loss_mse0(y, y)) == 0
    assert float(loss_mse0(torch.tensor([1.0, 3.0], dtype=torch.float64), y)) == 2.5


def test_mse0_gradient():
    y = torch.tensor([60.0, 70.0, 55.0], dtype=torch.float64)
    y0 = torch.tensor([58.0, 71.0, 50.0], dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(loss_mse0(y0, y), y0)
    assert torch.allclose(g, 2 * (y0 - y).detach() / 3)
    assert relative_error(g, central_difference(lambda v: loss_mse0(v, y), y0.detach())) < 1e-4


def test_decp1_identical():
    e = torch.randn(1, 3, 2, 2, 2).expand(4, -1, -1, -1, -1)
    partners = torch.tensor([1, 2, 3, 0])
    assert float(loss_decp1(e, partners)) == pytest.approx(-1.0, abs=1e-6)


def test_decp1_orthogonal():
    e = torch.zeros(3, 2, 3)
    for i in range(3):
        e[i, :, i] = 1.0
    assert float(loss_decp1(e, torch.tensor([1, 2, 0]))) == 0.0


def test_decp1_self_pairs_vanish():
    gen = torch.Generator().manual_seed(3)
    e = torch.randn(5, 3, 2, 2, 2, dtype=torch.float64, generator=gen)
    partners = torch.tensor([0, 3, 2, 1, 1])
    assert float(loss_decp1(e, partners)) == pytest.approx(decp1_literal(e.numpy(), partners.tolist()), abs=1e-12)


def test_decp1_seeded_and_bounded():
    e = torch.randn(6, 2, 4)
    a = loss_decp1(e, seed=9)
    b = loss_decp1(e, seed=9)
    assert float(a) == float(b)
    assert -1 <= float(a) <= 1
    p = draw_partners(6, seed=9)
    assert float(a) == pytest.approx(decp1_literal(e.numpy(), p.tolist()), abs=1e-6)


def test_decp1_small_batch():
    assert float(loss_decp1(torch.randn(1, 2, 4))) == 0.0


def test_decp1_gradient():
    gen = torch.Generator().manual_seed(4)
    e = torch.randn(3, 2, 2, 2, dtype=torch.float64, generator=gen)
    partners = torch.tensor([2, 0, 1])
    x = e.clone().requires_grad_(True)
    (ga,) = torch.autograd.grad(loss_decp1(x, partners), x)
    assert relative_error(ga, central_difference(lambda v: loss_decp1(v, partners), e)) < 1e-4


@pytest.mark.parametrize(
    "z_age, expected",
    [(lambda s: torch.stack([s[:, 1], -s[:, 0]], 1), 0.0), (lambda s: s, 1.0), (lambda s: -s, -1.0)],
)
def test_decp2_values(z_age, expected):
    z_stru = torch.tensor([[1.0, 2.0], [-3.0, 0.5]], dtype=torch.float64)
    assert float(loss_decp2(z_stru, z_age(z_stru))) == pytest.approx(expected, abs=1e-12)


def test_decp2_squared_and_partner():
    z_stru = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    z_age = torch.tensor([[-1.0, 0.0], [1.0, 0.0]])
    assert float(loss_decp2(z_stru, z_age)) == -0.5
    assert float(loss_decp2(z_stru, z_age, squared=True)) == 0.5
    assert float(loss_decp2(z_stru, z_age, partners=torch.tensor([1, 0]))) == 0.5


def test_decp2_gradient():
    gen = torch.Generator().manual_seed(5)
    zs = torch.randn(4, 3, dtype=torch.float64, generator=gen)
    za = torch.randn(4, 3, dtype=torch.float64, generator=gen)
    x = zs.clone().requires_grad_(True)
    y = za.clone().requires_grad_(True)
    gx, gy = torch.autograd.grad(loss_decp2(x, y), (x, y))
    assert relative_error(gx, central_difference(lambda v: loss_decp2(v, za), zs)) < 1e-4
    assert relative_error(gy, central_difference(lambda v: loss_decp2(zs, v), za)) < 1e-4


def test_cosine_zero_vector():
    a = torch.zeros(3, requires_grad=True)
    b = torch.tensor([1.0, 2.0, 3.0])
    c = safe_cosine(a, b)
    c.backward()
    assert float(c) == 0.0
    assert torch.equal(a.grad, torch.zeros(3))

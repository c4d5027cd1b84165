import numpy as np
import pytest
import torch

from dgadmil.volume_synth import GeneratorConfig

torch.set_num_threads(1)


@pytest.fixture
def small_cfg():
    return GeneratorConfig(shape=(12, 18, 12), slab_instances=2, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at float64 ``x`` by central differences."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        with torch.no_grad():
            hi = float(fn(flat.view_as(x)))
            flat[i] = old - eps
            lo = float(fn(flat.view_as(x)))
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    """||a - b|| / max(||a||, ||b||); the floor keeps structurally zero gradients
    (e.g. a conv bias feeding batch norm) from turning noise into 100% error."""
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), floor))


def check_param_gradients(loss_fn, params, eps: float = 1e-6) -> float:
    """Worst per-tensor relative error between autograd and central differences.

    Tensors whose gradient is negligible next to the whole (e.g. a conv bias
    feeding batch norm, structurally zero) are measured against 1e-3 of the
    global gradient norm instead of their own.
    """
    loss = loss_fn()
    analytic = [torch.zeros_like(p) if g is None else g
                for p, g in zip(params, torch.autograd.grad(loss, params, allow_unused=True))]
    numeric = []
    for p in params:
        with torch.no_grad():
            numeric.append(central_difference(lambda v: _with_value(p, v, loss_fn), p.detach().clone(), eps))
    scale = float(torch.cat([g.reshape(-1) for g in analytic]).norm())
    return max(relative_error(ga, gn, floor=max(1e-3 * scale, 1e-9)) for ga, gn in zip(analytic, numeric))


def _with_value(p, v, loss_fn):
    saved = p.detach().clone()
    p.copy_(v)
    out = loss_fn()
    p.copy_(saved)
    return out


TINY_CHANNELS = (4, 8)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 small phantoms on disk plus their loaded bag sets."""
    from dgadmil.bagging import BagConfig
    from dgadmil.training import load_bags
    from dgadmil.volume_synth import synth_dataset

    root = tmp_path_factory.mktemp("tiny")
    cfg = GeneratorConfig(shape=(12, 18, 12), slab_instances=2, seed=5)
    man = synth_dataset(cfg, 24, (0.5, 0.25, 0.25), root)
    bag_cfg = BagConfig(pad_multiple=4)
    sets = {s: load_bags(man, s, bag_cfg) for s in ("train", "val", "test")}
    return root, man, bag_cfg, sets


def tiny_model_cfg(**kw):
    from dgadmil.backbone import BackboneConfig
    from dgadmil.gat import GatConfig
    from dgadmil.model import ModelConfig

    gat = GatConfig(heads=2, n_edges=3)
    return ModelConfig(backbone=BackboneConfig(channels=TINY_CHANNELS, input_size=(12, 12)),
                       spatial=gat, instance=gat, head_hidden=8, **kw)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

import pytest
import torch

from ckarank.experiments.optim import AdamWState, TrainConfig, optimizer_step


def test_matches_torch_adamw():
    g = torch.Generator().manual_seed(0)
    p = torch.randn(5, 4, generator=g, dtype=torch.float64)
    ref = torch.nn.Parameter(p.clone())
    ours = p.clone()
    cfg = TrainConfig(learning_rate=3e-3, weight_decay=0.05)
    opt = torch.optim.AdamW([ref], lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps_opt,
                            weight_decay=cfg.weight_decay)
    state = AdamWState()
    for _ in range(25):
        grad = torch.randn(5, 4, generator=g, dtype=torch.float64)
        ref.grad = grad.clone()
        opt.step()
        optimizer_step([ours], [grad], cfg, state)
    assert torch.allclose(ours, ref.detach(), atol=1e-12, rtol=0)


def test_first_step_is_lr_times_sign():
    p = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
    optimizer_step([p], [torch.tensor([0.5, -4.0, 1e-3], dtype=torch.float64)], cfg, AdamWState())
    assert torch.allclose(p, torch.tensor([0.9, -1.9, 2.9], dtype=torch.float64), atol=1e-4)


def test_zero_gradient_only_decays():
    p = torch.tensor([2.0, -4.0], dtype=torch.float64)
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
    optimizer_step([p], [torch.zeros(2, dtype=torch.float64)], cfg, AdamWState())
    assert torch.allclose(p, torch.tensor([2.0 * 0.95, -4.0 * 0.95], dtype=torch.float64))


def test_missing_gradient_treated_as_zero():
    p = torch.tensor([1.0], dtype=torch.float64)
    optimizer_step([p], [None], TrainConfig(learning_rate=0.1, weight_decay=0.0), AdamWState())
    assert p.item() == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        optimizer_step([torch.zeros(2)], [torch.zeros(3)], TrainConfig(), AdamWState())


@pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"seeds": ()}, {"epochs": -1}, {"batch_size": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)

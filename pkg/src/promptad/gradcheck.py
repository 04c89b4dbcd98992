"""Central finite-difference verification of every differentiable component.

Each registered component builds a fresh double-precision scenario: a list of
parameter tensors and a closure mapping them to a scalar. One random
coordinate is probed per trial; the worst relative error over all trials is
returned. Relative error uses a small floor so near-zero gradients compare
absolutely.
"""

from __future__ import annotations

import torch

from .adapter import Adapter
from .config import TextEncoderConfig
from .deform import DeformableKernel, parse_kernel_shape
from .errors import ConfigurationError
from .losses import loss_dice, loss_focal, loss_global
from .maps import stage_interaction
from .textenc import ToyTextEncoder, tokenize

FD_STEP = 1e-6
REL_FLOOR = 1e-6


def _scenario_adapter(gen):
    adapter = Adapter(12, 3, seed=int(torch.randint(0, 10_000, (1,), generator=gen)),
                      dtype=torch.float64)
    x = torch.randn(12, generator=gen, dtype=torch.float64)
    probe = torch.randn(12, generator=gen, dtype=torch.float64)
    params = [x, adapter.w1, adapter.b1, adapter.w2, adapter.b2]

    def forward():
        return (adapter(x) * probe).sum()

    return params, forward


def _scenario_text_prefix(gen):
    cfg = TextEncoderConfig(width=16, depth=2, heads=2, max_len=48)
    enc = ToyTextEncoder(cfg, embed_dim=8,
                         seed=int(torch.randint(0, 10_000, (1,), generator=gen)),
                         dtype=torch.float64)
    tokens = tokenize("damaged disc with hole", prefix_slots=4, max_len=cfg.max_len)
    prefix = (torch.randn(4, 16, generator=gen, dtype=torch.float64) * 0.1)
    offset = (torch.randn(16, generator=gen, dtype=torch.float64) * 0.1)
    probe = torch.randn(8, generator=gen, dtype=torch.float64)
    params = [prefix, offset]

    def forward():
        return (enc.encode(tokens, prefix, offset) * probe).sum()

    return params, forward


def _deformable_kernel(gen, shape="3x3"):
    kernel = DeformableKernel(parse_kernel_shape(shape), 4, deformable=True,
                              dtype=torch.float64)
    with torch.no_grad():
        # non-integer sampling points keep bilinear interpolation away from
        # its kinks at the grid lattice
        kernel.offset_conv.bias.uniform_(0.05, 0.45, generator=gen)
        kernel.offset_conv.weight.normal_(0.0, 0.02, generator=gen)
        kernel.tap_weights.normal_(0.3, 0.1, generator=gen)
        kernel.projection.normal_(0.0, 0.5, generator=gen)
    return kernel


def _scenario_deformable(gen):
    kernel = _deformable_kernel(gen)
    grid = torch.randn(5, 5, 4, generator=gen, dtype=torch.float64)
    probe = torch.randn(5, 5, 4, generator=gen, dtype=torch.float64)
    params = [grid, kernel.tap_weights, kernel.projection,
              kernel.offset_conv.weight, kernel.offset_conv.bias]

    def forward():
        return (kernel.aggregate(grid) * probe).sum()

    return params, forward


def _scenario_stage_interaction(gen):
    kernels = [_deformable_kernel(gen, "3x3"), _deformable_kernel(gen, "1x3")]
    grid = torch.randn(5, 5, 4, generator=gen, dtype=torch.float64)
    t = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    t = torch.nn.functional.normalize(t, dim=-1)
    t_n, t_a = t[0].clone(), t[1].clone()
    probe = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
    params = [grid, t_n, t_a]
    for k in kernels:
        params += [k.tap_weights, k.projection, k.offset_conv.weight, k.offset_conv.bias]

    def forward():
        maps = stage_interaction(grid, t_n, t_a, kernels, (8, 8))
        return (maps.normal * probe[0]).sum() + (maps.anomaly * probe[1]).sum()

    return params, forward


def _scenario_loss_focal(gen):
    pred = torch.rand(6, 6, generator=gen, dtype=torch.float64) * 0.9 + 0.05
    mask = torch.randint(0, 2, (6, 6), generator=gen).double()
    params = [pred]

    def forward():
        return loss_focal(pred, mask, gamma=2.0)

    return params, forward


def _scenario_loss_dice(gen):
    pred = torch.rand(6, 6, generator=gen, dtype=torch.float64) * 0.9 + 0.05
    mask = torch.randint(0, 2, (6, 6), generator=gen).double()
    params = [pred]

    def forward():
        return loss_dice(pred, mask)

    return params, forward


def _scenario_loss_global(gen):
    prob = torch.rand(2, generator=gen, dtype=torch.float64) * 0.6 + 0.2
    label = int(torch.randint(0, 2, (1,), generator=gen))
    params = [prob]

    def forward():
        return loss_global(prob, label)

    return params, forward


COMPONENTS = {
    "adapter": _scenario_adapter,
    "text_prefix": _scenario_text_prefix,
    "deformable_aggregate": _scenario_deformable,
    "stage_interaction": _scenario_stage_interaction,
    "loss_focal": _scenario_loss_focal,
    "loss_dice": _scenario_loss_dice,
    "loss_global": _scenario_loss_global,
}


def grad_check(component: str, trials: int = 20, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences.

    One random parameter coordinate is probed per trial, each on a freshly
    sampled double-precision scenario.
    """
    if component not in COMPONENTS:
        raise ConfigurationError(
            f"unknown component {component!r}; have {sorted(COMPONENTS)}")
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(trials):
        params, forward = COMPONENTS[component](gen)
        for p in params:
            p.requires_grad_(True)
            if p.grad is not None:
                p.grad = None
        value = forward()
        value.backward()

        pi = int(torch.randint(0, len(params), (1,), generator=gen))
        param = params[pi]
        ci = int(torch.randint(0, param.numel(), (1,), generator=gen))
        analytic = float(param.grad.reshape(-1)[ci])

        with torch.no_grad():
            flat = param.reshape(-1)
            orig = float(flat[ci])
            h = FD_STEP * max(1.0, abs(orig))
            flat[ci] = orig + h
            f_plus = float(forward())
            flat[ci] = orig - h
            f_minus = float(forward())
            flat[ci] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), REL_FLOOR)
        worst = max(worst, err)
    return worst

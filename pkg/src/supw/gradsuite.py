"""Finite-difference verification of every hand-written backward pass.

Each case is a scalar function of one array with an analytic gradient; the
suite compares it against central differences in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import GradPair, GradcheckReport, gradcheck
from .segnet import HOOKS, SegNetwork, build
from .slic import SlicParams, SuperpixelGrid, slic_image
from .slic_loss import bce, l_sg
from .whitening import IswState, dwt_loss, isw_loss

__all__ = ["GradCase", "gradient_cases", "run_suite"]


@dataclass
class GradCase:
    name: str
    func: object
    point: np.ndarray


def _frozen_isw_state(rng) -> IswState:
    state = IswState(HOOKS, warmup_epochs=1)
    for lid, c in zip(HOOKS, (8, 16, 32)):
        v = rng.random((c, c))
        state.v_sum[lid], state.v_count[lid] = v + v.T, 1
    state.freeze(1)
    return state


def _total_loss_cases(rng, size: int = 16):
    from .synthdata import SOURCE, gen_sample
    from .train import TrainConfig, total_loss

    img, mask = gen_sample(SOURCE, size, int(rng.integers(1 << 30)))
    x = img.transpose(2, 0, 1)[None]
    y = mask[None].astype(np.float64)
    cfg = TrainConfig(input_size=size, slic_k=4, slic_m=10)
    grids = [slic_image(img, SlicParams(k=4, m=10))]
    state = _frozen_isw_state(rng)
    base = build(seed=int(rng.integers(1 << 30)))

    cases = []
    for name in sorted(base.params):
        def f(theta, name=name):
            params = dict(base.params)
            params[name] = theta
            br = total_loss(SegNetwork(params), x, y, cfg, state, epoch=1, seed=0,
                            grids=grids, collect=False)
            return GradPair(np.float64(br.total), lambda g: (g * br.grads[name],))
        cases.append(GradCase(f"total_loss[{name}]", f, base.params[name].copy()))
    return cases


def gradient_cases(seed: int = 0, include_network: bool = True) -> list:
    """The verification cases; points are kept away from kinks and clamps."""
    rng = np.random.default_rng(seed)
    y = (rng.random((4, 5)) > 0.5).astype(np.float64)
    labels = np.repeat(np.arange(4), 5).reshape(4, 5)
    grid = SuperpixelGrid(labels, 4)
    cov = np.eye(5) + rng.uniform(0.1, 0.6, (5, 5)) * rng.choice([-1, 1], (5, 5))
    mask = rng.random((5, 5)) > 0.5
    cases = [
        GradCase("bce", lambda p: bce(y, p), rng.uniform(0.05, 0.95, (4, 5))),
        GradCase("l_sg_soft", lambda p: l_sg(p, grid, 0.9, "soft"), rng.uniform(0.3, 0.7, (4, 5))),
        GradCase("dwt_loss", dwt_loss, cov.copy()),
        GradCase("isw_loss", lambda c: isw_loss(c, mask), cov.copy()),
    ]
    if include_network:
        cases += _total_loss_cases(rng)
    return cases


def run_suite(seed: int = 0, h: float = 1e-5, rel_tol: float = 1e-3,
              include_network: bool = True) -> list[tuple[str, GradcheckReport]]:
    return [(c.name, gradcheck(c.func, c.point, h=h, rel_tol=rel_tol))
            for c in gradient_cases(seed, include_network)]

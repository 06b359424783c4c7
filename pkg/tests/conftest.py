import math

import numpy as np
import pytest
import torch

from madan.datagen import layout_seeds_for, render_scene, sample_domain_spec
from madan.trainer import TrainConfig, TrainData

torch.set_num_threads(1)


def directional_fd_check(fn, tensors, n_dirs=3, eps=1e-5, seed=0):
    """Compare the autograd directional derivative of scalar ``fn()`` along
    random unit directions over ``tensors`` with a central difference.
    Returns the worst relative error.

    The networks are piecewise smooth (ReLU, leaky ReLU, L1).  When the
    forward and backward one-sided slopes disagree the probe straddled a
    kink, and the step is shrunk by 10x (down to 1e-8) before comparing."""
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        norm = float(sum((d * d).sum() for d in dirs)) ** 0.5
        dirs = [d / norm for d in dirs]
        out = fn()
        grads = torch.autograd.grad(out, tensors, allow_unused=True)
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)
        center = out.item()
        for k in range(round(-math.log10(eps)), 9):
            step = 10.0 ** -k
            plus, minus = _shifted(fn, tensors, dirs, step), _shifted(fn, tensors, dirs, -step)
            fwd, bwd = (plus - center) / step, (center - minus) / step
            if abs(fwd - bwd) <= 1e-5 * max(abs(fwd), abs(bwd), 1e-12):
                break
        numeric = (plus - minus) / (2 * step)
        scale = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def _shifted(fn, tensors, dirs, step):
    with torch.no_grad():
        saved = [t.detach().clone() for t in tensors]
        for t, d in zip(tensors, dirs):
            t.add_(step * d)
        value = float(fn())
        for t, s in zip(tensors, saved):
            t.copy_(s)
    return value


@pytest.fixture
def fd_check():
    return directional_fd_check


def tiny_config(**kw) -> TrainConfig:
    base = dict(
        epochs=2, seg_epochs=1, batch_size=4, sad_freeze_epochs=1, ccd_freeze_epochs=1,
        outer_rounds=1, crop_size=16, gen_width=4, gen_blocks=1, disc_width=4,
        feat_disc_width=8, seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_data(num_sources=2, n=6, n_target=6, size=32, seed=5, offset=0) -> TrainData:
    def render(spec, count, offset=0):
        xs, ys = [], []
        for s in layout_seeds_for(spec, count, offset):
            x, y = render_scene(spec, s, size, size)
            xs.append(x)
            ys.append(y)
        return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys).astype(np.int64))

    shifts = np.linspace(0.4, 0.8, num_sources) if num_sources > 1 else [0.4]
    sources = [render(sample_domain_spec(f"source{i}", seed, float(s)), n, offset) for i, s in enumerate(shifts)]
    tspec = sample_domain_spec("target", seed, 0.6)
    return TrainData(sources=sources, target=render(tspec, n_target)[0], target_eval=render(tspec, 4, 100))


@pytest.fixture
def tiny():
    return tiny_config, tiny_data


# one verdict line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])

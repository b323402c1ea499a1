"""Runtime verification suite behind ``dcanet check``.

Each check returns ``(passed, detail)``. Checks resolve the library
functions at call time, so a patched implementation is what gets tested.
"""
from __future__ import annotations

import dataclasses
import math
import time
from typing import Callable, List, NamedTuple

import numpy as np
import torch

from . import dca, oracles
from .config import ExperimentConfig, LossWeights, ModelConfig, SynthSpec, TrainConfig
from .structures import CASCADE_SCALES, PYRAMID_SCALES, CascadeDCA, PyramidDCA


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str
    seconds: float


# ----------------------------------------------------------------------------
# helpers shared with the test-suite


def randomize_bn(module: torch.nn.Module, gen: torch.Generator, stats: bool = True) -> None:
    """Give every BatchNorm non-trivial affine parameters (and running statistics)."""
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) + 0.5)
                m.bias.copy_(torch.rand(m.bias.shape, generator=gen) * 0.4 - 0.2)
                if stats:
                    m.running_mean.copy_(torch.rand(m.running_mean.shape, generator=gen) * 0.2 - 0.1)
                    m.running_var.copy_(torch.rand(m.running_var.shape, generator=gen) + 0.5)


def module_grad_check(module: torch.nn.Module, inputs: List[torch.Tensor], loss_fn: Callable,
                      epsilon: float = 1e-5, tolerance: float = 1e-4) -> oracles.GradCheckReport:
    """Central-difference check of d loss / d (inputs, parameters) in float64.

    ``loss_fn(module_output) -> scalar tensor``. The module is evaluated with
    the given parameters substituted functionally, in whatever mode it is in.
    """
    names = [n for n, _ in module.named_parameters()]
    tensors = [t.detach().double() for t in inputs] + [p.detach().double() for _, p in module.named_parameters()]
    shapes = [t.shape for t in tensors]
    sizes = [t.numel() for t in tensors]
    n_in = len(inputs)

    def evaluate(flat: torch.Tensor):
        parts = [p.reshape(s) for p, s in zip(torch.split(flat, sizes), shapes)]
        out = torch.func.functional_call(module, dict(zip(names, parts[n_in:])), tuple(parts[:n_in]))
        return loss_fn(out)

    point = torch.cat([t.reshape(-1) for t in tensors])
    flat = point.clone().requires_grad_(True)
    evaluate(flat).backward()
    analytic = flat.grad.numpy().copy()

    def f(vec: np.ndarray) -> float:
        with torch.no_grad():
            return float(evaluate(torch.from_numpy(vec)))

    return oracles.grad_check(f, point.numpy(), analytic, epsilon=epsilon, tolerance=tolerance)


def random_dca_instance(rng: np.random.Generator, dtype=torch.float32):
    """A small DCA module in inference mode with random parameters/statistics, plus inputs."""
    n = int(rng.integers(1, 3))
    c_in = int(rng.integers(1, 5))
    width = c_in if rng.random() < 0.5 else int(rng.integers(1, 5))
    h, w = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    r = int(rng.integers(1, 9))
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
    torch.manual_seed(int(rng.integers(2 ** 31)))
    module = dca.DCAModule(dca.DcaConfig(c_in, c_in, width, r)).to(dtype).eval()
    randomize_bn(module, gen)
    x = torch.randn(n, c_in, h, w, generator=gen).to(dtype)
    return module, x, r


def module_params_numpy(module: torch.nn.Module) -> dict:
    return {k: v.detach().double().numpy() for k, v in module.state_dict().items()}


# ----------------------------------------------------------------------------
# checks


def check_mask_range():
    torch.manual_seed(0)
    g = torch.linspace(-5, 5, 1001)
    m = dca.compute_mask(g)
    if not (bool((m > 0).all()) and bool((m < 1).all()) and bool((m[1:] >= m[:-1]).all())):
        return False, "compute_mask leaves (0, 1) or is not monotone on [-5, 5]"
    module = dca.DCAModule(dca.DcaConfig(4, 4, 4, 2)).train()
    out = module(torch.randn(2, 4, 6, 6) * 10, torch.randn(2, 4, 6, 6) * 10)
    lo, hi = float(out.mask.min().detach()), float(out.mask.max().detach())
    return 0 < lo and hi < 1, f"module mask range [{lo:.4g}, {hi:.4g}]"


def check_residual_identity():
    torch.manual_seed(0)
    module = dca.DCAModule(dca.DcaConfig(4, 4, 4, 2)).eval()
    module.force_mask = 0.0
    fs = torch.randn(1, 4, 5, 5)
    out = module(fs, fs)
    return bool(torch.equal(out.spatial, fs)), "spatial output equals residual bit-exactly under zero mask"


def check_gap_degeneracy():
    f = torch.randn(2, 3, 5, 7, dtype=torch.float64)
    diff = float((dca.context_pool(f, 1)[..., 0, 0] - f.mean(dim=(2, 3))).abs().max())
    return diff <= 1e-6, f"max |pool(f, 1) - mean| = {diff:.2e}"


def check_bookkeeping():
    cascade = CascadeDCA(2048, 512)
    bad = [i for i, b in enumerate(cascade.blocks[1:], 2)
           if (b.cfg.in_channels_context, b.cfg.in_channels_spatial) != (1024, 512)]
    first = cascade.blocks[0].cfg
    pyramid = PyramidDCA(512, 512)
    ok = (not bad and (first.in_channels_context, first.in_channels_spatial) == (2048, 2048)
          and pyramid.concat_channels() == 2048 and cascade.project[0].in_channels == 1024)
    return ok, f"cascade interior ok={not bad}, pyramid concat={pyramid.concat_channels()}"


def check_shape_algebra():
    torch.manual_seed(0)
    module = dca.DCAModule(dca.DcaConfig(6, 6, 3, 2)).eval()
    out = module(torch.randn(1, 6, 5, 4), torch.randn(1, 6, 5, 4))
    ok = tuple(out.spatial.shape) == (1, 3, 5, 4) and tuple(out.context.shape) == (1, 6, 5, 4)
    return ok, f"spatial {tuple(out.spatial.shape)}, context {tuple(out.context.shape)}"


def check_defaults():
    lw = LossWeights()
    m = ModelConfig()
    t = TrainConfig()
    ok = (tuple(CASCADE_SCALES) == (1, 4, 8, 16) and tuple(PYRAMID_SCALES) == (1, 2, 3, 6)
          and (lw.main, lw.aux, lw.sem) == (1.0, 0.2, 0.05) and m.modules_per_branch == 2
          and (t.power, t.momentum, t.weight_decay) == (0.9, 0.9, 0.0001))
    return ok, "scale schedules, loss weights and optimiser defaults"


def _sweep(kind: str, count: int):
    rng = np.random.default_rng({"pool": 1, "update": 2, "dca": 3}[kind])
    worst = 0.0
    for _ in range(count):
        if kind == "pool":
            shape = tuple(int(v) for v in rng.integers(1, 8, size=4))
            r = int(rng.integers(1, 10))
            f = rng.standard_normal(shape).astype(np.float32)
            got = dca.context_pool(torch.from_numpy(f), r).numpy()
            want = oracles.oracle_context_pool(f.astype(np.float64), r)
        elif kind == "update":
            shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
            fs, m, ft = (rng.standard_normal(shape).astype(np.float32) for _ in range(3))
            m = 1 / (1 + np.exp(-m))
            got = dca.update_spatial(*(torch.from_numpy(a) for a in (fs, m, ft))).numpy()
            want = oracles.oracle_dca_update(*(a.astype(np.float64) for a in (fs, m, ft)))
        else:
            module, x, r = random_dca_instance(rng)
            with torch.no_grad():
                out = module(x, x)
            xd = x.double().numpy()
            fc_hat, fs_hat, mask = oracles.oracle_dca_forward(module_params_numpy(module), xd, xd, r)
            got = np.concatenate([out.context.numpy().ravel(), out.spatial.numpy().ravel(), out.mask.numpy().ravel()])
            want = np.concatenate([fc_hat.ravel(), fs_hat.ravel(), mask.ravel()])
        worst = max(worst, float(np.abs(got - want).max()))
    return worst


def check_oracle_sweep(count: int = 200):
    worst = {k: _sweep(k, count) for k in ("pool", "update", "dca")}
    return all(v <= 1e-6 for v in worst.values()), ", ".join(f"{k} {v:.2e}" for k, v in worst.items())


def dca_grad_report():
    torch.manual_seed(0)
    gen = torch.Generator().manual_seed(0)
    module = dca.DCAModule(dca.DcaConfig(4, 4, 4, 2, semantic_supervision=True, num_classes=3,
                                         semantic_width=4)).double().eval()
    randomize_bn(module, gen)
    x = torch.randn(1, 4, 6, 6, generator=gen, dtype=torch.float64)
    wc = torch.randn(1, 8, 6, 6, generator=gen, dtype=torch.float64)
    ws = torch.randn(1, 4, 6, 6, generator=gen, dtype=torch.float64)

    class Both(torch.nn.Module):
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def forward(self, t):
            return self.inner(t, t)

    def loss(out):
        return (out.context * wc).sum() + (out.spatial * ws).sum() + out.semantic_logits.pow(2).sum()

    return module_grad_check(Both(module), [x], loss)


def cascade_grad_report():
    torch.manual_seed(1)
    gen = torch.Generator().manual_seed(1)
    cascade = CascadeDCA(8, 8, schedule=(1, 2), num_classes=3, semantic_supervision=True,
                         semantic_width=4).double().eval()
    randomize_bn(cascade, gen)
    x = torch.randn(1, 8, 6, 6, generator=gen, dtype=torch.float64)
    wf = torch.randn(1, 8, 6, 6, generator=gen, dtype=torch.float64)
    wm = [torch.randn(1, 8, 6, 6, generator=gen, dtype=torch.float64) for _ in range(2)]

    def loss(out):
        masks = sum((m * w).sum() for m, w in zip(out.masks, wm))
        return (out.features * wf).sum() + masks + out.sem_logits[0].sum()

    return module_grad_check(cascade, [x], loss)


def check_gradients():
    reports = {"dca": dca_grad_report(), "cascade2": cascade_grad_report()}
    return all(r.passed for r in reports.values()), "; ".join(f"{k}: {r}" for k, r in reports.items())


def check_ordering_smoke():
    from .training import run_ordering_experiment

    base = ExperimentConfig(
        model=ModelConfig(backbone_channels=(4, 8, 8, 8), width=8, semantic_width=8, aux_width=8),
        train=TrainConfig(max_iter=3, batch_size=2, crop_size=32),
    )
    base = dataclasses.replace(base, data=dataclasses.replace(
        base.data, synth=SynthSpec(num_images=6, image_size=32), num_val=2))
    res = run_ordering_experiment(["baseline", "cascade"], base, seeds=[0, 1, 2])
    finite = all(math.isfinite(v) for s in res.scores.values() for v in s.values())
    return res.complete and finite, f"medians {res.table()['median_miou']}"


FAST = [
    ("mask-range", check_mask_range),
    ("residual-identity", check_residual_identity),
    ("gap-degeneracy", check_gap_degeneracy),
    ("channel-bookkeeping", check_bookkeeping),
    ("shape-algebra", check_shape_algebra),
    ("defaults", check_defaults),
    ("oracle-sweep-quick", lambda: check_oracle_sweep(10)),
]
FULL = FAST + [
    ("oracle-sweep-200", check_oracle_sweep),
    ("gradient-checks", check_gradients),
    ("ordering-smoke", check_ordering_smoke),
]


def run_checks(level: str = "fast") -> List[CheckResult]:
    if level not in ("fast", "full"):
        raise ValueError(f"level must be 'fast' or 'full', got {level!r}")
    results = []
    for name, fn in (FAST if level == "fast" else FULL):
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:6.2f}s  {r.detail}")
    return "\n".join(lines)

"""Fast invariant suite behind ``downscale-lab check``.

Each check is a small function returning ``(passed, detail)``. They rebuild
everything they need from scratch so a broken op shows up as a failed check
rather than an exception in the middle of training.
"""

from __future__ import annotations

import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .losses import l1_loss, l2_loss
from .model import UNetConfig, build_unet, count_instantiated, load_checkpoint, parameter_count, save_checkpoint
from .preprocessing import GammaTransform, gamma_forward_array, gamma_inverse_array
from .tensor import Tensor

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@contextmanager
def relu_masks():
    """Collect the active-unit mask of every relu evaluated inside the block."""
    seen: list[np.ndarray] = []
    original = T.relu

    def spy(x):
        seen.append(x.data > 0)
        return original(x)

    T.relu = spy
    try:
        yield seen
    finally:
        T.relu = original


def _same_masks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_samples: int,
    rng: np.random.Generator,
    h: float = FD_STEP,
    skip_kinks: bool = True,
) -> tuple[np.ndarray, int]:
    """Relative errors between tape and central-difference gradients.

    ``loss_fn`` must rebuild the graph from the current ``params`` data each
    call. Up to ``n_samples`` scalar entries are drawn across all params.
    With ``skip_kinks`` a sample whose +h or -h evaluation flips any relu
    is replaced by a fresh draw, since the difference quotient then spans
    a point where the loss is not differentiable. Returns the errors and
    the number of samples skipped that way.
    """
    for p in params:
        p.grad = None
    with relu_masks() as base:
        loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    sizes = np.array([p.data.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errs: list[float] = []
    skipped = 0
    for f in rng.permutation(int(sizes.sum())):
        if len(errs) >= n_samples or skipped > n_samples:
            break
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        j = int(f - offsets[k])
        flat = params[k].data.reshape(-1)
        orig = flat[j]
        with relu_masks() as up_masks:
            flat[j] = orig + h
            up = loss_fn().item()
        with relu_masks() as down_masks:
            flat[j] = orig - h
            down = loss_fn().item()
        flat[j] = orig
        if skip_kinks and not (_same_masks(base, up_masks) and _same_masks(base, down_masks)):
            skipped += 1
            continue
        errs.append(relative_error(analytic[k].reshape(-1)[j], (up - down) / (2 * h)))
    return np.asarray(errs), skipped


def finite_difference_errors(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_samples: int,
    rng: np.random.Generator,
    h: float = FD_STEP,
) -> np.ndarray:
    """Errors for every drawn sample, kinks included."""
    return gradient_check(loss_fn, params, n_samples, rng, h, skip_kinks=False)[0]


def conv2d_loop(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Nested-loop cross-correlation; slow on purpose."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
                    out[i, o, r, s] = np.sum(patch * w[o]) + b[o]
    return out


def _weighted(out: Tensor, wts: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(wts)))


# -- the checks ------------------------------------------------------------


def check_conv_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        worst = max(worst, float(np.max(np.abs(got - conv2d_loop(x, w, b, stride, pad)))))
    return worst < 1e-10, f"max abs diff {worst:.2e}"


def check_conv_gradient():
    rng = np.random.default_rng(2)
    worst = 0.0
    for stride in (1, 2):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        ho = 6 // stride
        wts = rng.standard_normal((2, 4, ho, ho))
        errs = finite_difference_errors(lambda: _weighted(T.conv2d(x, w, b, stride, 1), wts), [x, w, b], 60, rng)
        worst = max(worst, float(errs.max()))
    return worst < GRAD_RTOL, f"max rel err {worst:.2e}"


def check_batchnorm():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 7 + 3, requires_grad=True)
    scale = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    shift = Tensor(rng.standard_normal(3), requires_grad=True)
    wts = rng.standard_normal((4, 3, 5, 5))

    def fwd():
        return T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), Tensor(np.zeros(3)), Tensor(np.ones(3)))

    means = np.abs(fwd().data.mean(axis=(0, 2, 3))).max()
    errs = finite_difference_errors(
        lambda: _weighted(T.batchnorm2d(x, scale, shift, Tensor(np.zeros(3)), Tensor(np.ones(3))), wts),
        [x, scale, shift],
        60,
        rng,
    )
    ok = means < 1e-9 and errs.max() < GRAD_RTOL
    return ok, f"max channel mean {means:.1e}, max rel err {errs.max():.2e}"


def check_elementwise_gradients():
    rng = np.random.default_rng(4)
    shape = (2, 2, 4, 4)
    a = Tensor(rng.standard_normal(shape), requires_grad=True)
    b = Tensor(rng.standard_normal(shape), requires_grad=True)
    a.data[np.abs(a.data) < 0.05] += 0.2  # keep away from relu/abs kinks
    theta = Tensor(np.float64(0.3), requires_grad=True)
    wts = rng.standard_normal((2, 4, 8, 8))
    small = rng.standard_normal((2, 2, 4, 4))

    def loss():
        u = T.add(T.relu(a), T.mul(T.exp(T.scalar_mul(b, 0.5)), T.square(a)))
        v = T.sub(T.signed_pow(a, T.exp(T.neg(theta))), T.tabs(b))
        cat = T.concat_channels(u, v)
        up = T.upsample_nearest2x(cat)
        tail = T.tsum(T.mul(T.slice_channels(cat, 1, 3), Tensor(small)))
        return T.add(T.tsum(T.mul(up, Tensor(wts))), tail)

    errs = finite_difference_errors(loss, [a, b, theta], 65, rng)
    return errs.max() < GRAD_RTOL, f"max rel err {errs.max():.2e} over {errs.size} entries"


def check_gamma_round_trip():
    rng = np.random.default_rng(5)
    mags = 10.0 ** rng.uniform(-6, 6, 4000)
    x = mags * rng.choice([-1.0, 1.0], mags.size)
    worst = 0.0
    for g in (0.45, 1.0, 2.2, 3.7):
        back = gamma_inverse_array(gamma_forward_array(x, g), g)
        worst = max(worst, float(np.max(np.abs(back - x) / np.abs(x))))
    return worst < 1e-9, f"max rel err {worst:.2e}"


def check_gamma_symmetry():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(1000) * 50
    odd = all(np.array_equal(gamma_forward_array(-x, g), -gamma_forward_array(x, g)) for g in (0.5, 2.2))
    ident = np.array_equal(gamma_forward_array(x, 1.0), x)
    t = GammaTransform.learnable(1.0)
    pos = t.gamma > 0
    return odd and ident and pos, f"odd={odd} identity={ident} positive={pos}"


def check_unet_gradient():
    rng = np.random.default_rng(7)
    cfg = UNetConfig(in_channels=6, base_width=4)
    model = build_unet(cfg, seed=0)
    x = Tensor(rng.standard_normal((2, 6, 8, 8)))
    y = Tensor(rng.standard_normal((2, 1, 8, 8)))
    params = model.parameters()

    def loss():
        return l2_loss(model.forward(x, "train"), y)

    errs, skipped = gradient_check(loss, params, 80, rng)
    ok = errs.size == 80 and errs.max() < GRAD_RTOL
    return ok, f"{np.sum(errs < GRAD_RTOL)}/{errs.size} sampled params within {GRAD_RTOL:g}, max {errs.max():.2e}, {skipped} kink samples redrawn"


def check_parameter_count():
    ok = True
    for cfg in (UNetConfig(base_width=8), UNetConfig(in_channels=3, base_width=5, skip_links=frozenset({1, 3}))):
        ok &= parameter_count(cfg) == count_instantiated(build_unet(cfg, 0))
    single = parameter_count(UNetConfig(in_channels=1, base_width=1, width_multipliers=(1, 1, 1)))
    return ok, f"closed form matches instantiated tally: {ok} (minimal net {single})"


def check_checkpoint_round_trip():
    model = build_unet(UNetConfig(base_width=4), seed=3)
    x = Tensor(np.random.default_rng(8).standard_normal((1, 6, 8, 8)))
    before = model.forward(x, "eval").data
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(path, model, {"gamma_theta": np.array(0.25)})
        back, extra, _ = load_checkpoint(path)
    after = back.forward(x, "eval").data
    same = np.array_equal(before, after) and float(extra["gamma_theta"]) == 0.25
    return same, "bit-identical eval output after reload" if same else "reloaded model differs"


def check_losses():
    p, g = Tensor(np.array([1.0, 3.0])), Tensor(np.array([0.0, 1.0]))
    l1, l2 = l1_loss(p, g).item(), l2_loss(p, g).item()
    return l1 == 1.5 and l2 == 2.5, f"l1={l1} l2={l2}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "conv2d_oracle": check_conv_oracle,
    "conv2d_gradient": check_conv_gradient,
    "batchnorm": check_batchnorm,
    "elementwise_gradients": check_elementwise_gradients,
    "gamma_round_trip": check_gamma_round_trip,
    "gamma_symmetry": check_gamma_symmetry,
    "unet_gradient": check_unet_gradient,
    "parameter_count": check_parameter_count,
    "checkpoint_round_trip": check_checkpoint_round_trip,
    "loss_values": check_losses,
}


def run_checks(names: Sequence[str] | None = None) -> list[CheckResult]:
    out = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = CHECKS[name]()
        except Exception as err:  # a crashing check is a failing check
            ok, detail = False, f"{type(err).__name__}: {err}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out

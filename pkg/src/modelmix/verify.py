"""Property suites run by ``modelmix verify``.

Each suite returns a :class:`SuiteResult` listing named checks with the
measured value and the threshold it was held to.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from . import diffcore as dc
from . import losses as L
from .diffcore import Tensor
from .metrics import dice_score, hausdorff
from .mixer import verify_feature_linearity
from .nets import ConvParams


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    relation: str = "<"

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (need {self.relation} {self.threshold:g})"


@dataclass
class SuiteResult:
    name: str
    checks: List[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def add(self, name: str, value: float, threshold: float, relation: str = "<") -> None:
        ok = value < threshold if relation == "<" else value > threshold
        self.checks.append(Check(name, float(value), threshold, bool(ok and math.isfinite(value)), relation))


# --------------------------------------------------------------------------
# linearity


def _params(rng, oc, ic, k):
    return ConvParams(Tensor(rng.standard_normal((oc, ic, k, k))), Tensor(rng.standard_normal(oc)))


def linearity_suite(draws: int = 100, seed: int = 0) -> SuiteResult:
    res = SuiteResult("linearity")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        ic, oc = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        k = int(rng.choice([1, 3, 5]))
        h, w = int(rng.integers(k, 17)), int(rng.integers(k, 17))
        p_i, p_j = _params(rng, oc, ic, k), _params(rng, oc, ic, k)
        x = Tensor(rng.standard_normal((int(rng.integers(1, 4)), ic, h, w)))
        worst = max(worst, verify_feature_linearity(p_i, p_j, float(rng.uniform()), x, pad=k // 2))
    res.add(f"conv mixing identity, {draws} double-precision draws", worst, 1e-9)

    # negative control: kernels of opposite sign on a positive input, so
    # relu clips exactly one side of every mixed response
    kern = np.zeros((1, 1, 3, 3))
    kern[0, 0, 1, 1] = 1.0
    p_pos = ConvParams(Tensor(kern), Tensor(np.zeros(1)))
    p_neg = ConvParams(Tensor(-kern), Tensor(np.zeros(1)))
    x = Tensor(rng.uniform(0.5, 1.5, size=(1, 1, 6, 6)))
    gap = verify_feature_linearity(p_pos, p_neg, 0.5, x, with_nonlinearity=True)
    res.add("relu breaks the identity (negative control)", gap, 1e-3, ">")
    return res


# --------------------------------------------------------------------------
# gradients


def _distinct(rng, shape):
    vals = rng.permutation(int(np.prod(shape))).astype(np.float64) * 0.1
    return vals.reshape(shape)


def _away_from_zero(rng, shape):
    return rng.uniform(0.2, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def gradient_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    n, c = int(rng.integers(1, 3)), int(rng.integers(2, 4))
    h, w = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
    shape = (n, c, h, w)
    normal = lambda *s: rng.standard_normal(s)  # noqa: E731
    k = 3
    labels = rng.integers(0, c, size=(n, h, w))
    labels[rng.random((n, h, w)) < 0.5] = c
    labels[:, 0, 0] = 0  # at least one annotated pixel
    sc = L.ScribbleMap(labels, c)
    perm = list(rng.permutation(n))
    return {
        "conv2d": (lambda x, kk, b: dc.conv2d(x, kk, b, pad=1),
                   [normal(*shape), normal(2, c, k, k), normal(2)]),
        "conv2d_stride2": (lambda x, kk, b: dc.conv2d(x, kk, b, stride=2, pad=1),
                           [normal(*shape), normal(2, c, k, k), normal(2)]),
        "channel_softmax": (dc.channel_softmax, [normal(*shape)]),
        "relu": (dc.relu, [_away_from_zero(rng, shape)]),
        "max_pool_2x2": (dc.max_pool_2x2, [_distinct(rng, shape)]),
        "nearest_upsample_2x2": (dc.nearest_upsample_2x2, [normal(*shape)]),
        "channel_concat": (dc.channel_concat, [normal(*shape), normal(n, 1, h, w)]),
        "add": (dc.add, [normal(*shape), normal(*shape)]),
        "scalar_scale": (lambda x: dc.scalar_scale(x, 0.7), [normal(*shape)]),
        "batch_take": (lambda x: dc.batch_take(x, perm), [normal(*shape)]),
        "partial_ce": (lambda z: L.partial_ce(dc.channel_softmax(z), sc), [normal(*shape)]),
        "sup_loss": (lambda z: L.sup_loss(dc.channel_softmax(z), sc), [normal(*shape)]),
        "cosine_loss": (L.cosine_loss, [normal(*shape), normal(*shape)]),
        "mix_outputs": (lambda a, b: L.mix_outputs(a, b, 0.3), [normal(*shape), normal(*shape)]),
        "vicinal_sup_loss": (lambda a, b: L.vicinal_sup_loss([(dc.channel_softmax(a), dc.channel_softmax(b), sc)]),
                             [normal(*shape), normal(*shape)]),
        "vicinal_reg_loss": (lambda a, b: L.vicinal_reg_loss([(a, b)]), [normal(*shape), normal(*shape)]),
    }


def gradients_suite(rounds: int = 3, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> SuiteResult:
    res = SuiteResult("gradients")
    worst: Dict[str, float] = {}
    for r in range(rounds):
        rng = np.random.default_rng([seed, r])
        for name, (fn, ins) in gradient_cases(rng).items():
            rep = dc.finite_difference_check(fn, ins, eps=eps, tol=tol, op_name=name, seed=r)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_err)
    for name, err in worst.items():
        res.add(f"finite differences: {name}", err, tol)
    return res


# --------------------------------------------------------------------------
# losses


def losses_suite(seed: int = 0) -> SuiteResult:
    res = SuiteResult("losses")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 2, 5, 5))
    res.add("cosine_loss(a, a) + 1", abs(float(L.cosine_loss(Tensor(a), Tensor(a)).data) + 1.0), 1e-9)

    lab = rng.integers(0, 3, size=(2, 4, 4))
    lab[:, :2] = 3
    onehot = np.eye(3)[np.where(lab == 3, 0, lab)].transpose(0, 3, 1, 2)
    sup = float(L.sup_loss(Tensor(onehot), L.ScribbleMap(lab, 3)).data)
    res.add("sup_loss at a perfect prediction + 1", abs(sup + 1.0), 1e-9)

    half = Tensor(np.full((2, 2, 4, 4), 0.5))
    pce = float(L.partial_ce(half, L.ScribbleMap(np.where(lab == 3, 2, lab % 2), 2)).data)
    res.add("partial_ce at probability 0.5 - 0.6931", abs(pce - 0.6931), 1e-4)

    # annotated-pixel locality: arbitrary changes on unlabeled pixels
    probs = rng.dirichlet(np.ones(3), size=(2, 4, 4)).transpose(0, 3, 1, 2)
    other = rng.dirichlet(np.ones(3), size=(2, 4, 4)).transpose(0, 3, 1, 2)
    sc = L.ScribbleMap(lab, 3)
    mixed = np.where(sc.annotated[:, None], probs, other)
    drift = 0.0
    for fn in (L.partial_ce, L.sup_loss):
        drift = max(drift, float(fn(Tensor(probs), sc).data != fn(Tensor(mixed), sc).data))
    res.add("scribble losses ignore unlabeled pixels (bitwise)", drift, 0.5)
    return res


# --------------------------------------------------------------------------
# metrics


def dice_oracle(p: np.ndarray, g: np.ndarray) -> float:
    inter = 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        inter += int(a and b)
    total = int(p.sum()) + int(g.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def hausdorff_oracle(p: np.ndarray, g: np.ndarray) -> float:
    """Pairwise-distance Hausdorff; same empty-mask conventions as metrics."""
    P, G = np.argwhere(p), np.argwhere(g)
    if len(P) == 0 and len(G) == 0:
        return 0.0
    if len(P) == 0 or len(G) == 0:
        return float(math.hypot(*p.shape))
    d = np.sqrt(((P[:, None, :] - G[None, :, :]) ** 2).sum(-1))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def metrics_suite(masks: int = 1000, seed: int = 0, max_side: int = 32) -> SuiteResult:
    res = SuiteResult("metrics")
    rng = np.random.default_rng(seed)
    dice_bad = hd_bad = 0
    for _ in range(masks):
        h, w = int(rng.integers(1, max_side + 1)), int(rng.integers(1, max_side + 1))
        p = rng.random((h, w)) < rng.uniform(0, 0.5)
        g = rng.random((h, w)) < rng.uniform(0, 0.5)
        dice_bad += int(dice_score(p, g) != dice_oracle(p, g))
        hd_bad += int(hausdorff(p, g) != hausdorff_oracle(p, g))
    res.add(f"dice_score disagreements with brute force over {masks} masks", dice_bad, 0.5)
    res.add(f"hausdorff disagreements with brute force over {masks} masks", hd_bad, 0.5)
    return res


SUITES: Dict[str, Callable[[], SuiteResult]] = {
    "linearity": linearity_suite,
    "gradients": gradients_suite,
    "losses": losses_suite,
    "metrics": metrics_suite,
}


def run_suite(name: str) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    start = time.perf_counter()
    res = SUITES[name]()
    res.seconds = time.perf_counter() - start
    return res

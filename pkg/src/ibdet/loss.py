"""Training objective: feature-compression term, class and localization
log-likelihood terms, and the confidence-concentration (sparse-prior) term.

All terms are natural-log quantities.  The total being minimized is

    total = info_weight * info_xf - beta * (class_term + loc_term)
            + gamma * sparse_term

Parameter-independent prior densities (fair-coin feature prior, uniform class
prior, standard-normal location prior) are constants and are left out of the
terms; the information-plane proxies in `metrics` add them back where a
calibrated scale matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .binary import FeatureDistribution
from .model import BlockLabels, DetectorModel, HeadOutputs
from .tensor import (Tensor, as_tensor, clip, exp, gather, log, log_softmax,
                     mul, slice_tensor, softmax, tmax, tmean, tsum)

LOG_2PI = math.log(2.0 * math.pi)

# variance floor sigma >= 1e-3 guards the Gaussian log-density
LOGVAR_MIN = 2.0 * math.log(1e-3)


@dataclass
class LossWeights:
    """Objective weights; tau picks which predictions count as foreground
    for the concentration term, info_weight exists for ablations."""

    beta: float = 10.0
    gamma: float = 0.2
    tau: float = 0.3
    info_weight: float = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")


@dataclass
class LossBreakdown:
    """Scalar components of one objective evaluation, in nats."""

    info_xf: float
    class_term: float
    loc_term: float
    sparse_term: float
    total: float


def _bernoulli_kl_vs_half(p: Tensor) -> Tensor:
    """Elementwise KL(Bernoulli(p) || Bernoulli(1/2)), exact at p in {0,1}
    (0*ln 0 = 0); the backward clamps the logit so boundary samples stay
    finite."""
    p = as_tensor(p)
    pd = p.data
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (np.where(pd > 0, pd * np.log(2.0 * pd), 0.0)
               + np.where(pd < 1, (1.0 - pd) * np.log(2.0 * (1.0 - pd)), 0.0))
    val = val.astype(pd.dtype)

    def bw(g):
        if p.requires_grad:
            pc = np.clip(pd, 1e-12, 1.0 - 1e-12)
            p._accum(g * (np.log(pc) - np.log1p(-pc)))

    return Tensor._node(val, (p,), bw)


def info_xf(dist: FeatureDistribution) -> Tensor:
    """Compression cost of the feature distribution against the fair-coin
    prior: sum over feature elements of KL(Bernoulli(p)||Bernoulli(1/2)),
    averaged over the batch.  Non-negative, zero iff p == 1/2 everywhere."""
    p = dist.p if isinstance(dist, FeatureDistribution) else as_tensor(dist)
    kl = _bernoulli_kl_vs_half(p)
    batch = p.shape[0] if p.data.ndim > 0 else 1
    return mul(tsum(kl), 1.0 / batch)


def _supervised_rows(labels: list[BlockLabels], per_image: int,
                     anchors_per_block: int) -> np.ndarray:
    """Flat prediction-row index of the supervised anchor for every block:
    the matched anchor for positives, anchor 0 for background."""
    rows = []
    for n, lab in enumerate(labels):
        base = n * per_image
        idx = np.arange(lab.n_blocks) * anchors_per_block + lab.anchor_index
        rows.append(base + idx)
    return np.concatenate(rows)


def class_term(class_logits: Tensor, labels: list[BlockLabels]) -> Tensor:
    """Mean log-probability of the groundtruth class over all blocks
    (supervised anchor per block).  Always <= 0; enters the total with -beta.
    """
    n_img, per_image, k = class_logits.shape
    if len(labels) != n_img:
        raise ValueError(f"class_term: {n_img} images but {len(labels)} label sets")
    anchors_per_block = per_image // labels[0].n_blocks
    targets = np.concatenate([lab.classes for lab in labels])
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"class_term: label outside [0, {k - 1}]")
    rows = _supervised_rows(labels, per_image, anchors_per_block)
    lp = log_softmax(class_logits, axis=-1)
    picked = gather(lp, rows * k + targets)
    return tmean(picked)


def loc_term(loc_mean: Tensor, loc_logvar: Tensor,
             labels: list[BlockLabels]) -> Tensor:
    """Mean Gaussian log-density of the offset targets over positive blocks,
    summed over the four offset coordinates; zero when nothing is positive.

    The log-variance is floored at 2*ln(1e-3) so the density cannot diverge.
    """
    n_img, per_image, _ = loc_mean.shape
    anchors_per_block = per_image // labels[0].n_blocks
    rows = []
    targets = []
    for n, lab in enumerate(labels):
        pos = np.nonzero(lab.mask)[0]
        if pos.size == 0:
            continue
        rows.append(n * per_image + pos * anchors_per_block + lab.anchor_index[pos])
        targets.append(lab.offsets[pos])
    if not rows:
        return Tensor(np.zeros((), dtype=loc_mean.dtype))
    rows = np.concatenate(rows)
    t = np.concatenate(targets)

    flat = (rows[:, None] * 4 + np.arange(4)[None, :]).reshape(-1)
    mu = gather(loc_mean, flat).reshape((rows.size, 4))
    lv = clip(gather(loc_logvar, flat).reshape((rows.size, 4)), lo=LOGVAR_MIN)
    diff = mu - Tensor(t.astype(loc_mean.dtype))
    per_coord = mul(lv + LOG_2PI, -0.5) - mul(diff * diff * exp(-lv), 0.5)
    return tmean(tsum(per_coord, axis=1))


def concentration_loss(conf: Tensor, tau: float) -> Tensor:
    """-(1/m) sum_i s_i ln s_i over the confidences above tau, normalized to
    sum one.  Zero when at most one entry clears the threshold."""
    sel = np.nonzero(conf.data > tau)[0]
    m = sel.size
    if m <= 1:
        return Tensor(np.zeros((), dtype=conf.dtype))
    c = gather(conf, sel)
    s = c / tsum(c)
    return mul(tsum(s * log(s)), -1.0 / m)


def foreground_confidence(class_logits: Tensor) -> Tensor:
    """Max foreground softmax probability per prediction row: (N, blocks*A)."""
    probs = softmax(class_logits, axis=-1)
    fg = slice_tensor(probs, (slice(None), slice(None), slice(1, None)))
    return tmax(fg, axis=-1)


def sparse_prior_loss(class_logits: Tensor, weights: LossWeights) -> Tensor:
    """Confidence-concentration objective, averaged over the batch.

    Per image, the predictions whose max-foreground probability exceeds tau
    form the predicted-foreground set; their normalized scores feed the
    scaled entropy -(1/m) sum s ln s.  Minimizing it drives the score mass
    onto few predictions, which starves low-confidence false positives.
    """
    conf = foreground_confidence(class_logits)
    n_img = conf.shape[0]
    total = None
    for n in range(n_img):
        row = slice_tensor(conf, n)
        term = concentration_loss(row, weights.tau)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=class_logits.dtype))
    return mul(total, 1.0 / n_img)


def total_objective(info: Tensor, cls: Tensor, loc: Tensor, sparse: Tensor,
                    weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Combine the parts; raises FloatingPointError on a non-finite part so
    the training loop can skip the step."""
    parts = {"info_xf": info, "class_term": cls, "loc_term": loc,
             "sparse_term": sparse}
    for name, part in parts.items():
        if not np.isfinite(part.data):
            raise FloatingPointError(f"non-finite loss part {name}")
    total = (mul(info, weights.info_weight)
             - mul(cls + loc, weights.beta)
             + mul(sparse, weights.gamma))
    breakdown = LossBreakdown(
        info_xf=float(info.data), class_term=float(cls.data),
        loc_term=float(loc.data), sparse_term=float(sparse.data),
        total=float(total.data))
    return total, breakdown


def detector_objective(model: DetectorModel, images, labels: list[BlockLabels],
                       weights: LossWeights,
                       rng: np.random.Generator | None = None,
                       frozen_sample: np.ndarray | None = None
                       ) -> tuple[Tensor, LossBreakdown, HeadOutputs]:
    """Full training objective for one batch."""
    heads, _ = model.forward_train(images, rng=rng, frozen_sample=frozen_sample)
    info = info_xf(heads.feature_dist)
    cls = class_term(heads.class_logits, labels)
    loc = loc_term(heads.loc_mean, heads.loc_logvar, labels)
    sparse = sparse_prior_loss(heads.class_logits, weights)
    total, breakdown = total_objective(info, cls, loc, sparse, weights)
    return total, breakdown, heads


def objective_grad_check(model: DetectorModel, images, labels: list[BlockLabels],
                         weights: LossWeights, sample_rng: np.random.Generator,
                         eps: float = 1e-4) -> dict[str, float]:
    """Finite-difference check of the full objective for every parameter.

    The model must be in a differentiable configuration (binarize off: sign
    surrogates have no true derivative to compare against).  Parameters are
    promoted to float64, the feature sample is drawn once and frozen, and
    each parameter tensor is swapped for a tape leaf in turn.  Returns the
    worst relative error per parameter name.
    """
    from .tensor import grad_check

    if model.config.binarize:
        raise ValueError("objective_grad_check needs binarize=False; "
                         "straight-through surrogates are checked directly")
    params = model.parameters()
    for p in params.values():
        p.data = p.data.astype(np.float64)
    images = np.asarray(images, dtype=np.float64)
    _, feat = model.forward_train(images, rng=sample_rng)
    frozen = feat.data.copy()
    buffers = {k: v.copy() for k, v in model.buffers().items()}

    holders = model.param_holders()
    errors: dict[str, float] = {}
    for name, (owner, attr) in holders.items():
        original = params[name]

        def fn(t, owner=owner, attr=attr, original=original):
            setattr(owner, attr, t)
            try:
                total, _, _ = detector_objective(
                    model, images, labels, weights, frozen_sample=frozen)
            finally:
                setattr(owner, attr, original)
            return total

        errors[name] = grad_check(fn, Tensor(original.data.copy()), eps=eps)
    for k, v in model.buffers().items():
        np.copyto(v, buffers[k])
    return errors


# -- score-concentration dynamics ----------------------------------------------


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, v.size + 1) > (css - 1.0))[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def normalized_score_entropy(s: np.ndarray) -> float:
    """-(1/m) sum s ln s with 0*ln 0 = 0, for a score vector on the simplex."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(s > 0, s * np.log(s), 0.0)
    return float(-terms.sum() / s.size)


def concentration_descent(s0: np.ndarray, steps: int = 500,
                          lr: float = 1.0) -> tuple[np.ndarray, float]:
    """Projected gradient descent on the scaled entropy over the simplex.

    From a near-uniform start the iterates collapse onto a vertex, which is
    the score-concentration behavior the sparse prior is meant to induce.
    """
    s = project_to_simplex(np.asarray(s0, dtype=float))
    m = s.size
    for _ in range(steps):
        sc = np.clip(s, 1e-12, None)
        grad = -(np.log(sc) + 1.0) / m
        s = project_to_simplex(s - lr * grad)
    return s, normalized_score_entropy(s)

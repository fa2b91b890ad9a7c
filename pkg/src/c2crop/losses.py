"""Contrastive composition clustering objective and imbalanced-regression
baselines (focal reweighting, inverse-frequency, smoothed-distribution
weights, feature-space oversampling).

The contrastive terms act on the pooled per-boundary feature vectors, one
row per sample. Positive/negative pairs are chosen per batch from the
pairwise distances of the boundary annotations; features are projected to
the unit sphere inside the losses only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOUNDARIES
from .metrics import FEW_SHOT_MAX_RATIO
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    z_p: float = 0.05  # positive pair threshold on |y_i - y_j|
    z_n: float = 0.7  # negative pair threshold
    alpha: float = 1.0  # alignment distance exponent
    epsilon: float = 0.5  # alignment margin
    t: float = 1.0  # uniformity temperature
    beta: float = 0.025  # alignment mixing weight
    gamma: float = 0.025  # uniformity mixing weight
    mu: float = 2.0  # focal error scale
    psi: float = 2.0  # focal exponent

    def __post_init__(self):
        if not 0.0 <= self.z_p < self.z_n <= 1.0:
            raise ValueError(f"need 0 <= z_p < z_n <= 1, got {self.z_p}, {self.z_n}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.t <= 0:
            raise ValueError("temperature t must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")


@dataclass
class PairMatrices:
    """Boolean B x B masks on unordered pairs i < j; lower triangle unused."""

    positive: np.ndarray
    negative: np.ndarray

    @property
    def n_positive(self) -> int:
        return int(self.positive.sum())

    @property
    def n_negative(self) -> int:
        return int(self.negative.sum())


@dataclass
class LossBreakdown:
    l1: Tensor
    align: Tensor
    uniform: Tensor
    total: Tensor
    pos_pairs: int = 0
    neg_pairs: int = 0


def pair_matrices(y: np.ndarray, weights: LossWeights) -> PairMatrices:
    """Positive iff |y_i - y_j| < z_p, negative iff > z_n, over pairs i < j."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    diff = np.abs(y[:, None] - y[None, :])
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    return PairMatrices(
        positive=(diff < weights.z_p) & upper,
        negative=(diff > weights.z_n) & upper,
    )


def _pair_squared_distances(features: Tensor) -> Tensor:
    """Pairwise squared chord distances of the row-normalized features."""
    xn = T.l2_normalize_rows(features)
    gram = T.matmul(xn, T.transpose(xn))
    # rows are unit norm, so ||xi - xj||^2 = 2 - 2 <xi, xj>; relu clamps the
    # tiny negatives float rounding can produce on the diagonal
    return T.relu(T.add(T.scalar_multiply(gram, -2.0), 2.0))


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    if count == 0:
        return Tensor(0.0)
    picked = T.multiply(values, Tensor(mask.astype(np.float64)))
    total = T.sum_axis(T.sum_axis(picked, axis=1), axis=0)
    return T.scalar_multiply(total, 1.0 / count)


def alignment_loss(features: Tensor, pairs: PairMatrices, weights: LossWeights) -> Tensor:
    """Mean over positive pairs of max(||xi - xj||^alpha - epsilon, 0)."""
    if pairs.n_positive == 0:
        return Tensor(0.0)
    dist = T.sqrt(_pair_squared_distances(features))
    if weights.alpha != 1.0:
        dist = T.power(dist, weights.alpha)
    excess = T.relu(T.add(dist, -weights.epsilon))
    return _masked_mean(excess, pairs.positive)


def uniformity_loss(features: Tensor, pairs: PairMatrices, weights: LossWeights) -> Tensor:
    """Mean over negative pairs of exp(-t * ||xi - xj||^2)."""
    if pairs.n_negative == 0:
        return Tensor(0.0)
    sq = _pair_squared_distances(features)
    return _masked_mean(T.exp(T.scalar_multiply(sq, -weights.t)), pairs.negative)


def c2c_losses(features: dict[str, Tensor], targets: np.ndarray, weights: LossWeights):
    """Alignment/uniformity terms summed over the four boundaries.

    Returns (align, uniform, n_positive, n_negative).
    """
    align: Tensor = Tensor(0.0)
    uniform: Tensor = Tensor(0.0)
    n_pos = n_neg = 0
    for idx, d in enumerate(BOUNDARIES):
        pairs = pair_matrices(targets[:, idx], weights)
        n_pos += pairs.n_positive
        n_neg += pairs.n_negative
        align = T.add(align, alignment_loss(features[d], pairs, weights))
        uniform = T.add(uniform, uniformity_loss(features[d], pairs, weights))
    return align, uniform, n_pos, n_neg


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error over all entries."""
    return T.reduce_mean(T.absolute(T.subtract(pred, Tensor(target))))


def weighted_l1_loss(pred: Tensor, target: np.ndarray, sample_weights: np.ndarray) -> Tensor:
    """Mean of per-entry weight * |pred - target|."""
    err = T.absolute(T.subtract(pred, Tensor(target)))
    return T.reduce_mean(T.multiply(err, Tensor(sample_weights)))


def per_sample_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """(B, 4) predictions -> (B,) mean absolute boundary error per sample."""
    return T.reduce_mean(T.absolute(T.subtract(pred, Tensor(target))), axis=1)


def total_loss(
    pred: Tensor,
    target: np.ndarray,
    features: dict[str, Tensor],
    weights: LossWeights,
) -> LossBreakdown:
    """l1 + beta * alignment + gamma * uniformity."""
    l1 = l1_loss(pred, target)
    align, uniform, n_pos, n_neg = c2c_losses(features, target, weights)
    total = T.add(
        l1,
        T.add(
            T.scalar_multiply(align, weights.beta),
            T.scalar_multiply(uniform, weights.gamma),
        ),
    )
    return LossBreakdown(
        l1=l1, align=align, uniform=uniform, total=total, pos_pairs=n_pos, neg_pairs=n_neg
    )


def focal_r_loss(errors: Tensor, weights: LossWeights) -> Tensor:
    """Mean of sigmoid(|mu * e|)^psi * e over per-sample errors."""
    scaled = T.absolute(T.scalar_multiply(errors, weights.mu))
    factor = T.power(T.sigmoid(scaled), weights.psi)
    return T.reduce_mean(T.multiply(factor, errors))


# ---------------------------------------------------------------------------
# frequency-based reweighting


def inverse_frequency_weights(y_train: np.ndarray, bins: int) -> np.ndarray:
    """Per-bin weights proportional to 1/count, normalized to mean 1.

    Targets are histogrammed into equal-width bins over [0, 1]; empty bins
    inherit the largest non-empty weight.
    """
    y_train = np.asarray(y_train, dtype=np.float64).ravel()
    if y_train.size == 0:
        raise ValueError("inverse_frequency_weights: empty target array")
    counts, _ = np.histogram(y_train, bins=bins, range=(0.0, 1.0))
    return _invert_counts(counts.astype(np.float64))


def lds_weights(y_train: np.ndarray, bins: int, kernel_sigma: float) -> np.ndarray:
    """Inverse weights of the Gaussian-smoothed target histogram.

    The kernel is truncated at radius 2*sigma bins; sigma <= 0 degenerates
    to a delta kernel, i.e. plain inverse-frequency weights.
    """
    y_train = np.asarray(y_train, dtype=np.float64).ravel()
    if y_train.size == 0:
        raise ValueError("lds_weights: empty target array")
    counts, _ = np.histogram(y_train, bins=bins, range=(0.0, 1.0))
    counts = counts.astype(np.float64)
    if kernel_sigma > 0:
        radius = max(int(np.ceil(2.0 * kernel_sigma)), 1)
        offsets = np.arange(-radius, radius + 1, dtype=np.float64)
        kernel = np.exp(-0.5 * (offsets / kernel_sigma) ** 2)
        kernel /= kernel.sum()
        counts = np.convolve(counts, kernel, mode="same")
    return _invert_counts(counts)


def _invert_counts(counts: np.ndarray) -> np.ndarray:
    nonempty = counts > 0
    if not nonempty.any():
        raise ValueError("all histogram bins empty")
    raw = np.zeros_like(counts)
    raw[nonempty] = 1.0 / counts[nonempty]
    raw[~nonempty] = raw[nonempty].max()
    return raw / raw.mean()


def bin_weights_for_targets(targets: np.ndarray, bin_weights: np.ndarray) -> np.ndarray:
    """Look up each target's bin weight; `targets` (B, 4), weights (4, bins)."""
    bins = bin_weights.shape[1]
    idx = np.clip((targets * bins).astype(int), 0, bins - 1)
    out = np.empty_like(targets)
    for d in range(targets.shape[1]):
        out[:, d] = bin_weights[d, idx[:, d]]
    return out


def per_boundary_bin_weights(
    y_train: np.ndarray, bins: int, kernel_sigma: float | None = None
) -> np.ndarray:
    """(N, 4) training targets -> (4, bins) weight table per boundary."""
    rows = []
    for d in range(y_train.shape[1]):
        if kernel_sigma is None:
            rows.append(inverse_frequency_weights(y_train[:, d], bins))
        else:
            rows.append(lds_weights(y_train[:, d], bins, kernel_sigma))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# feature-space oversampling


def truncated_gaussian_noise(
    rng: np.random.Generator, size, sigma: float, clip: float
) -> np.ndarray:
    """Gaussian draws hard-clipped to [-clip, clip]."""
    return np.clip(rng.normal(0.0, sigma, size=size), -clip, clip)


def smogn_augment(
    features: dict[str, Tensor],
    targets: np.ndarray,
    size_ratios: np.ndarray,
    rng: np.random.Generator,
    noise_sigma: float = 0.05,
    noise_clip: float = 0.10,
):
    """Append one synthetic sample per rare (few-shot) sample in the batch.

    Each synthetic sample interpolates the pooled features and targets of a
    rare sample with its nearest rare neighbor (by target distance), with
    clipped Gaussian noise on the synthetic targets. Interpolation is a
    constant matrix applied to the feature tensors, so gradients flow back
    into the encoder. Batches with fewer than two rare samples are returned
    unchanged.

    Returns (features, targets, n_synthetic).
    """
    n = targets.shape[0]
    rare = np.flatnonzero(np.asarray(size_ratios) < FEW_SHOT_MAX_RATIO)
    if rare.size < 2:
        return features, targets, 0

    mix_rows = []
    new_targets = []
    for i in rare:
        others = rare[rare != i]
        dists = np.linalg.norm(targets[others] - targets[i], axis=1)
        j = int(others[np.argmin(dists)])
        lam = float(rng.uniform())
        row = np.zeros(n)
        row[i] = 1.0 - lam
        row[j] = lam
        mix_rows.append(row)
        noise = truncated_gaussian_noise(rng, 4, noise_sigma, noise_clip)
        new_targets.append(
            np.clip((1.0 - lam) * targets[i] + lam * targets[j] + noise, 0.0, 1.0)
        )

    mix = Tensor(np.vstack([np.eye(n)] + mix_rows))
    aug_features = {d: T.matmul(mix, features[d]) for d in BOUNDARIES}
    aug_targets = np.vstack([targets] + new_targets)
    return aug_features, aug_targets, len(mix_rows)

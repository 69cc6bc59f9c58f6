"""Ground-truth heatmap rendering and the detector's training losses.

Every loss returns ``(value, gradient)`` with the gradient taken analytically
with respect to the raw head outputs (logits and offsets).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InvalidInputError, NumericFailure

LOG_FLOOR = math.log(1e-12)
POSITIVE_THRESHOLD = 0.99
INIT_BIAS = -2.19


@dataclass(frozen=True)
class LossParams:
    alpha: float = 3.86
    beta: float = 2.92
    sigma_px: float = 6.6
    blob_radius_factor: float = 4.0
    mask_radius_px: float = 24.0
    beta_off: float = 1.0
    offset_weight: float = 0.1

    def __post_init__(self):
        if self.alpha < 1:
            raise InvalidInputError("alpha must be >= 1")
        if self.beta < 0:
            raise InvalidInputError("beta must be >= 0")
        for name in ("sigma_px", "mask_radius_px", "beta_off"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0")


def _as_real(a) -> np.ndarray:
    # keeps longdouble for high-precision probes, promotes everything else to float64
    a = np.asarray(a)
    return a if a.dtype == np.longdouble else a.astype(float)


@dataclass
class HeatTensor:
    """Head output: ``logits`` of shape (H, W), optional ``offsets`` (2, H, W) as (dx, dy)."""

    logits: np.ndarray
    offsets: np.ndarray | None = None

    def __post_init__(self):
        self.logits = _as_real(self.logits)
        if self.logits.ndim != 2:
            raise InvalidInputError("logits must be 2-D")
        if not np.all(np.isfinite(self.logits)):
            raise InvalidInputError("logits must be finite")
        if self.offsets is not None:
            self.offsets = _as_real(self.offsets)
            if self.offsets.shape != (2,) + self.logits.shape:
                raise InvalidInputError(
                    f"offsets shape {self.offsets.shape} does not match (2, {self.height}, {self.width})"
                )
            if not np.all(np.isfinite(self.offsets)):
                raise InvalidInputError("offsets must be finite")

    @property
    def height(self) -> int:
        return self.logits.shape[0]

    @property
    def width(self) -> int:
        return self.logits.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.offsets is None else 3

    @classmethod
    def from_array(cls, data) -> "HeatTensor":
        data = _as_real(data)
        if data.ndim == 2:
            return cls(data)
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise InvalidInputError(f"expected (H, W), (1, H, W) or (3, H, W); got {data.shape}")
        return cls(data[0], data[1:] if data.shape[0] == 3 else None)

    def to_array(self) -> np.ndarray:
        if self.offsets is None:
            return self.logits[None]
        return np.concatenate([self.logits[None], self.offsets], axis=0)


@dataclass
class HeatTarget:
    values: np.ndarray
    offset_targets: np.ndarray
    offset_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def positives(self) -> np.ndarray:
        return self.values >= POSITIVE_THRESHOLD


def render_target(points, height: int, width: int, params: LossParams | None = None) -> HeatTarget:
    """Render the Gaussian heatmap, offset targets and offset mask for ``points``.

    ``points`` are continuous (x, y) pixel coordinates.  Blobs are truncated at
    ``blob_radius_factor * sigma`` and combined by element-wise maximum; the
    pixel holding each centre is set to exactly 1.
    """
    params = params or LossParams()
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("non-finite point")
    outside = (pts[:, 0] < 0) | (pts[:, 0] >= width) | (pts[:, 1] < 0) | (pts[:, 1] >= height)
    if np.any(outside):
        raise InvalidInputError(f"point {pts[np.argmax(outside)].tolist()} outside {width}x{height} grid")

    values = np.zeros((height, width))
    offsets = np.zeros((2, height, width))
    mask = np.zeros((height, width), dtype=bool)
    best_d2 = np.full((height, width), np.inf)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    cutoff = params.blob_radius_factor * params.sigma_px
    two_s2 = 2.0 * params.sigma_px**2
    reach = max(cutoff, params.mask_radius_px)

    for px, py in pts:
        x0, x1 = max(0, int(math.floor(px - reach))), min(width, int(math.ceil(px + reach)) + 1)
        y0, y1 = max(0, int(math.floor(py - reach))), min(height, int(math.ceil(py + reach)) + 1)
        dx = px - xs[x0:x1][None, :]
        dy = py - ys[y0:y1][:, None]
        d2 = dx**2 + dy**2
        blob = np.where(d2 <= cutoff**2, np.exp(-d2 / two_s2), 0.0)
        np.maximum(values[y0:y1, x0:x1], blob, out=values[y0:y1, x0:x1])

        # strict '<' keeps the earlier point on ties
        closer = (d2 <= params.mask_radius_px**2) & (d2 < best_d2[y0:y1, x0:x1])
        best_d2[y0:y1, x0:x1][closer] = d2[closer]
        mask[y0:y1, x0:x1] |= closer
        offsets[0, y0:y1, x0:x1][closer] = np.broadcast_to(dx, d2.shape)[closer]
        offsets[1, y0:y1, x0:x1][closer] = np.broadcast_to(dy, d2.shape)[closer]

    for px, py in pts:
        values[int(py), int(px)] = 1.0
    return HeatTarget(values, offsets, mask)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _check_shapes(tensor: HeatTensor, target: HeatTarget):
    if tensor.logits.shape != target.values.shape:
        raise InvalidInputError(f"logits {tensor.logits.shape} vs target {target.values.shape}")


def focal_loss(tensor: HeatTensor, target: HeatTarget, params: LossParams | None = None):
    """Penalty-reduced Gaussian focal loss on the logits; returns ``(loss, d loss / d logits)``."""
    params = params or LossParams()
    _check_shapes(tensor, target)
    z = tensor.logits
    y = target.values
    a, b = params.alpha, params.beta

    raw_logp, raw_logq = _log_sigmoid(z), _log_sigmoid(-z)
    p, q = np.exp(raw_logp), np.exp(raw_logq)  # q = 1 - p without cancellation
    logp = np.maximum(raw_logp, LOG_FLOOR)
    logq = np.maximum(raw_logq, LOG_FLOOR)
    dlogp = np.where(raw_logp > LOG_FLOOR, q, 0.0)
    dlogq = np.where(raw_logq > LOG_FLOOR, -p, 0.0)

    pos = y >= POSITIVE_THRESHOLD
    n_pos = max(int(pos.sum()), 1)
    q_a, p_a = np.exp(a * raw_logq), np.exp(a * raw_logp)
    neg_w = np.where(pos, 0.0, (1.0 - np.minimum(y, 1.0)) ** b)

    terms = np.where(pos, q_a * logp, p_a * neg_w * logq)
    # d/dz q^a = -a p q^a ; d/dz p^a = a q p^a
    dterms = np.where(
        pos,
        -a * p * q_a * logp + q_a * dlogp,
        neg_w * (a * q * p_a * logq + p_a * dlogq),
    )
    loss = -np.sum(terms) / n_pos
    if loss.dtype != np.longdouble:
        loss = float(loss)
    return loss, -dterms / n_pos


def _smooth_l1(e, beta):
    ae = np.abs(e)
    quad = ae < beta
    val = np.where(quad, 0.5 * e * e / beta, ae - 0.5 * beta)
    grad = np.where(quad, e / beta, np.sign(e))
    return val, grad


def offset_loss(tensor: HeatTensor, target: HeatTarget, params: LossParams | None = None):
    """Masked smooth-L1 offset loss, averaged over masked (pixel, channel) entries."""
    params = params or LossParams()
    if tensor.offsets is None:
        raise InvalidInputError("offsets absent")
    _check_shapes(tensor, target)
    m = np.broadcast_to(target.offset_mask, tensor.offsets.shape)
    count = int(m.sum())
    if count == 0:
        return 0.0, np.zeros_like(tensor.offsets)
    err = np.where(m, tensor.offsets - target.offset_targets, 0.0)
    val, grad = _smooth_l1(err, params.beta_off)
    loss = np.sum(np.where(m, val, 0.0)) / count
    if loss.dtype != np.longdouble:
        loss = float(loss)
    return loss, np.where(m, grad, 0.0) / count


def total_loss(tensor: HeatTensor, target: HeatTarget, params: LossParams | None = None):
    """``L_hm + offset_weight * L_off``; gradient is an array shaped like ``tensor.to_array()``."""
    params = params or LossParams()
    l_hm, g_hm = focal_loss(tensor, target, params)
    if tensor.offsets is None:
        return l_hm, g_hm[None]
    l_off, g_off = offset_loss(tensor, target, params)
    w = params.offset_weight
    return l_hm + w * l_off, np.concatenate([g_hm[None], w * g_off], axis=0)


def grad_check(lossfn, tensor: HeatTensor, target: HeatTarget, params: LossParams | None = None,
               epsilon: float = 1e-5, n_samples: int = 200, rng=None,
               probe_dtype=np.longdouble, loss_kind: str | None = None) -> float:
    """Largest relative error between the analytic gradient and central differences.

    ``lossfn`` behaves like :func:`focal_loss`, :func:`offset_loss` or
    :func:`total_loss`; pass ``loss_kind`` (the function name) when it is a
    wrapper.  Entries are sampled without replacement from the parameters the
    loss differentiates (all of them when there are fewer than ``n_samples``).

    The two probe evaluations run in ``probe_dtype``.  In float64 the
    difference quotient carries an absolute error near ``1e-16 * |L| / epsilon``,
    which swamps gradients below ~1e-7 (common next to a heatmap centre where
    ``(1 - Y)**beta`` is tiny); extended precision pushes that floor down by
    three orders of magnitude.  The analytic gradient is always float64.
    """
    params = params or LossParams()
    rng = np.random.default_rng(rng)
    kind = loss_kind or getattr(lossfn, "__name__", "total_loss")
    if kind not in ("focal_loss", "offset_loss", "total_loss"):
        raise InvalidInputError(f"unknown loss kind {kind!r}")
    base = tensor.to_array().astype(float)
    _, grad = lossfn(tensor, target, params)
    grad = np.asarray(grad, dtype=float)
    if kind == "focal_loss":
        lo = 0
        grad = grad.reshape((1,) + base.shape[1:])
    elif kind == "offset_loss":
        lo = 1
    else:
        lo = 0

    probe = base.astype(probe_dtype)
    eps = probe_dtype(epsilon)

    flat = rng.permutation(grad.size)[: min(n_samples, grad.size)]
    worst = 0.0
    for idx in flat:
        c, i, j = np.unravel_index(idx, grad.shape)
        vals = []
        for sign in (1, -1):
            arr = probe.copy()
            arr[c + lo, i, j] += sign * eps
            vals.append(lossfn(HeatTensor.from_array(arr), target, params)[0])
        fd = float((vals[0] - vals[1]) / (2 * eps))
        g = grad[c, i, j]
        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst


def fit_logits_by_descent(target: HeatTarget, params: LossParams | None = None,
                          steps: int = 500, lr: float = 5.0, return_history: bool = False):
    """Plain gradient descent on the heatmap loss over a free logit grid.

    Starts from the head's bias initialisation (-2.19).  With ``return_history``
    the per-step loss values are returned alongside the tensor.
    """
    params = params or LossParams()
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    z = np.full(target.shape, INIT_BIAS)
    history = []
    for _ in range(steps):
        loss, grad = total_loss(HeatTensor(z), target, params)
        history.append(loss)
        z = z - lr * grad[0]
        if not (math.isfinite(loss) and np.all(np.isfinite(z))):
            raise NumericFailure("gradient descent diverged")
    result = HeatTensor(z)
    history.append(total_loss(result, target, params)[0])
    if return_history:
        return result, history
    return result


def ideal_tensor(points, height: int, width: int, params: LossParams | None = None,
                 with_offsets: bool = True, clip: float = 1e-6) -> HeatTensor:
    """Head output a perfect model would emit: logit of the rendered target, exact offsets."""
    target = render_target(points, height, width, params)
    y = np.clip(target.values, clip, 1.0 - clip)
    logits = np.log(y) - np.log1p(-y)
    offsets = np.where(target.offset_mask, target.offset_targets, 0.0) if with_offsets else None
    return HeatTensor(logits, offsets)

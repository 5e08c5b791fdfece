"""Mask-based boundary refinement.

Each box side is treated as a discrete random variable over pixel indices.
Its posterior combines a Gaussian prior centered on the regressed coordinate
(sigma = gamma * box extent) with a learned likelihood: a 1-d convolution of
the mask's per-line max profile, plus bias, through a sigmoid.  One kernel is
shared by all four sides; right/bottom reuse it on the reversed profile.

Index convention: a boundary coordinate is the index of the boundary pixel
itself (leftmost foreground column for "left", rightmost for "right"), so a
refined box spans [left, right] inclusive.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm

DEFAULT_SCOPE = 4       # s: kernel covers 2s+1 profile samples
DEFAULT_GAMMA = 0.05    # prior width coefficient
SIGMA_FLOOR = 0.1       # below this the prior degenerates to one-hot


class MbrmError(RuntimeError):
    pass


@dataclass
class MbrmParams:
    scope: int = DEFAULT_SCOPE
    gamma: float = DEFAULT_GAMMA
    kernel: nm.Tensor = None
    bias: nm.Tensor = None

    def __post_init__(self):
        if self.scope < 1:
            raise MbrmError(f"scope must be >= 1, got {self.scope}")
        if self.gamma < 0:
            raise MbrmError(f"gamma must be >= 0, got {self.gamma}")
        if self.kernel is None:
            self.kernel = nm.Tensor(np.zeros(2 * self.scope + 1, dtype=np.float32),
                                    requires_grad=True, name="mbrm.kernel")
        if self.bias is None:
            self.bias = nm.Tensor(np.zeros(1, dtype=np.float32),
                                  requires_grad=True, name="mbrm.bias")
        if self.kernel.shape != (2 * self.scope + 1,):
            raise MbrmError(f"kernel length {self.kernel.shape} != 2s+1 "
                            f"for s={self.scope}")

    def state_arrays(self):
        return {"mbrm.kernel": self.kernel.data, "mbrm.bias": self.bias.data}

    def load_state_arrays(self, arrays):
        self.kernel.data = arrays["mbrm.kernel"].astype(np.float32).copy()
        self.bias.data = arrays["mbrm.bias"].astype(np.float32).copy()


def boundary_profile(mask, axis):
    """Per-line maxima of a (h, w) soft mask.

    axis="x": per-column max over rows (length w); axis="y": per-row max over
    columns (length h)."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise MbrmError("boundary_profile: empty mask")
    if axis == "x":
        return mask.max(axis=0)
    if axis == "y":
        return mask.max(axis=1)
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def boundary_likelihood(profile, params, side):
    """Per-coordinate likelihood values in (0, 1) as a Tensor.

    left/top: sigmoid(conv(profile) + bias); right/bottom: the same applied to
    the reversed profile, reversed back."""
    if side not in ("left", "right", "top", "bottom"):
        raise ValueError(f"unknown side {side!r}")
    prof = nm.as_tensor(np.asarray(profile, dtype=params.kernel.dtype))
    mirrored = side in ("right", "bottom")
    if mirrored:
        prof = nm.take_rows(prof, np.arange(prof.shape[0])[::-1])
    z = nm.conv1d(prof, params.kernel) + params.bias  # bias broadcasts
    out = nm.sigmoid(z)
    if mirrored:
        out = nm.take_rows(out, np.arange(out.shape[0])[::-1])
    return out


def boundary_prior(x_r, extent, gamma, n):
    """Discrete Gaussian prior over coordinates 0..n-1, normalized to sum 1.

    mu = x_r, sigma = gamma * extent; sigma below the floor yields a one-hot
    at round(x_r) clipped into range."""
    if n < 1:
        raise MbrmError(f"prior needs n >= 1, got {n}")
    sigma = gamma * extent
    if sigma < SIGMA_FLOOR:
        out = np.zeros(n)
        out[int(np.clip(round(x_r), 0, n - 1))] = 1.0
        return out
    i = np.arange(n, dtype=np.float64)
    p = np.exp(-((i - x_r) ** 2) / (2.0 * sigma * sigma))
    return p / p.sum()


def boundary_posterior(prior, likelihood):
    """Normalized elementwise product; returns (posterior, argmax, degenerate).

    An (numerically) all-zero product falls back to the prior's argmax with
    the degenerate flag set.  Argmax ties break to the lowest index."""
    prior = np.asarray(prior, dtype=np.float64)
    likelihood = np.asarray(likelihood, dtype=np.float64)
    if prior.shape != likelihood.shape:
        raise MbrmError(f"posterior: prior {prior.shape} vs likelihood "
                        f"{likelihood.shape}")
    prod = prior * likelihood
    total = prod.sum()
    if total <= 0.0:
        return prior.copy(), int(prior.argmax()), True
    post = prod / total
    return post, int(post.argmax()), False


def _refine_axis(profile, lo, hi, extent, params):
    """Refine one axis (left/right or top/bottom boundary pixel indices)."""
    n = len(profile)
    prior_lo = boundary_prior(lo, extent, params.gamma, n)
    prior_hi = boundary_prior(hi, extent, params.gamma, n)
    like_lo = boundary_likelihood(profile, params, "left").data
    like_hi = boundary_likelihood(profile, params, "right").data
    _, i_lo, _ = boundary_posterior(prior_lo, like_lo)
    _, i_hi, _ = boundary_posterior(prior_hi, like_hi)
    if i_lo >= i_hi:  # degenerate ordering: keep the regressed coordinates
        return lo, hi, True
    return float(i_lo), float(i_hi), False


def refine_box(box, mask_full, params):
    """Refine a regressed corner box against its full-resolution soft mask.

    gamma = 0 bypasses refinement and returns the box unchanged; an all-zero
    mask returns it with the ``no_evidence`` flag.  Output of the activated
    path comes from per-side posterior argmaxes (pixel indices), re-expressed
    as a corner box.  Returns (refined corner box, flags dict)."""
    mask_full = np.asarray(mask_full)
    h, w = mask_full.shape
    flags = {"no_evidence": False, "degenerate_x": False, "degenerate_y": False}
    if params.gamma == 0.0:
        return tuple(float(c) for c in box), flags
    x1 = float(np.clip(box[0], 0, w))
    y1 = float(np.clip(box[1], 0, h))
    x2 = float(np.clip(box[2], 0, w))
    y2 = float(np.clip(box[3], 0, h))
    if not mask_full.any():
        flags["no_evidence"] = True
        return (x1, y1, x2, y2), flags

    left, right = x1, x2 - 1.0
    top, bottom = y1, y2 - 1.0
    mx = boundary_profile(mask_full, "x")
    my = boundary_profile(mask_full, "y")
    rl, rr, flags["degenerate_x"] = _refine_axis(mx, left, right, x2 - x1, params)
    rt, rb, flags["degenerate_y"] = _refine_axis(my, top, bottom, y2 - y1, params)
    return (rl, rt, rr + 1.0, rb + 1.0), flags


def _side_loss(profile, params, side, mu, extent, gt_index):
    """Cross-entropy of the posterior against a one-hot gt coordinate."""
    n = len(profile)
    prior = boundary_prior(mu, extent, params.gamma, n)
    like = boundary_likelihood(profile, params, side)
    num = nm.tlog(nm.take_rows(like, [int(gt_index)]))
    den = nm.tlog(nm.tsum(nm.mul_const(like, prior)))
    const = -float(np.log(max(prior[int(gt_index)], 1e-30)))
    return nm.reshape(den - num, ()) + nm.Tensor(np.asarray(const, dtype=np.float32))


def mbrm_training_loss(sample, params):
    """Summed four-side cross-entropy for one (mask, gt box, regressed box)
    training triple; boxes are corner boxes in image pixels."""
    mask, gt_box, reg_box = sample
    h, w = mask.shape
    mx = boundary_profile(mask, "x")
    my = boundary_profile(mask, "y")

    def clip_idx(v, n):
        return int(np.clip(round(v), 0, n - 1))

    sides = [
        (mx, "left", reg_box[0], reg_box[2] - reg_box[0], clip_idx(gt_box[0], w)),
        (mx, "right", reg_box[2] - 1.0, reg_box[2] - reg_box[0], clip_idx(gt_box[2] - 1.0, w)),
        (my, "top", reg_box[1], reg_box[3] - reg_box[1], clip_idx(gt_box[1], h)),
        (my, "bottom", reg_box[3] - 1.0, reg_box[3] - reg_box[1], clip_idx(gt_box[3] - 1.0, h)),
    ]
    total = None
    for profile, side, mu, extent, gt_idx in sides:
        term = _side_loss(profile, params, side, mu, extent, gt_idx)
        total = term if total is None else total + term
    return total


def train_mbrm(samples, params=None, lr=0.1, iterations=1000, momentum=0.9,
               batch_size=8, seed=0, log=None):
    """Fit the shared kernel and bias on (mask, gt box, regressed box) triples.

    Only the MBRM parameters receive gradients; everything else is outside the
    graph by construction.  Returns the trained ``MbrmParams``."""
    if not samples:
        raise MbrmError("train_mbrm: empty training set")
    params = params or MbrmParams()
    vel_k = np.zeros_like(params.kernel.data)
    vel_b = np.zeros_like(params.bias.data)
    for it in range(iterations):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((seed, 0xB0, it))))
        idx = rng.integers(0, len(samples), size=batch_size)
        total = None
        for i in idx:
            term = mbrm_training_loss(samples[int(i)], params)
            total = term if total is None else total + term
        loss = total * (1.0 / batch_size)
        params.kernel.zero_grad()
        params.bias.zero_grad()
        loss.backward()
        for tensor, vel in ((params.kernel, vel_k), (params.bias, vel_b)):
            g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            vel *= momentum
            vel += g
            tensor.data -= lr * vel
        if log is not None:
            log(it, loss.item())
    return params

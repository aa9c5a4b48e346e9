"""Multimodal compact bilinear (MCB) pooling.

Two vectors are each projected with a signed count sketch and the sketches
are combined by circular convolution, computed in the frequency domain.
The numpy functions are the float64 reference path; :class:`MCBFusion`
is the differentiable torch layer used inside the generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True, eq=False)
class CountSketchPlan:
    input_dim: int
    sketch_dim: int
    bucket: np.ndarray
    sign: np.ndarray
    seed: int

    def __post_init__(self):
        if self.bucket.shape != (self.input_dim,) or self.sign.shape != (self.input_dim,):
            raise ValueError("bucket and sign must have length input_dim")
        self.bucket.setflags(write=False)
        self.sign.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, CountSketchPlan):
            return NotImplemented
        return (
            self.input_dim == other.input_dim
            and self.sketch_dim == other.sketch_dim
            and self.seed == other.seed
            and np.array_equal(self.bucket, other.bucket)
            and np.array_equal(self.sign, other.sign)
        )

    def matrix(self) -> np.ndarray:
        """Dense (input_dim, sketch_dim) projection with one signed entry per row."""
        m = np.zeros((self.input_dim, self.sketch_dim))
        m[np.arange(self.input_dim), self.bucket] = self.sign
        return m

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "sketch_dim": self.sketch_dim,
            "seed": self.seed,
            "bucket": self.bucket.tolist(),
            "sign": self.sign.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CountSketchPlan":
        return cls(
            input_dim=int(d["input_dim"]),
            sketch_dim=int(d["sketch_dim"]),
            bucket=np.asarray(d["bucket"], dtype=np.int64),
            sign=np.asarray(d["sign"], dtype=np.int64),
            seed=int(d["seed"]),
        )


def make_sketch_plan(input_dim: int, sketch_dim: int, seed: int) -> CountSketchPlan:
    if input_dim < 1 or sketch_dim < 1:
        raise ValueError(f"dimensions must be positive, got {input_dim=} {sketch_dim=}")
    rng = np.random.default_rng(seed)
    bucket = rng.integers(0, sketch_dim, size=input_dim, dtype=np.int64)
    sign = rng.integers(0, 2, size=input_dim, dtype=np.int64) * 2 - 1
    return CountSketchPlan(input_dim, sketch_dim, bucket, sign, int(seed))


def count_sketch(v, plan: CountSketchPlan) -> np.ndarray:
    """out[j] = sum of sign[i] * v[i] over all i hashed to bucket j."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (plan.input_dim,):
        raise ValueError(f"expected vector of length {plan.input_dim}, got shape {v.shape}")
    out = np.zeros(plan.sketch_dim)
    np.add.at(out, plan.bucket, plan.sign * v)
    return out


def _check_pair(a, b, plan_a, plan_b):
    if plan_a.sketch_dim != plan_b.sketch_dim:
        raise ValueError(
            f"plans disagree on sketch_dim: {plan_a.sketch_dim} vs {plan_b.sketch_dim}"
        )


def mcb_pool(a, b, plan_a: CountSketchPlan, plan_b: CountSketchPlan) -> np.ndarray:
    _check_pair(a, b, plan_a, plan_b)
    fa = np.fft.fft(count_sketch(a, plan_a))
    fb = np.fft.fft(count_sketch(b, plan_b))
    out = np.fft.ifft(fa * fb)
    scale = max(np.abs(out.real).max(), 1.0)
    residue = np.abs(out.imag).max()
    if residue > 1e-6 * scale:
        raise ArithmeticError(f"non-real circular convolution residue {residue:g}")
    return out.real


def circular_convolve_direct(x, y) -> np.ndarray:
    """O(n^2) circular convolution: out[k] = sum_j x[j] * y[(k - j) mod n]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    out = np.zeros(n)
    for k in range(n):
        for j in range(n):
            out[k] += x[j] * y[(k - j) % n]
    return out


def mcb_backward(grad_out, a, b, plan_a: CountSketchPlan, plan_b: CountSketchPlan):
    """Gradients of <grad_out, mcb_pool(a, b)> with respect to a and b.

    The adjoint of circular convolution with a fixed sketch is circular
    cross-correlation with it; the adjoint of the count sketch gathers the
    bucket and reapplies the sign.
    """
    _check_pair(a, b, plan_a, plan_b)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (plan_a.sketch_dim,):
        raise ValueError(f"grad_out must have length {plan_a.sketch_dim}, got {g.shape}")
    sa = count_sketch(a, plan_a)
    sb = count_sketch(b, plan_b)
    fg = np.fft.fft(g)
    grad_sa = np.fft.ifft(fg * np.conj(np.fft.fft(sb))).real
    grad_sb = np.fft.ifft(fg * np.conj(np.fft.fft(sa))).real
    grad_a = plan_a.sign * grad_sa[plan_a.bucket]
    grad_b = plan_b.sign * grad_sb[plan_b.bucket]
    return grad_a, grad_b


def signed_sqrt_l2(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Signed square root then L2 normalization.

    Shifted by sqrt(eps) so the map is continuous at 0: empty sketch buckets
    carry FFT round-off of either sign, which must not become a +-1e-6 jump.
    """
    x = torch.sign(x) * (torch.sqrt(x.abs() + eps) - eps**0.5)
    return F.normalize(x, dim=-1)


class MCBFusion(nn.Module):
    """Batched MCB pooling of two feature vectors with frozen sketch plans.

    Plans are stored as buffers so they travel with the module state.
    """

    def __init__(self, plan_a: CountSketchPlan, plan_b: CountSketchPlan, normalize: bool = True):
        super().__init__()
        if plan_a.sketch_dim != plan_b.sketch_dim:
            raise ValueError("plans must share sketch_dim")
        self.sketch_dim = plan_a.sketch_dim
        self.normalize = normalize
        self.plan_a = plan_a
        self.plan_b = plan_b
        self.register_buffer("proj_a", torch.from_numpy(plan_a.matrix()).float())
        self.register_buffer("proj_b", torch.from_numpy(plan_b.matrix()).float())

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        sa = a @ self.proj_a.to(a.dtype)
        sb = b @ self.proj_b.to(b.dtype)
        n = self.sketch_dim
        out = torch.fft.irfft(torch.fft.rfft(sa, n=n) * torch.fft.rfft(sb, n=n), n=n)
        if self.normalize:
            out = signed_sqrt_l2(out)
        return out

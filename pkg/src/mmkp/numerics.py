"""Differentiable tensor primitives and finite-difference gradient checking.

Reverse-mode gradients come from ``torch.autograd``; this module pins down the
handful of primitives the model relies on (with explicit shape checks and the
tie-breaking / clamping conventions used throughout) and provides the
central-difference checker used by ``training.grad_check``.
"""

import math
import os

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError

LOGIT_CLAMP = 30.0
LAYERNORM_EPS = 1e-5


def precision_from_env(default=64):
    raw = os.environ.get("MKP_PRECISION", str(default)).strip()
    if raw not in ("32", "64"):
        raise ConfigError(f"MKP_PRECISION must be 32 or 64, got {raw!r}")
    return int(raw)


def dtype_for(bits):
    if bits == 64:
        return torch.float64
    if bits == 32:
        return torch.float32
    raise ConfigError(f"unsupported precision: {bits}")


def default_dtype():
    return dtype_for(precision_from_env())


def _check(name, cond, msg):
    if not cond:
        raise ShapeError(f"{name}: {msg}")


def matmul(a, b):
    _check("matmul", a.shape[-1] == b.shape[-2] if b.dim() > 1 else a.shape[-1] == b.shape[0],
           f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a + b


def mul(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"mul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a * b


def sigmoid(x, clamp=True):
    """Logistic function; logits are clamped to +-30 first unless ``clamp=False``."""
    if clamp:
        x = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    return torch.sigmoid(x)


def tanh(x):
    return torch.tanh(x)


def softmax(x, dim=-1, mask=None):
    """Softmax along ``dim``; positions where ``mask`` is False get probability 0."""
    if mask is not None:
        _check("softmax", mask.shape == x.shape, f"mask {tuple(mask.shape)} vs input {tuple(x.shape)}")
        x = x.masked_fill(~mask, float("-inf"))
    return torch.softmax(x, dim=dim)


def layernorm(x, weight=None, bias=None, eps=LAYERNORM_EPS):
    """Normalise the last axis to zero mean / unit (biased) variance, then apply the affine part."""
    if weight is not None:
        _check("layernorm", weight.shape == x.shape[-1:], "weight must match the last axis")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def maxpool_columns(h, mask=None):
    """Column-wise max over the row axis (``-2``).

    ``h`` is ``(..., n, d)``; ``mask`` (``(..., n)``, True = valid row) excludes
    padding.  The gradient of each column flows to a single row, the lowest
    index among tied maxima.
    """
    _check("maxpool_columns", h.dim() >= 2, "need at least a 2-D input")
    _check("maxpool_columns", h.shape[-2] > 0, "cannot pool over zero rows")
    scores = h.detach()
    if mask is not None:
        _check("maxpool_columns", mask.shape == h.shape[:-1], "mask must match the row axes")
        scores = scores.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    best = scores.max(dim=-2, keepdim=True).values
    is_max = scores == best
    # first True along the row axis
    first = is_max & (is_max.cumsum(dim=-2) == 1)
    idx = first.to(torch.int64).argmax(dim=-2, keepdim=True)
    return h.gather(-2, idx).squeeze(-2)


def concat(tensors, dim=-1):
    ref = tensors[0].shape
    for t in tensors[1:]:
        _check("concat", t.dim() == len(ref), "rank mismatch")
        for ax in range(len(ref)):
            if ax != (dim % len(ref)):
                _check("concat", t.shape[ax] == ref[ax], f"axis {ax} differs: {tuple(t.shape)} vs {tuple(ref)}")
    return torch.cat(tensors, dim=dim)


def slice_(x, start, stop, dim=-1):
    _check("slice", 0 <= start <= stop <= x.shape[dim], f"[{start}:{stop}] out of range for size {x.shape[dim]}")
    return x.narrow(dim, start, stop - start)


def mse(a, b):
    _check("mse", a.shape == b.shape, f"{tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean(dim=-1)


def nll(probs, index, floor=1e-12):
    """``-log(p[index] + floor)`` gathered along the last axis."""
    _check("nll", probs.shape[:-1] == index.shape, f"index {tuple(index.shape)} vs probs {tuple(probs.shape)}")
    picked = probs.gather(-1, index.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked + floor)


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def _subsample(gflat, size, rng):
    active = torch.zeros_like(gflat[0], dtype=torch.bool)
    for g in gflat:
        active |= g != 0
    live = torch.nonzero(active).flatten().numpy()
    take = rng.choice(live, size=min(len(live), size // 2), replace=False) if len(live) else live
    rest = np.setdiff1d(np.arange(gflat[0].numel()), take)
    more = rng.choice(rest, size=size - len(take), replace=False)
    return np.sort(np.concatenate([take, more]).astype(np.int64))


def allocate_probes(sizes, budget):
    """Split a total probe budget over tensors of the given sizes.

    Everything is probed when the sizes fit the budget.  Otherwise the budget
    is water-filled: small tensors are probed completely and the larger ones
    share what remains evenly.
    """
    if sum(sizes) <= budget:
        return list(sizes)
    alloc = [0] * len(sizes)
    left, remaining = budget, len(sizes)
    for i in sorted(range(len(sizes)), key=lambda i: sizes[i]):
        alloc[i] = min(sizes[i], left // remaining)
        left -= alloc[i]
        remaining -= 1
    return alloc


def finite_difference_check(fn, params, eps=1e-5, max_elements=10_000, seed=0):
    """Compare autograd gradients of ``fn()`` to central differences.

    ``fn`` returns a scalar or a 1-D tensor of scalars (each output is checked
    separately, sharing the perturbed evaluations).  ``params`` maps names to
    leaf tensors.  ``fn`` must be deterministic.  Every element is probed when
    all tensors together hold at most ``max_elements`` values; above that a
    seeded random subset of ``max_elements`` elements is probed (see
    :func:`allocate_probes`).  Returns ``{name: {"max_rel_err", "checked",
    "numel"}}``; ``max_rel_err`` is a list when ``fn`` is vector-valued.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    names = list(params)
    tensors = [params[n] for n in names]
    for p in tensors:
        if p.dtype != torch.float64:
            raise ConfigError("gradient checking needs 64-bit parameters (MKP_PRECISION=64)")
    out = fn()
    scalar = out.dim() == 0
    out = out.reshape(-1)
    grads = []   # grads[j][k]: d out[j] / d tensors[k]
    for j in range(out.shape[0]):
        g = torch.autograd.grad(out[j], tensors, retain_graph=True, allow_unused=True)
        grads.append([torch.zeros_like(t) if gi is None else gi for t, gi in zip(tensors, g)])
    for j, row in enumerate(grads):
        for name, g in zip(names, row):
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")

    rng = np.random.default_rng(seed)
    alloc = allocate_probes([p.numel() for p in tensors], max_elements)
    report = {}
    with torch.no_grad():
        for k, (name, p) in enumerate(zip(names, tensors)):
            flat = p.view(-1)
            n = flat.numel()
            gflat = [grads[j][k].reshape(-1) for j in range(len(grads))]
            idx = np.arange(n) if alloc[k] >= n else _subsample(gflat, alloc[k], rng)
            worst = [0.0] * len(grads)
            for i in idx.tolist():
                orig = float(flat[i])
                flat[i] = orig + eps
                fp = fn().reshape(-1)
                flat[i] = orig - eps
                fm = fn().reshape(-1)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                if not torch.isfinite(num).all():
                    raise NumericError(f"non-finite finite difference for {name}[{i}]")
                for j in range(len(grads)):
                    worst[j] = max(worst[j], relative_error(float(gflat[j][i]), float(num[j])))
            report[name] = {"max_rel_err": worst[0] if scalar else worst, "checked": len(idx), "numel": n}
    return report


def directional_check(fn, params, eps=1e-5, seed=0):
    """Compare ``<grad, d>`` with the central difference of ``fn`` along a random
    unit direction ``d``, one direction per tensor.

    Projecting onto a direction keeps the compared quantity well above the
    rounding noise of the finite difference even when individual gradient
    entries are tiny.  Returns ``{name: rel_err}``.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(fn(), tensors, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    report = {}
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            g = torch.zeros_like(p) if g is None else g
            d = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            d /= d.norm()
            orig = p.clone()
            p.add_(eps * d)
            fp = float(fn())
            p.copy_(orig - eps * d)
            fm = float(fn())
            p.copy_(orig)
            report[name] = relative_error(float((g * d).sum()), (fp - fm) / (2 * eps))
    return report

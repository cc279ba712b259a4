"""Differentiable building blocks: linear maps, masked single-head cross
attention, a reset-before GRU cell, a positive-scale Gaussian head, a
central-difference gradient checker and the checkpoint file format.
"""

from __future__ import annotations

import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SIGMA_FLOOR = 1e-4
CHECKPOINT_MAGIC = b"UADCKPT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class EmptyAttentionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class LatentDistribution(NamedTuple):
    mean: torch.Tensor
    scale: torch.Tensor


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """y = x W + b with W stored as (Din, Dout)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = x @ weight
    if bias is not None:
        if bias.shape[-1] != weight.shape[1]:
            raise ShapeError("linear: bias does not match output dim")
        y = y + bias
    return y


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(d_in, d_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


def masked_softmax(scores: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``valid``; invalid entries get exactly 0.

    Rows with no valid entry come out all-zero.
    """
    if bool(valid.all()):
        return torch.softmax(scores, dim=-1)
    neg = torch.finfo(scores.dtype).min
    filled = scores.masked_fill(~valid, neg)
    top = filled.amax(dim=-1, keepdim=True)
    e = torch.exp(filled - top) * valid
    denom = e.sum(dim=-1, keepdim=True)
    return e / torch.where(denom > 0, denom, torch.ones_like(denom))


def cross_attention(query, keys, values, validity, params, allow_empty: bool = False, return_weights: bool = False):
    """Single-head scaled dot-product attention with residual and output projection.

    query (..., Q, C), keys/values (..., N, C), validity (..., N) or
    broadcastable (..., Q, N). ``params`` maps w_q, w_k, w_v, w_o, b_o.
    A query whose key set is empty raises unless ``allow_empty``, in which
    case it passes through unchanged.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError("cross_attention: keys and values disagree on N")
    if query.shape[-1] != params["w_q"].shape[0] or keys.shape[-1] != params["w_k"].shape[0]:
        raise ShapeError("cross_attention: channel mismatch")
    if validity.dim() == keys.dim() - 1:
        validity = validity.unsqueeze(-2)
    dense = keys.shape[-2] > 0 and bool(validity.all())
    if not dense:
        has_key = validity.any(dim=-1, keepdim=True)
        if not allow_empty and not bool(has_key.all()):
            raise EmptyAttentionError("cross_attention: a query has no valid key")
    # scaling the projected queries is cheaper than scaling the score matrix
    q = linear(query, params["w_q"]) * (1.0 / math.sqrt(params["w_q"].shape[1]))
    k = linear(keys, params["w_k"])
    v = linear(values, params["w_v"])
    scores = q @ k.transpose(-1, -2)
    if dense:
        weights = torch.softmax(scores, dim=-1)
    else:
        weights = masked_softmax(scores, validity.expand_as(scores))
    update = linear(weights @ v, params["w_o"], params["b_o"])
    out = query + update if dense else query + update * has_key.to(update.dtype)
    return (out, weights) if return_weights else out


class CrossAttention(nn.Module):
    def __init__(self, d_query: int, d_key: int | None = None, d_model: int | None = None):
        super().__init__()
        d_key = d_key or d_query
        d_model = d_model or d_query
        self.w_q = Linear(d_query, d_model, bias=False).weight
        self.w_k = Linear(d_key, d_model, bias=False).weight
        self.w_v = Linear(d_key, d_model, bias=False).weight
        self.w_o = Linear(d_model, d_query, bias=False).weight
        self.b_o = nn.Parameter(torch.zeros(d_query))

    def params(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o, "b_o": self.b_o}

    def forward(self, query, keys, values, validity, allow_empty=False, return_weights=False):
        return cross_attention(query, keys, values, validity, self.params(), allow_empty, return_weights)


def gru_step(h: torch.Tensor, x: torch.Tensor, params) -> torch.Tensor:
    """Reset-before GRU: the candidate sees r * h."""
    if h.shape != x.shape:
        raise ShapeError(f"gru_step: state {tuple(h.shape)} and input {tuple(x.shape)} differ")
    xh = torch.cat([x, h], dim=-1)
    z = torch.sigmoid(linear(xh, params["w_z"], params["b_z"]))
    r = torch.sigmoid(linear(xh, params["w_r"], params["b_r"]))
    cand = torch.tanh(linear(torch.cat([x, r * h], dim=-1), params["w_h"], params["b_h"]))
    return (1.0 - z) * h + z * cand


class GRUCell(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        for gate in ("z", "r", "h"):
            lin = Linear(2 * d, d)
            setattr(self, f"w_{gate}", lin.weight)
            setattr(self, f"b_{gate}", lin.bias)

    def params(self):
        return {n: getattr(self, n) for n in ("w_z", "b_z", "w_r", "b_r", "w_h", "b_h")}

    def forward(self, h, x):
        return gru_step(h, x, self.params())


def distribution_head(q: torch.Tensor, params) -> LatentDistribution:
    mean = linear(q, params["w_mu"], params["b_mu"])
    scale = F.softplus(linear(q, params["w_sigma"], params["b_sigma"])) + SIGMA_FLOOR
    return LatentDistribution(mean, scale)


class DistributionHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        mu, sigma = Linear(d, d), Linear(d, d)
        self.w_mu, self.b_mu = mu.weight, mu.bias
        self.w_sigma, self.b_sigma = sigma.weight, sigma.bias

    def params(self):
        return {"w_mu": self.w_mu, "b_mu": self.b_mu, "w_sigma": self.w_sigma, "b_sigma": self.b_sigma}

    def forward(self, q):
        return distribution_head(q, self.params())


# --- gradient checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.flagged


def _named(params):
    if isinstance(params, dict):
        return list(params.items())
    if isinstance(params, nn.Module):
        return [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    return list(params)


def grad_check(
    closure: Callable[[], torch.Tensor],
    params,
    tolerance: float = 1e-4,
    step: float = 1e-4,
    floor: float = 1e-6,
    analytic: dict[str, torch.Tensor] | None = None,
) -> GradCheckReport:
    """Compare autograd (or supplied ``analytic``) gradients against central differences.

    Per-entry error is |a - n| / max(|a|, |n|, floor).
    """
    named = _named(params)
    for _, p in named:
        p.grad = None
    loss = closure()
    if not torch.isfinite(loss).all():
        raise NumericError(f"closure returned a non-finite loss {loss.item()}")
    if analytic is None:
        grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
        analytic = {
            n: (g.detach().clone() if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named, grads)
        }
    report = GradCheckReport(0.0, tolerance=tolerance)
    with torch.no_grad():
        for name, p in named:
            a = analytic[name].reshape(-1)
            flat = p.data.view(-1)
            numeric = torch.empty_like(a)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                lp = closure().item()
                flat[i] = orig - step
                lm = closure().item()
                flat[i] = orig
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
                numeric[i] = (lp - lm) / (2.0 * step)
            denom = torch.clamp(torch.maximum(a.abs(), numeric.abs()), min=floor)
            err = float(((a - numeric).abs() / denom).max()) if a.numel() else 0.0
            report.per_param[name] = err
            report.max_rel_error = max(report.max_rel_error, err)
            if err >= tolerance:
                report.flagged.append(name)
    return report


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Header line, JSON index line, then raw little-endian tensor bytes in order."""
    index = []
    blobs = []
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": index}, sort_keys=True, separators=(",", ":"))
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b" " + str(CHECKPOINT_VERSION).encode() + b"\n")
    buf.write(header.encode("utf-8") + b"\n")
    for b in blobs:
        buf.write(b)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().strip().split(b" ")
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {magic[1].decode()}")
        header = json.loads(fh.readline())
        tensors = {}
        for entry in header["tensors"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64))
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
            tensors[entry["name"]] = torch.from_numpy(arr)
    return tensors, header["meta"]


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))

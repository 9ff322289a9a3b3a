"""Layer set, loss primitives and optimizer shared by every model.

Reverse-mode differentiation comes from torch autograd; the recurrent cells,
attention block, losses and the Adam update are written out here so their
conventions are pinned independently of torch's own implementations.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

PROB_CLAMP = 1e-7
DROPOUT = 0.1


class NumericalError(FloatingPointError):
    """Raised when a tensor that must stay finite picks up NaN or Inf."""


def check_finite(t: Tensor, what: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {what}")
    return t


def _uniform_(w: Tensor, fan_in: int) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        w.uniform_(-bound, bound)


class Linear(nn.Linear):
    """Affine map with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero bias."""

    def reset_parameters(self) -> None:
        _uniform_(self.weight, self.in_features)
        if self.bias is not None:
            nn.init.zeros_(self.bias)


class SequenceBatchNorm(nn.Module):
    """Batch normalisation over every leading axis (batch x time) of a (..., C) tensor."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.bn = nn.BatchNorm1d(num_features, momentum=momentum, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        if self.training and flat.shape[0] < 2:
            raise ValueError("batch normalisation in train mode needs at least 2 samples")
        return self.bn(flat).reshape(shape)


class GRUCell(nn.Module):
    """Gated recurrent unit.

    z = sigmoid(W_z [x; h] + b_z), r = sigmoid(W_r [x; h] + b_r),
    n = tanh(W_h [x; r * h] + b_h), h' = (1 - z) * h + z * n.
    """

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        fan_in = input_size + hidden_size
        self.weight_zr = nn.Parameter(torch.empty(2 * hidden_size, fan_in))
        self.bias_zr = nn.Parameter(torch.zeros(2 * hidden_size))
        self.weight_h = nn.Parameter(torch.empty(hidden_size, fan_in))
        self.bias_h = nn.Parameter(torch.zeros(hidden_size))
        _uniform_(self.weight_zr, fan_in)
        _uniform_(self.weight_h, fan_in)

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        gates = torch.sigmoid(torch.cat([x, h], -1) @ self.weight_zr.T + self.bias_zr)
        z, r = gates.chunk(2, dim=-1)
        n = torch.tanh(torch.cat([x, r * h], -1) @ self.weight_h.T + self.bias_h)
        return (1 - z) * h + z * n


class LSTMCell(nn.Module):
    """Long short-term memory cell with gate order (i, f, o, g)."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        fan_in = input_size + hidden_size
        self.weight = nn.Parameter(torch.empty(4 * hidden_size, fan_in))
        self.bias = nn.Parameter(torch.zeros(4 * hidden_size))
        _uniform_(self.weight, fan_in)

    def forward(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        pre = torch.cat([x, h], -1) @ self.weight.T + self.bias
        i, f, o, g = pre.chunk(4, dim=-1)
        i, f, o, g = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o), torch.tanh(g)
        c_new = f * c + i * g
        return o * torch.tanh(c_new), c_new


class GRU(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.cell = GRUCell(input_size, hidden_size)

    def forward(self, x: Tensor, h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
        h = x.new_zeros(x.shape[0], self.cell.hidden_size) if h0 is None else h0
        outs = []
        for t in range(x.shape[1]):
            h = self.cell(x[:, t], h)
            outs.append(h)
        return torch.stack(outs, 1), h


class LSTM(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.cell = LSTMCell(input_size, hidden_size)

    def forward(self, x: Tensor, state: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        if state is None:
            zeros = x.new_zeros(x.shape[0], self.cell.hidden_size)
            state = (zeros, zeros)
        h, c = state
        outs = []
        for t in range(x.shape[1]):
            h, c = self.cell(x[:, t], h, c)
            outs.append(h)
        return torch.stack(outs, 1), (h, c)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4, dropout: float = DROPOUT):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim)
        self.out = Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, return_weights: bool = False):
        B, T, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(x).reshape(B, T, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        ctx = (self.drop(weights) @ v).transpose(1, 2).reshape(B, T, D)
        y = self.out(ctx)
        return (y, weights) if return_weights else y


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, heads: int = 4, mlp_ratio: int = 2, dropout: float = DROPOUT):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp_in = Linear(dim, mlp_ratio * dim)
        self.mlp_out = Linear(mlp_ratio * dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.mlp_out(self.drop(torch.relu(self.mlp_in(self.ln2(x))))))


class PositionalEmbedding(nn.Module):
    """Learnable (max_len, dim) table added to the inputs; zero-initialised."""

    def __init__(self, max_len: int, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(max_len, dim))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] > self.table.shape[0]:
            raise ValueError(f"sequence length {x.shape[1]} exceeds positional table {self.table.shape[0]}")
        return x + self.table[: x.shape[1]]


# losses ----------------------------------------------------------------------


def cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    return (torch.logsumexp(logits, -1) - logits.gather(-1, target.long().unsqueeze(-1)).squeeze(-1)).mean()


def bce(p: Tensor, y: Tensor) -> Tensor:
    p = p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def bce_with_logits(logits: Tensor, y: Tensor, weight: Tensor | None = None) -> Tensor:
    per = nn.functional.softplus(logits) - y * logits
    if weight is not None:
        return (per * weight).sum() / weight.sum()
    return per.mean()


def mse(a: Tensor, b: Tensor) -> Tensor:
    return ((a - b) ** 2).mean()


def huber(r: Tensor, delta: float = 1.0) -> Tensor:
    """psi(r) = |r|^2 / (2 delta) if |r| <= delta else |r| - delta / 2.

    ``r`` is a (..., k) stack of residual vectors; returns (...) per-vector values.
    """
    sq = (r**2).sum(-1)
    linear = torch.sqrt(sq.clamp_min(delta**2)) - delta / 2
    return torch.where(sq <= delta**2, sq / (2 * delta), linear)


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) summed over the last axis and averaged over the rest."""
    q = q.clamp_min(PROB_CLAMP)
    return (torch.xlogy(p, p) - p * torch.log(q)).sum(-1).mean()


def gaussian_kl(mu: Tensor, sigma: Tensor) -> Tensor:
    """Per-dimension KL(N(mu, sigma^2) || N(0, 1))."""
    var = sigma**2
    return 0.5 * (mu**2 + var - torch.log(var) - 1)


# optimizer -------------------------------------------------------------------


def is_decay_exempt(module: nn.Module, param_name: str) -> bool:
    return param_name.startswith("bias") or isinstance(module, (nn.LayerNorm, nn.BatchNorm1d))


def named_decay_flags(model: nn.Module) -> list[tuple[str, nn.Parameter, bool]]:
    out = []
    for mod_name, mod in model.named_modules():
        for pname, p in mod.named_parameters(recurse=False):
            full = f"{mod_name}.{pname}" if mod_name else pname
            out.append((full, p, is_decay_exempt(mod, pname)))
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor | None],
    state: AdamState,
    exempt: Sequence[bool] | None = None,
) -> None:
    """Bias-corrected Adam with decoupled weight decay, updating ``params`` in place.

    Decay shrinks non-exempt weights by ``lr * weight_decay`` before the
    moment-based step and never enters the moment estimates.
    """
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1 - state.beta1**state.step
    c2 = 1 - state.beta2**state.step
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                g = torch.zeros_like(p)
            m, v = state.m[i], state.v[i]
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            if state.weight_decay and not (exempt and exempt[i]):
                p.mul_(1 - state.lr * state.weight_decay)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))


class Adam:
    """Optimizer wrapper holding the parameter list, decay flags and AdamState."""

    def __init__(self, model: nn.Module, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        flags = named_decay_flags(model)
        self.names = [n for n, _, _ in flags]
        self.params = [p for _, p, _ in flags]
        self.exempt = [e for _, _, e in flags]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.exempt)


# finite differences ----------------------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-3, index: Iterable[int] | None = None) -> Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. entries of ``x``.

    ``x`` is perturbed in place and restored. Entries outside ``index`` are
    left as NaN when a subset is requested.
    """
    flat = x.data.view(-1)
    grad = torch.full_like(flat, float("nan"), dtype=torch.float64)
    for i in (range(flat.numel()) if index is None else index):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn())
        flat[i] = orig - h
        fm = float(fn())
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.view(x.shape)


def relative_error(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


# persistence -----------------------------------------------------------------


def module_arrays(module: nn.Module, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
    """Parameters and buffers as float32 arrays in registration order."""
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, t in module.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        out[prefix + name] = t.detach().cpu().numpy().astype(np.float32)
    return out


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = module.state_dict()
    new = {}
    for name, t in state.items():
        if name.endswith("num_batches_tracked"):
            new[name] = t
            continue
        key = prefix + name
        if key not in arrays:
            raise KeyError(f"checkpoint is missing array {key!r}")
        arr = np.asarray(arrays[key])
        if tuple(arr.shape) != tuple(t.shape):
            raise ValueError(f"array {key!r} has shape {arr.shape}, model expects {tuple(t.shape)}")
        new[name] = torch.from_numpy(arr.copy()).to(t.dtype)
    module.load_state_dict(new)

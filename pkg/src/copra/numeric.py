"""Numeric core: seeding, precision modes, reverse-mode gradients and a
finite-difference oracle.

Differentiation is delegated to torch autograd; this module pins down the
contracts the rest of the package relies on (scalar losses, zero gradients for
unreachable parameters, explicit failure on non-finite losses) and provides an
independent central-difference check.
"""

from __future__ import annotations

import contextlib
import hashlib
import os
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch


class ContractViolation(ValueError):
    """Raised when a caller breaks a documented precondition."""


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss is NaN/Inf; carries the recorded op trace."""

    def __init__(self, message: str, op_trace: list[str]):
        super().__init__(f"{message}\nop trace (loss -> leaves):\n  " + "\n  ".join(op_trace))
        self.op_trace = op_trace


_DEBUG = os.environ.get("COPRA_DEBUG", "0") not in ("", "0")


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    """No-op unless debug mode is on; then raise on NaN/Inf."""
    if _DEBUG and not bool(torch.isfinite(t).all()):
        raise FloatingPointError(f"non-finite values produced in {where}")
    return t


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def derive_seed(root: int, *names: str | int) -> int:
    """Derive a 64-bit child seed from a root seed and a path of stream names.

    Children are keyed by name rather than draw order, so introducing a new
    stream never shifts the values of an existing one.
    """
    h = hashlib.sha256(int(root).to_bytes(8, "little", signed=False))
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little")


def numpy_rng(root: int, *names: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))


def torch_generator(root: int, *names: str | int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *names) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


@contextlib.contextmanager
def precision(dtype: torch.dtype):
    """Temporarily switch torch's default float dtype (float32 training,
    float64 gradient checks)."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


def tensor_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def op_trace(t: torch.Tensor, limit: int = 40) -> list[str]:
    trace, seen = [], set()
    frontier = [t.grad_fn]
    while frontier and len(trace) < limit:
        fn = frontier.pop(0)
        if fn is None or id(fn) in seen:
            continue
        seen.add(id(fn))
        trace.append(type(fn).__name__)
        frontier.extend(nxt for nxt, _ in fn.next_functions)
    return trace


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` with respect to each named parameter.

    Parameters not reachable from ``loss`` receive zeros of matching shape.
    """
    if loss.dim() != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLossError(f"loss is {loss.item()}", op_trace(loss))
    names = list(params)
    tensors = [params[n] for n in names]
    if loss.grad_fn is None:
        return {n: torch.zeros_like(p) for n, p in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        n: (torch.zeros_like(p) if g is None else g)
        for n, p, g in zip(names, tensors, grads)
    }


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    h: float = 1e-5,
    eps_abs: float = 1e-8,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is re-evaluated with each parameter coordinate perturbed in place by
    ``±h``. For every parameter tensor the error is
    ``|g_analytic - g_numeric| / (|g_analytic| + eps_abs)`` with vector norms
    taken over the checked coordinates; the maximum over tensors is returned.
    ``max_coords`` limits the number of coordinates probed per tensor (chosen
    at random, reproducibly); ``None`` checks every coordinate.
    """
    if h <= 0:
        raise ContractViolation("finite-difference step h must be positive")
    if not isinstance(params, Mapping):
        params = {str(i): p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ContractViolation(f"finite_diff_check requires float64 parameters ({name} is {p.dtype})")

    analytic = backward(f(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.view(-1)
        n = flat.numel()
        coords = np.arange(n) if max_coords is None or n <= max_coords else np.sort(
            rng.choice(n, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        with torch.no_grad():
            for j, c in enumerate(coords):
                orig = flat[c].item()
                flat[c] = orig + h
                fp = f().item()
                flat[c] = orig - h
                fm = f().item()
                flat[c] = orig
                numeric[j] = (fp - fm) / (2.0 * h)
        a = analytic[name].detach().reshape(-1)[torch.as_tensor(coords)].numpy()
        err = np.linalg.norm(a - numeric) / (np.linalg.norm(a) + eps_abs)
        worst = max(worst, float(err))
    return worst


def iter_params(modules: Iterable[torch.nn.Module]) -> dict[str, torch.nn.Parameter]:
    out: dict[str, torch.nn.Parameter] = {}
    for i, m in enumerate(modules):
        for name, p in m.named_parameters():
            out[f"{i}.{name}"] = p
    return out

"""Tensor helpers, gradient evaluation and the CBVW checkpoint format.

Tensors are plain ``torch.Tensor`` objects in float32. Autograd supplies the
reverse pass; :func:`grad_check` re-derives gradients independently with
central finite differences in float64.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import Tensor, nn

from .errors import (
    CheckpointError,
    EmptyProgram,
    MissingFile,
    NotScalar,
    ShapeMismatch,
    UnknownNode,
    ZeroVector,
)

EPS_FLOOR = 1e-12
GRADCHECK_FLOOR = 1e-6
DTYPE = torch.float32


def check_shape(x: Tensor, shape, what: str = "tensor") -> None:
    if tuple(x.shape) != tuple(shape):
        raise ShapeMismatch(f"{what}: expected shape {tuple(shape)}, got {tuple(x.shape)}")


def l2_normalize(v: Tensor, dim: int = -1) -> Tensor:
    """Scale ``v`` to unit Euclidean norm along ``dim``.

    Raises ZeroVector when any slice has norm at or below ``EPS_FLOOR``;
    a vanishing embedding is a bug upstream and should surface here.
    """
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if bool((norm <= EPS_FLOOR).any()):
        raise ZeroVector("cannot normalize a zero vector")
    return v / norm


def cosine_similarity(a: Tensor, b: Tensor, dim: int = -1) -> Tensor:
    # product is commutative elementwise, so the result is symmetric bit-for-bit
    return (l2_normalize(a, dim) * l2_normalize(b, dim)).sum(dim).clamp(-1.0, 1.0)


ObjectiveFn = Callable[[dict, dict], Tensor]


@dataclass
class Program:
    """A scalar-valued differentiable computation.

    ``fn(inputs, params)`` must build its output only from the tensors it is
    handed (no captured tensors), so that :func:`grad_check` can re-run it in
    float64.
    """

    fn: ObjectiveFn
    inputs: dict[str, Tensor] = field(default_factory=dict)
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def from_modules(cls, modules: Mapping[str, nn.Module], inputs: dict[str, Tensor],
                     objective: Callable[[dict, dict], Tensor]) -> "Program":
        """Wrap modules so their parameters become program parameters.

        ``objective(calls, inputs)`` receives ``calls[name](*args)`` which runs
        the named module with whatever parameter values the program supplies.
        Extra keyword arguments on a module's forward pass through unchanged.
        """
        params = {}
        for name, mod in modules.items():
            for pname, p in mod.named_parameters():
                params[f"{name}.{pname}"] = p.detach().clone()

        def fn(inp, par):
            calls = {}
            for name, mod in modules.items():
                sub = {k[len(name) + 1:]: v for k, v in par.items() if k.startswith(name + ".")}
                calls[name] = _bind(mod, sub)
            return objective(calls, inp)

        return cls(fn, dict(inputs), params)

    def evaluate(self) -> Tensor:
        return self.fn(self.inputs, self.params)


def _bind(mod: nn.Module, params: dict[str, Tensor]):
    def call(*args, **kwargs):
        return torch.func.functional_call(mod, params, args, kwargs)
    return call


def _run_with_grad(program: Program, names_in, names_par):
    inp = {k: v.detach().clone().requires_grad_(k in names_in) for k, v in program.inputs.items()}
    par = {k: v.detach().clone().requires_grad_(k in names_par) for k, v in program.params.items()}
    with torch.enable_grad():
        out = program.fn(inp, par)
        if out.numel() != 1:
            raise NotScalar(f"objective must be scalar, got shape {tuple(out.shape)}")
        wrt = [inp[k] for k in names_in] + [par[k] for k in names_par]
        grads = torch.autograd.grad(out.reshape(()), wrt, allow_unused=True)
    result = {}
    for key, t, g in zip(list(names_in) + list(names_par), wrt, grads):
        result[key] = torch.zeros_like(t) if g is None else g.detach()
    return out.detach().reshape(()), result


def input_gradient(program: Program, wrt: str) -> Tensor:
    """d(objective)/d(input ``wrt``), shaped like the input."""
    if wrt not in program.inputs:
        raise UnknownNode(f"{wrt!r} is not an input of the program")
    _, grads = _run_with_grad(program, [wrt], [])
    return grads[wrt]


def parameter_gradient(program: Program) -> dict[str, Tensor]:
    if not program.inputs and not program.params:
        raise EmptyProgram("program has no inputs or parameters")
    _, grads = _run_with_grad(program, [], list(program.params))
    return grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: dict[str, Tensor]
    h: float
    n_probes: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = GRADCHECK_FLOOR) -> Tensor:
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, floor))
    return (analytic - numeric).abs() / denom


def grad_check(program: Program, h: float = 1e-3, probes: int | None = None, seed: int = 0,
               floor: float = GRADCHECK_FLOOR, include: list[str] | None = None) -> GradCheckReport:
    """Compare autograd against central differences over inputs and parameters.

    Both routes run in float64. With ``probes=None`` every coordinate is
    checked; otherwise ``probes`` coordinates are drawn uniformly (seeded)
    across all checked tensors. ``floor`` keeps the relative error of
    exactly-zero gradients from being dominated by float64 round-off.
    """
    if not 0 < h <= 0.1:
        raise ValueError(f"step h must lie in (0, 0.1], got {h}")
    if not program.inputs and not program.params:
        raise EmptyProgram("program has no inputs or parameters")
    p64 = Program(program.fn,
                  {k: v.detach().double() for k, v in program.inputs.items()},
                  {k: v.detach().double() for k, v in program.params.items()})
    names = include if include is not None else list(p64.inputs) + list(p64.params)
    in_names = [n for n in names if n in p64.inputs]
    par_names = [n for n in names if n in p64.params]
    _, analytic = _run_with_grad(p64, in_names, par_names)

    sizes = [(n, (p64.inputs.get(n) if n in p64.inputs else p64.params[n]).numel()) for n in names]
    total = sum(s for _, s in sizes)
    if probes is None or probes >= total:
        chosen = {n: np.arange(s) for n, s in sizes}
    else:
        rng = np.random.default_rng(seed)
        flat = np.sort(rng.choice(total, size=probes, replace=False))
        chosen, start = {}, 0
        for n, s in sizes:
            chosen[n] = flat[(flat >= start) & (flat < start + s)] - start
            start += s

    errors, worst, count = {}, 0.0, 0
    with torch.no_grad():
        for n, _ in sizes:
            store = p64.inputs if n in p64.inputs else p64.params
            base = store[n]
            err = torch.zeros(base.numel(), dtype=torch.float64)
            a_flat = analytic[n].reshape(-1)
            for i in chosen[n]:
                i = int(i)
                vals = []
                for sign in (1.0, -1.0):
                    pert = base.clone().reshape(-1)
                    pert[i] += sign * h
                    store[n] = pert.reshape(base.shape)
                    vals.append(float(p64.fn(p64.inputs, p64.params)))
                store[n] = base
                numeric = torch.tensor((vals[0] - vals[1]) / (2 * h), dtype=torch.float64)
                err[i] = relative_error(a_flat[i], numeric, floor)
                count += 1
            errors[n] = err.reshape(base.shape)
            if err.numel():
                worst = max(worst, float(err.max()))
    return GradCheckReport(worst, errors, h, count)


# ---------------------------------------------------------------------------
# CBVW checkpoints

MAGIC = b"CBVW"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, Tensor]) -> None:
    Path(path).write_bytes(dumps_checkpoint(tensors))


def dumps_checkpoint(tensors: Mapping[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")  # keeps rank 0
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> dict[str, Tensor]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"checkpoint not found: {path}")
    return loads_checkpoint(path.read_bytes())


def loads_checkpoint(data: bytes) -> dict[str, Tensor]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic bytes")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        pos = 10
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        # ValueError covers short tensor payloads and undecodable names
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return out

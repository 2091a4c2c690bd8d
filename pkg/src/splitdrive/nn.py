"""Layers built on the tensor primitives: linear/MLP blocks, layer norm,
multi-head attention, and the checkpoint format (JSON manifest + little-endian
float64 sidecar)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import (
    Tensor,
    concat,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
)

CHECKPOINT_VERSION = 1


class Module:
    """Minimal parameter container. Parameters are Tensors with
    requires_grad=True found on attributes, child Modules, or lists of
    either; traversal follows attribute insertion order, so the checkpoint
    layout is stable for a fixed architecture."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[key] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        params[f"{key}.{i}"] = item
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int):
        self.weight = parameter(xavier_uniform(rng, in_dim, out_dim))
        self.bias = parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, rng: np.random.Generator, dims: list[int]):
        self.layers = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-12):
        self.scale = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.scale, self.shift, eps=self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with learned input/output projections.

    `mask` is a boolean allow-matrix [Nq, Nk]: True may attend, False is
    forced to -inf before the softmax (so blocked keys contribute exact
    zeros). `pos_bias` [Nq, Nk] or [heads, Nq, Nk] adds to the pre-softmax
    logits.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads != 0:
            raise ValueError(f"embedding dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.proj_q = Linear(rng, dim, dim)
        self.proj_k = Linear(rng, dim, dim)
        self.proj_v = Linear(rng, dim, dim)
        self.proj_out = Linear(rng, dim, dim)

    def __call__(
        self,
        queries: Tensor,
        keys: Tensor,
        values: Tensor,
        mask: np.ndarray | None = None,
        pos_bias: Tensor | None = None,
    ) -> Tensor:
        nq, nk = queries.shape[0], keys.shape[0]
        if keys.shape != values.shape:
            raise ValueError(f"key/value shapes differ: {keys.shape} vs {values.shape}")
        if queries.shape[1] != self.dim or keys.shape[1] != self.dim:
            raise ValueError(f"expected embedding dim {self.dim}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (nq, nk):
                raise ValueError(f"mask shape {mask.shape} != ({nq}, {nk})")
            if not mask.any(axis=1).all():
                raise ValueError("attention mask blocks every key for some query row")

        def heads_first(x: Tensor, n: int) -> Tensor:
            return transpose(reshape(x, (n, self.heads, self.head_dim)), (1, 0, 2))

        q = heads_first(self.proj_q(queries), nq)
        k = heads_first(self.proj_k(keys), nk)
        v = heads_first(self.proj_v(values), nk)

        logits = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.head_dim))
        if pos_bias is not None:
            if pos_bias.shape not in ((nq, nk), (self.heads, nq, nk)):
                raise ValueError(f"pos_bias shape {pos_bias.shape} incompatible with ({nq}, {nk})")
            logits = logits + pos_bias
        if mask is not None:
            blocker = np.where(mask, 0.0, -np.inf)
            logits = logits + Tensor(blocker)

        attn = softmax(logits, axis=-1)
        mixed = matmul(attn, v)  # [heads, nq, head_dim]
        merged = reshape(transpose(mixed, (1, 0, 2)), (nq, self.dim))
        return self.proj_out(merged)


class FeedForward(Module):
    """Two linear layers with ReLU; hidden width defaults to 2x the model dim."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int | None = None):
        hidden = 2 * dim if hidden is None else hidden
        self.expand = Linear(rng, dim, hidden)
        self.project = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.project(relu(self.expand(x)))


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str | Path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write <path>.json manifest plus <path>.bin of little-endian float64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, value in params.items():
        arr = value.values if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": CHECKPOINT_VERSION, "total_bytes": offset, "params": entries}
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=1)
    with open(path.with_suffix(".bin"), "wb") as f:
        f.write(b"".join(blobs))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path.with_suffix(".json")) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    raw = path.with_suffix(".bin").read_bytes()
    out: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def load_into(module: Module, path: str | Path) -> None:
    """Copy a checkpoint into a built module; any name or shape mismatch is an error."""
    stored = load_checkpoint(path)
    params = module.named_parameters()
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise ValueError(f"checkpoint/architecture mismatch: missing={missing}, extra={extra}")
    for name, tensor in params.items():
        if stored[name].shape != tensor.values.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {stored[name].shape}, "
                f"model {tensor.values.shape}"
            )
    for name, tensor in params.items():
        tensor.values[...] = stored[name]


__all__ = [
    "Module",
    "parameter",
    "xavier_uniform",
    "Linear",
    "MLP",
    "LayerNorm",
    "MultiHeadAttention",
    "FeedForward",
    "save_checkpoint",
    "load_checkpoint",
    "load_into",
    "concat",
]

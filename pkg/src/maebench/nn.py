"""Parameter containers and the two basic layers used by every model."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import LoadError, ShapeError
from .rng import truncated_normal
from .tensor import Tensor


class Module:
    """Holds parameters (``Tensor`` attributes) and child modules.

    Parameter names are dotted attribute paths, with list children indexed
    by position, e.g. ``blocks.0.attn.qkv.weight``. Fixed buffers are plain
    numpy arrays stored under underscore-prefixed attributes.
    """

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    out.update(child.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def trainable_parameters(self, prefix: str = "") -> dict:
        return {k: v for k, v in self.named_parameters(prefix).items() if v.requires_grad}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict, strict: bool = True) -> list:
        """Copy arrays into parameters in place. Returns names that were not provided."""
        params = self.named_parameters()
        missing = [k for k in params if k not in arrays]
        if strict:
            unexpected = [k for k in arrays if k not in params]
            if missing or unexpected:
                raise LoadError(
                    "parameter names do not match",
                    details=[f"missing: {k}" for k in missing] + [f"unexpected: {k}" for k in unexpected],
                )
        for name, p in params.items():
            if name in arrays:
                src = np.asarray(arrays[name])
                if src.shape != p.shape:
                    raise LoadError(
                        f"shape mismatch for {name}", details=[f"{name}: {src.shape} != {p.shape}"]
                    )
                p.data[...] = src
        return missing

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter (and buffer) to ``dtype`` in place."""
        for mod in self.modules():
            for attr, value in vars(mod).items():
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                elif isinstance(value, np.ndarray) and value.dtype.kind == "f":
                    setattr(mod, attr, value.astype(dtype))
        return self

    def modules(self):
        yield self
        for attr, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for child in value:
                    if isinstance(child, Module):
                        yield from child.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True, std: float = 0.02):
        self.in_features = in_features
        self.out_features = out_features
        dtype = T.get_default_dtype()
        if std == 0:
            w = np.zeros((in_features, out_features), dtype=dtype)
        else:
            w = truncated_normal(rng, (in_features, out_features), std=std, dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        dtype = T.get_default_dtype()
        self.weight = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


def no_decay_names(named: dict) -> list:
    """Parameters exempt from weight decay: anything that is not a 2-D weight matrix."""
    return [k for k, v in named.items() if v.ndim < 2 or k.endswith("token")]

"""Named trainable parameters with their initializers."""

from __future__ import annotations

import math

import numpy as np

from .tape import Var

# init kinds: "xavier" (affine weight of a non-recurrent layer), "uniform"
# (recurrent weights and all biases), "zeros"
INIT_KINDS = ("xavier", "uniform", "zeros")


class ParamStore:
    """Owns every trainable tensor of a model, keyed by a unique name."""

    def __init__(self):
        self.params: dict[str, Var] = {}
        self.kinds: dict[str, str] = {}

    def add(self, name: str, shape, kind: str = "uniform") -> Var:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already exists")
        if kind not in INIT_KINDS:
            raise ValueError(f"unknown init kind {kind!r}")
        v = Var(np.zeros(shape), requires_grad=True, name=name)
        self.params[name] = v
        self.kinds[name] = kind
        return v

    def __getitem__(self, name: str) -> Var:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def num_parameters(self) -> int:
        return int(sum(v.value.size for v in self.params.values()))

    def initialize(self, rng: np.random.Generator, uniform_bound: float = 0.1,
                   xavier: bool = True) -> None:
        """Xavier-uniform for non-recurrent affine weights, ``U[-b, b]`` for the rest.

        With ``xavier=False`` every parameter is drawn from ``U[-b, b]``.
        Parameters are visited in insertion order, so a fixed ``rng`` state
        gives bitwise-identical values.
        """
        for name, v in self.params.items():
            kind = self.kinds[name]
            if kind == "zeros":
                v.value = np.zeros_like(v.value)
            elif kind == "xavier" and xavier:
                fan_out, fan_in = v.value.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                v.value = rng.uniform(-bound, bound, size=v.value.shape)
            else:
                v.value = rng.uniform(-uniform_bound, uniform_bound, size=v.value.shape)

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                for k, v in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, arr in values.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].value.shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {k!r}")
            self.params[k].value = np.array(arr, dtype=np.float64)


class Linear:
    """Affine map ``x @ W.T + b``."""

    def __init__(self, store: ParamStore, name: str, in_size: int, out_size: int,
                 recurrent: bool = False):
        self.weight = store.add(f"{name}.weight", (out_size, in_size),
                                "uniform" if recurrent else "xavier")
        self.bias = store.add(f"{name}.bias", (out_size,), "uniform")

    def __call__(self, x):
        from .tape import affine

        return affine(x, self.weight, self.bias)

"""Named parameter registry with deterministic, name-seeded initialization.

Every parameter is created up front at model-build time.  The RNG for a
parameter is derived from (global seed, parameter name), so two models built
with the same seed initialize shared-shape parameters identically even when
their overall parameter sets differ.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .tensor import Parameter


def seeded_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class ParamStore:
    """Registry of Parameters keyed by slash-separated names."""

    def __init__(self, seed: int):
        self.seed = seed
        self.params: dict[str, Parameter] = {}

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p
        return p

    def matrix(self, name: str, fan_in: int, fan_out: int) -> Parameter:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        rng = seeded_rng(self.seed, name)
        return self._register(Parameter(name, rng.uniform(-limit, limit, (fan_in, fan_out))))

    def zeros(self, name: str, shape) -> Parameter:
        return self._register(Parameter(name, np.zeros(shape)))

    def ones(self, name: str, shape) -> Parameter:
        return self._register(Parameter(name, np.ones(shape)))

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

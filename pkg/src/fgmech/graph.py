"""Factor graph and value containers."""

from __future__ import annotations

import warnings

import numpy as np

from .factors import Factor, Key


class Values(dict):
    """Estimate for every variable: Key -> 1-D float array."""

    def copy(self) -> "Values":
        return Values({k: np.array(v) for k, v in self.items()})


class ChainedValues:
    """Read-only view of overrides on top of a base mapping."""

    __slots__ = ("top", "base")

    def __init__(self, top, base):
        self.top = top
        self.base = base

    def __getitem__(self, key):
        out = self.top.get(key)
        return out if out is not None else self.base[key]

    def __contains__(self, key):
        return key in self.top or key in self.base


class FactorGraph:
    """Bipartite container of factors over registered variables."""

    def __init__(self):
        self.factors: list[Factor] = []
        self.var_dims: dict[Key, int] = {}

    def add_variable(self, key: Key, dim: int):
        dim = int(dim)
        old = self.var_dims.get(key)
        if old is not None and old != dim:
            raise ValueError(f"variable {key} re-registered with dim {dim} != {old}")
        self.var_dims[key] = dim

    def add_factor(self, factor: Factor):
        for k in factor.keys:
            if k not in self.var_dims:
                raise KeyError(f"factor {factor.kind} references unregistered variable {k}")
        self.factors.append(factor)

    def add_factors(self, factors):
        for f in factors:
            self.add_factor(f)

    @property
    def num_variables(self):
        return len(self.var_dims)

    def is_connected(self, factors=None, variables=None) -> bool:
        """True when the (sub)graph induced by the given factors is connected."""
        factors = self.factors if factors is None else list(factors)
        keys = set(variables) if variables is not None else {
            k for f in factors for k in f.keys
        }
        if len(keys) <= 1:
            return True
        parent = {k: k for k in keys}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f in factors:
            ks = [k for k in f.keys if k in parent]
            for a, b in zip(ks, ks[1:]):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[ra] = rb
        roots = {find(k) for k in keys}
        return len(roots) == 1

    def warn_if_disconnected(self, factors=None, variables=None):
        if not self.is_connected(factors, variables):
            warnings.warn("factor graph is not connected", stacklevel=2)

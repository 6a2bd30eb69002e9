"""Per-class jump-size laws ν_l.

Every law reduces to a finite list of atoms (support, probs), which is all the
simulator and the portfolio solvers need.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


class JumpLaw:
    kind: str = ""

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def negated(self) -> "JumpLaw":
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def sample(self, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF draw from uniforms ``u``."""
        support, probs = self.atoms()
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, u, side="right")
        return support[np.minimum(idx, support.size - 1)]

    @property
    def sign(self) -> int:
        support, probs = self.atoms()
        live = support[probs > 0]
        if np.all(live >= 0):
            return 1
        return -1


def _check_size(path: str, z: float):
    if not np.isfinite(z) or abs(z) > 1:
        raise ConfigError(path, f"jump size must lie in [-1, 1], got {z}")


@dataclass(frozen=True)
class Deterministic(JumpLaw):
    zbar: float
    kind = "deterministic"

    def __post_init__(self):
        _check_size("zbar", self.zbar)

    def atoms(self):
        return np.array([float(self.zbar)]), np.array([1.0])

    def negated(self):
        return Deterministic(-self.zbar)

    def to_dict(self):
        return {"kind": self.kind, "zbar": self.zbar}


@dataclass(frozen=True)
class Binomial(JumpLaw):
    """Size ``u`` with probability ``p``, else ``dn``."""

    u: float
    dn: float
    p: float
    kind = "binomial"

    def __post_init__(self):
        _check_size("u", self.u)
        _check_size("dn", self.dn)
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("p", f"must lie in [0, 1], got {self.p}")
        if self.u * self.dn < 0:
            raise ConfigError("dn", "u and dn must share a sign")

    def atoms(self):
        return np.array([float(self.u), float(self.dn)]), np.array([self.p, 1.0 - self.p])

    def negated(self):
        return Binomial(-self.u, -self.dn, self.p)

    def to_dict(self):
        return {"kind": self.kind, "u": self.u, "dn": self.dn, "p": self.p}


@dataclass(frozen=True, eq=False)
class Discrete(JumpLaw):
    support: tuple
    probs: tuple
    kind = "discrete"

    def __post_init__(self):
        support = tuple(float(z) for z in np.atleast_1d(self.support))
        probs = tuple(float(p) for p in np.atleast_1d(self.probs))
        if not support or len(support) != len(probs):
            raise ConfigError("probs", "support and probs must be non-empty and of equal length")
        for i, z in enumerate(support):
            _check_size(f"support[{i}]", z)
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            raise ConfigError("probs", f"must be non-negative and sum to 1, got sum {sum(probs)!r}")
        if min(support) < 0 < max(support):
            raise ConfigError("support", "all jump sizes must share a sign")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    def atoms(self):
        return np.array(self.support), np.array(self.probs)

    def negated(self):
        return Discrete(tuple(-z for z in self.support), self.probs)

    def to_dict(self):
        return {"kind": self.kind, "support": list(self.support), "probs": list(self.probs)}


def law_from_dict(data: dict) -> JumpLaw:
    kind = data.get("kind")
    try:
        if kind == "deterministic":
            return Deterministic(float(data["zbar"]))
        if kind == "binomial":
            return Binomial(float(data["u"]), float(data["dn"]), float(data["p"]))
        if kind == "discrete":
            return Discrete(tuple(data["support"]), tuple(data["probs"]))
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), "missing field") from None
    raise ConfigError("kind", f"unknown jump law {kind!r}")


def atom_table(laws) -> tuple[np.ndarray, np.ndarray]:
    """Pad per-class atoms into (m, q) arrays; padded entries get probability 0."""
    atoms = [law.atoms() for law in laws]
    q = max(s.size for s, _ in atoms)
    support = np.zeros((len(atoms), q))
    probs = np.zeros((len(atoms), q))
    for l, (s, p) in enumerate(atoms):
        support[l, : s.size] = s
        probs[l, : p.size] = p
    return support, probs

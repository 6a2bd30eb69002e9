"""Block-structured market: covariance, spectral pieces, jump scalings, alphas.

Assets come in ``m`` classes of ``k`` assets each (``n = m k``).  Within a
class every asset has volatility υ_l, pairwise correlation ρ_l, and the same
jump response j_l; classes are diffusively uncorrelated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .jumps import JumpLaw, law_from_dict


@dataclass(frozen=True)
class Spectral:
    kappa1: np.ndarray       # class-systematic eigenvalues, multiplicity 1
    kappa2: np.ndarray       # within-class eigenvalues, multiplicity k - 1
    pbar: np.ndarray         # (m, n, n) projectors onto the block ones-vectors
    pperp: np.ndarray        # (m, n, n) complementary projectors within each block

    def rebuild(self) -> np.ndarray:
        return np.einsum("l,lij->ij", self.kappa1, self.pbar) + np.einsum("l,lij->ij", self.kappa2, self.pperp)


def _vec(name, value, size):
    arr = np.atleast_1d(np.asarray(value, dtype=float)).copy()
    if arr.size == 1 and size > 1:
        arr = np.full(size, arr[0])
    if arr.size != size:
        raise ConfigError(name, f"expected length {size}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(name, "non-finite entry")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class MarketParams:
    """Market with ``m`` classes of ``k`` assets.

    Jump sizes may be configured with either sign convention: a class whose
    law lives on [−1, 0] is stored with both j_l and the law negated, so that
    internally marks are non-negative and the effective jump j_l z is the
    same.  Effective jumps must be non-positive.
    """

    r: float
    m: int
    k: int
    upsilon: np.ndarray
    rho: np.ndarray
    Rbar: np.ndarray
    Rperp: np.ndarray
    j: np.ndarray
    laws: tuple
    normalized_classes: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.r) and self.r >= 0):
            raise ConfigError("r", f"must be >= 0, got {self.r}")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError("m", "must be a positive integer")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError("k", "must be a positive integer")
        m, k = int(self.m), int(self.k)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "r", float(self.r))
        ups = _vec("upsilon", self.upsilon, m)
        for l, v in enumerate(ups):
            if v <= 0:
                raise ConfigError(f"upsilon[{l}]", f"must be > 0, got {v}")
        rho = _vec("rho", self.rho, m)
        if k > 1:
            lo = -1.0 / (k - 1)
            for l, v in enumerate(rho):
                if not lo < v < 1:
                    raise ConfigError(f"rho[{l}]", f"must lie in ({lo:.6g}, 1), got {v}")
        rbar = _vec("Rbar", self.Rbar, m)
        rperp = _vec("Rperp", np.zeros(m * k) if self.Rperp is None else self.Rperp, m * k)
        for l in range(m):
            s = rperp[l * k:(l + 1) * k].sum()
            if abs(s) > 1e-12:
                raise ConfigError(f"Rperp[{l * k}:{(l + 1) * k}]", f"block must sum to 0, got {s:.3g}")
        jv = _vec("j", self.j, m).copy()
        laws = list(self.laws)
        if len(laws) != m:
            raise ConfigError("laws", f"expected {m} jump laws, got {len(laws)}")
        flipped = []
        for l, law in enumerate(laws):
            if not isinstance(law, JumpLaw):
                raise ConfigError(f"laws[{l}]", f"not a jump law: {law!r}")
            if not -1 <= jv[l] <= 1:
                raise ConfigError(f"j[{l}]", f"must lie in [-1, 1], got {jv[l]}")
            if law.sign < 0:
                laws[l] = law.negated()
                jv[l] = -jv[l]
                flipped.append(l)
            if jv[l] > 0 and np.any(laws[l].atoms()[0][laws[l].atoms()[1] > 0] > 0):
                raise ConfigError(f"j[{l}]", "effective jumps j*z must be non-positive")
        jv.flags.writeable = False
        object.__setattr__(self, "upsilon", ups)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "Rbar", rbar)
        object.__setattr__(self, "Rperp", rperp)
        object.__setattr__(self, "j", jv)
        object.__setattr__(self, "laws", tuple(laws))
        object.__setattr__(self, "normalized_classes", tuple(flipped))
        sp = spectral_decompose(self)
        object.__setattr__(self, "_spectral", sp)
        sigma = build_sigma(self)
        object.__setattr__(self, "_sigma", sigma)
        object.__setattr__(self, "_factor", np.linalg.cholesky(sigma))

    # derived -------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.m * self.k

    @property
    def kappa1(self) -> np.ndarray:
        return self.upsilon ** 2 * (1 + (self.k - 1) * self.rho)

    @property
    def kappa2(self) -> np.ndarray:
        return self.upsilon ** 2 * (1 - self.rho)

    @property
    def spectral(self) -> Spectral:
        return self._spectral

    @property
    def sigma(self) -> np.ndarray:
        return self._sigma

    @property
    def sigma_factor(self) -> np.ndarray:
        """Lower Cholesky factor σ with σσ' = Σ."""
        return self._factor

    @property
    def J(self) -> np.ndarray:
        """(n, m) jump scalings; column l is j_l on block l and 0 elsewhere."""
        out = np.zeros((self.n, self.m))
        for l in range(self.m):
            out[l * self.k:(l + 1) * self.k, l] = self.j[l]
        return out

    @property
    def R(self) -> np.ndarray:
        return np.repeat(self.Rbar, self.k) + self.Rperp

    @property
    def class_exposure(self) -> np.ndarray:
        """Atoms of the effective per-class jump a = j_l z (non-positive)."""
        return self.j

    def sigma_inv_apply(self, x: np.ndarray) -> np.ndarray:
        """Σ^{-1} x through the spectral form."""
        x = np.asarray(x, dtype=float)
        blocks = x.reshape(self.m, self.k)
        mean = blocks.mean(axis=1, keepdims=True)
        out = mean / self.kappa1[:, None] + (blocks - mean) / self.kappa2[:, None]
        return out.reshape(-1)

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "r": self.r, "m": self.m, "k": self.k,
            "upsilon": self.upsilon.tolist(), "rho": self.rho.tolist(),
            "Rbar": self.Rbar.tolist(), "Rperp": self.Rperp.tolist(),
            "j": self.j.tolist(), "laws": [law.to_dict() for law in self.laws],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MarketParams":
        for key in ("r", "m", "k", "upsilon", "rho", "Rbar", "j", "laws"):
            if key not in data:
                raise ConfigError(key, "missing field")
        laws = []
        for l, raw in enumerate(data["laws"]):
            try:
                laws.append(law_from_dict(raw))
            except ConfigError as exc:
                raise exc.under(f"laws[{l}]") from None
        try:
            return cls(float(data["r"]), int(data["m"]), int(data["k"]), data["upsilon"], data["rho"],
                       data["Rbar"], data.get("Rperp"), data["j"], tuple(laws))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("", f"malformed market config ({exc})") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MarketParams":
        return cls.from_dict(json.loads(text))


def build_sigma(params: MarketParams) -> np.ndarray:
    n, k = params.n, params.k
    sigma = np.zeros((n, n))
    for l in range(params.m):
        block = params.upsilon[l] ** 2 * ((1 - params.rho[l]) * np.eye(k) + params.rho[l] * np.ones((k, k)))
        sigma[l * k:(l + 1) * k, l * k:(l + 1) * k] = block
    return sigma


def spectral_decompose(params: MarketParams) -> Spectral:
    m, k, n = params.m, params.k, params.n
    pbar = np.zeros((m, n, n))
    pperp = np.zeros((m, n, n))
    for l in range(m):
        sl = slice(l * k, (l + 1) * k)
        pbar[l, sl, sl] = 1.0 / k
        pperp[l, sl, sl] = np.eye(k) - 1.0 / k
    kappa1 = params.upsilon ** 2 * (1 + (k - 1) * params.rho)
    kappa2 = params.upsilon ** 2 * (1 - params.rho)
    return Spectral(kappa1, kappa2, pbar, pperp)


def decompose_returns(R, k: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Split R into block means R̄ and the block-mean-free residual R⊥."""
    R = np.asarray(R, dtype=float)
    if R.ndim != 1 or R.size != k * m:
        raise ValueError(f"expected a vector of length {k * m}, got shape {R.shape}")
    blocks = R.reshape(m, k)
    rbar = blocks.mean(axis=1)
    return rbar, (blocks - rbar[:, None]).reshape(-1)

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

KINDS = ("log", "power", "exponential")


@dataclass(frozen=True)
class UtilitySpec:
    """Investor preferences.

    ``gamma`` is the power exponent (γ ∉ {0, 1}, γ < 1) for ``power`` and the
    absolute risk aversion (γ > 0) for ``exponential``; it is ignored for
    ``log``.  For exponential utility the wealth-scaling exponent of the value
    function is forced to κ = r γ, which is why ``r`` is carried here.
    """

    kind: str = "log"
    beta: float = 0.05
    gamma: float = 0.0
    r: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("kind", f"must be one of {KINDS}, got {self.kind!r}")
        if not self.beta > 0:
            raise ConfigError("beta", f"must be > 0, got {self.beta}")
        if self.kind == "power":
            if self.gamma in (0.0, 1.0):
                raise ConfigError("gamma", "power exponent must differ from 0 and 1")
            if self.gamma > 1:
                raise ConfigError("gamma", f"power exponent must be < 1, got {self.gamma}")
        if self.kind == "exponential":
            if not self.gamma > 0:
                raise ConfigError("gamma", f"risk aversion must be > 0, got {self.gamma}")
            if not self.r * self.gamma > 0:
                raise ConfigError("r", "exponential utility needs r*gamma > 0 (kappa = r*gamma)")

    @property
    def kappa(self) -> float | None:
        return self.r * self.gamma if self.kind == "exponential" else None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "beta": self.beta}
        if self.kind != "log":
            out["gamma"] = self.gamma
        if self.kind == "exponential":
            out["kappa"] = self.kappa
        return out

    @classmethod
    def from_dict(cls, data: dict, r: float = 0.0) -> "UtilitySpec":
        if "kind" not in data:
            raise ConfigError("kind", "missing field")
        if "beta" not in data:
            raise ConfigError("beta", "missing field")
        kind = data["kind"]
        gamma = float(data.get("gamma", 0.0))
        if kind != "log" and "gamma" not in data:
            raise ConfigError("gamma", "missing field")
        spec = cls(kind, float(data["beta"]), gamma, float(r))
        if "kappa" in data and kind == "exponential" and abs(float(data["kappa"]) - spec.kappa) > 1e-15 * max(1.0, spec.kappa):
            raise ConfigError("kappa", f"must equal r*gamma = {spec.kappa}, got {data['kappa']}")
        return spec


LOG = UtilitySpec("log")

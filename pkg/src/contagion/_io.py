"""Config bundles and deterministic output writing for the command line."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import __version__
from .errors import ConfigError
from .grid import IntensityGrid
from .hawkes import HawkesParams
from .market import MarketParams
from .utility import UtilitySpec

SIM_DEFAULTS = {"x0": 1.0, "horizon": 10.0, "dt": 1.0 / 252, "scheme": "euler"}


@dataclass(frozen=True, eq=False)
class RunConfig:
    hawkes: HawkesParams
    market: MarketParams | None
    utility: UtilitySpec
    simulation: dict
    lam: np.ndarray | None

    def resolved(self) -> dict:
        out = {"hawkes": self.hawkes.to_dict(), "utility": self.utility.to_dict(), "simulation": self.simulation}
        if self.market is not None:
            out["market"] = self.market.to_dict()
        if self.lam is not None:
            out["lambda"] = self.lam.tolist()
        return out


def default_config_path() -> str:
    return str(resources.files("contagion") / "configs" / "two_asset.json")


def _section(data: dict, key: str, build):
    try:
        return build(data[key])
    except ConfigError as exc:
        raise exc.under(key) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"malformed section ({exc})") from None


def parse_config(data: dict, require_market: bool = True) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    if "hawkes" not in data:
        raise ConfigError("hawkes", "missing section")
    hawkes = _section(data, "hawkes", HawkesParams.from_dict)
    market = None
    if "market" in data:
        market = _section(data, "market", MarketParams.from_dict)
        if market.m != hawkes.m:
            raise ConfigError("market.m", f"must equal hawkes.m = {hawkes.m}, got {market.m}")
    elif require_market:
        raise ConfigError("market", "missing section")
    r = market.r if market is not None else 0.0
    utility = _section(data, "utility", lambda u: UtilitySpec.from_dict(u, r)) if "utility" in data else UtilitySpec("log", 0.05)
    sim = dict(SIM_DEFAULTS)
    for key, val in data.get("simulation", {}).items():
        if key not in SIM_DEFAULTS:
            raise ConfigError(f"simulation.{key}", "unknown field")
        sim[key] = val if key == "scheme" else float(val)
    if sim["scheme"] not in ("euler", "log"):
        raise ConfigError("simulation.scheme", f"must be 'euler' or 'log', got {sim['scheme']!r}")
    for key in ("x0", "horizon", "dt"):
        if not sim[key] > 0:
            raise ConfigError(f"simulation.{key}", f"must be > 0, got {sim[key]}")
    lam = None
    if "lambda" in data:
        lam = np.asarray(data["lambda"], dtype=float)
        if lam.shape != (hawkes.m,) or np.any(lam < 0):
            raise ConfigError("lambda", f"expected {hawkes.m} non-negative intensities")
    return RunConfig(hawkes, market, utility, sim, lam)


def load_config(path: str | None, require_market: bool = True) -> RunConfig:
    path = path or default_config_path()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(data, require_market)


def parse_floats(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ConfigError(name, f"expected comma-separated numbers, got {text!r}") from None


def parse_grid(spec: str | None, box: IntensityGrid) -> IntensityGrid:
    """``N`` (points per axis in the default box), ``N1xN2`` or ``lo:hi:N[,lo:hi:N]``."""
    if spec is None:
        return box
    try:
        if ":" in spec:
            axes = [tuple(float(v) for v in part.split(":")) for part in spec.split(",")]
            if any(len(a) != 3 for a in axes):
                raise ValueError
            return IntensityGrid([a[0] for a in axes], [a[1] for a in axes], tuple(int(a[2]) for a in axes))
        counts = tuple(int(c) for c in spec.lower().split("x"))
        if len(counts) == 1:
            counts = counts * box.m
        return IntensityGrid(box.lo, box.hi, counts)
    except ValueError as exc:
        msg = str(exc) or "expected N, N1xN2 or lo:hi:N[,lo:hi:N]"
        raise ConfigError("grid", f"{msg} (got {spec!r})") from None


class Writer:
    """Writes UTF-8 artifacts under one directory, each listed in the sidecar."""

    def __init__(self, out_dir: str, command: str, config: dict, options: dict):
        self.out_dir = out_dir
        self.command = command
        self.config = config
        self.options = options
        self.files: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def text(self, name: str, content: str):
        with open(os.path.join(self.out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(content)
        self.files.append(name)

    def json(self, name: str, obj):
        self.text(name, dumps(obj))

    def sidecar(self, results: dict | None = None):
        body = {"tool": "contagion", "version": __version__, "command": self.command,
                "config": self.config, "options": self.options, "files": sorted(self.files)}
        if results is not None:
            body["results"] = results
        self.text(f"{self.command}.meta.json", dumps(body))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"

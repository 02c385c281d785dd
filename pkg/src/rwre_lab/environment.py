"""I.i.d. random environments on Z^d with uniform ellipticity.

An EnvironmentSpec fixes the site-law family; an Environment adds a
128-bit master seed and a shift offset. The jump law at a site is a pure
function of (seed, spec, site + offset): nothing is stored, every query
is reproducible, and shifted environments agree with re-centered queries
bit for bit.

Families:
  homogeneous        one fixed law at every site
  two-point          law A with probability p, else law B, i.i.d. per site
  elliptic-dirichlet law = eta + (1 - 2d*eta) * Dirichlet(alpha), i.i.d.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincinv

from . import rng
from .lattice import Site

SPEC_SCHEMA = "rwre-lab/env/1"
FAMILIES = ("homogeneous", "two-point", "elliptic-dirichlet")

# salts separating the hash streams used inside one environment
_SALT_PICK = 0x11
_SALT_DIR0 = 0x20


@dataclass(frozen=True)
class EnvironmentSpec:
    """Distribution of one site's jump law. params is family-specific:
    homogeneous {"law"}; two-point {"law_a","law_b","p"};
    elliptic-dirichlet {"alpha"}."""

    d: int
    family: str
    eta: float
    params: dict

    def law_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for key in ("law", "law_a", "law_b"):
            if key in self.params:
                out[key] = np.asarray(self.params[key], dtype=np.float64)
        if "alpha" in self.params:
            out["alpha"] = np.asarray(self.params["alpha"], dtype=np.float64)
        return out

    def canonical(self) -> dict:
        params = {
            k: (list(map(float, v)) if isinstance(v, (list, tuple, np.ndarray)) else float(v))
            for k, v in sorted(self.params.items())
        }
        return {"dim": self.d, "family": self.family, "eta": float(self.eta), "params": params}

    def spec_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_law(name: str, law, d: int, eta: float, errors: list):
    arr = np.asarray(law, dtype=np.float64)
    if arr.shape != (2 * d,):
        errors.append(f"{name} must have length 2d = {2 * d}, got shape {arr.shape}")
        return
    if np.any(arr < 0):
        errors.append(f"{name} has negative entries")
    if abs(arr.sum() - 1.0) > 1e-9:
        errors.append(f"{name} does not sum to 1 (sum = {arr.sum()!r})")
    if arr.min() < eta - 1e-12:
        errors.append(
            f"{name} violates ellipticity: min probability {arr.min()!r} < eta {eta!r}"
        )


def validate_spec(spec: EnvironmentSpec) -> EnvironmentSpec:
    """Return the spec unchanged, or raise ValueError listing every
    violated constraint (dimension, family, ellipticity, normalization,
    parameter ranges)."""
    errors: list[str] = []
    if not isinstance(spec.d, int) or spec.d < 1:
        errors.append(f"dimension must be a positive integer, got {spec.d!r}")
        raise ValueError("; ".join(errors))
    if spec.family not in FAMILIES:
        errors.append(f"unknown family {spec.family!r} (expected one of {FAMILIES})")
    if not (0.0 < spec.eta <= 1.0 / (2 * spec.d)):
        errors.append(f"eta must lie in (0, 1/(2d)] = (0, {1.0 / (2 * spec.d)}], got {spec.eta!r}")
    p = spec.params
    if spec.family == "homogeneous":
        if "law" not in p:
            errors.append("homogeneous spec requires params['law']")
        else:
            _check_law("law", p["law"], spec.d, spec.eta, errors)
    elif spec.family == "two-point":
        for key, label in (("law_a", "law-A"), ("law_b", "law-B")):
            if key not in p:
                errors.append(f"two-point spec requires params['{key}']")
            else:
                _check_law(label, p[key], spec.d, spec.eta, errors)
        mix = p.get("p")
        if mix is None:
            errors.append("two-point spec requires params['p']")
        elif not (0.0 <= mix <= 1.0):
            errors.append(f"mixing probability p must lie in [0,1], got {mix!r}")
    elif spec.family == "elliptic-dirichlet":
        if "alpha" not in p:
            errors.append("elliptic-dirichlet spec requires params['alpha']")
        else:
            alpha = np.asarray(p["alpha"], dtype=np.float64)
            if alpha.shape != (2 * spec.d,):
                errors.append(f"alpha must have length 2d = {2 * spec.d}")
            elif np.any(alpha <= 0):
                errors.append("alpha entries must be positive")
    if errors:
        raise ValueError("; ".join(errors))
    return spec


@dataclass(frozen=True, eq=False)
class Environment:
    """A concrete environment: spec + 128-bit seed + shift offset.
    Immutable and safe for concurrent readers; the per-site cache only
    memoizes pure function values."""

    spec: EnvironmentSpec
    seed: int
    offset: Site = None  # type: ignore[assignment]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        validate_spec(self.spec)
        if not 0 <= self.seed <= rng.SEED_MAX:
            raise ValueError("environment seed must fit in 128 bits")
        if self.offset is None:
            object.__setattr__(self, "offset", (0,) * self.spec.d)
        if len(self.offset) != self.spec.d:
            raise ValueError("offset dimension mismatch")

    @property
    def d(self) -> int:
        return self.spec.d

    def shift(self, x: Site) -> "Environment":
        """Environment re-centered at x: site_law(shift(env,x), y) equals
        site_law(env, x+y) exactly."""
        return Environment(self.spec, self.seed, tuple(a + b for a, b in zip(self.offset, x)))

    def block_laws(self, lo: Site, hi: Site) -> np.ndarray:
        """Laws for the inclusive box lo..hi, shape (*box_shape, 2d)."""
        shape = tuple(h - l + 1 for l, h in zip(lo, hi))
        grids = np.meshgrid(
            *[np.arange(l + o, h + o + 1, dtype=np.int64) for l, h, o in zip(lo, hi, self.offset)],
            indexing="ij",
        )
        return self._laws_for_grids(grids, shape)

    def _laws_for_grids(self, grids: list[np.ndarray], shape: tuple) -> np.ndarray:
        d, eta = self.spec.d, self.spec.eta
        arrs = self.spec.law_arrays()
        if self.spec.family == "homogeneous":
            return np.broadcast_to(arrs["law"], shape + (2 * d,)).copy()
        seed_lo = self.seed & rng.MASK64
        seed_hi = self.seed >> 64
        if self.spec.family == "two-point":
            h = rng.hash_words_vec([seed_lo, seed_hi, _SALT_PICK, *grids])
            u = rng.uniform_from_hash(h)
            pick_a = u < self.spec.params["p"]
            out = np.where(pick_a[..., None], arrs["law_a"], arrs["law_b"])
            return np.ascontiguousarray(out)
        # elliptic-dirichlet: exact inverse-CDF gamma draws per component
        alpha = arrs["alpha"]
        g = np.empty(shape + (2 * d,), dtype=np.float64)
        for j in range(2 * d):
            h = rng.hash_words_vec([seed_lo, seed_hi, _SALT_DIR0 + j, *grids])
            u = rng.uniform_from_hash(h)
            g[..., j] = gammaincinv(alpha[j], u)
        g /= g.sum(axis=-1, keepdims=True)
        return eta + (1.0 - 2 * d * eta) * g

    def site_law(self, x: Site) -> np.ndarray:
        """Jump law at site x over the canonical 2d directions."""
        hit = self._cache.get(x)
        if hit is not None:
            return hit[0]
        lo = tuple(x)
        law = self.block_laws(lo, lo).reshape(2 * self.d)
        law.flags.writeable = False
        cum = np.cumsum(law)
        self._cache[x] = (law, cum)
        return law

    def site_cumlaw(self, x: Site) -> np.ndarray:
        """Cumulative sums of site_law(x), cached for sampling."""
        if x not in self._cache:
            self.site_law(x)
        return self._cache[x][1]

    def to_json(self) -> dict:
        c = self.spec.canonical()
        return {
            "schema": SPEC_SCHEMA,
            "dim": c["dim"],
            "family": c["family"],
            "params": c["params"],
            "eta": c["eta"],
            "seed": str(self.seed),
            "offset": list(self.offset),
        }


def environment_from_json(obj: dict) -> Environment:
    spec = EnvironmentSpec(
        d=int(obj["dim"]), family=obj["family"], eta=float(obj["eta"]), params=dict(obj["params"])
    )
    offset = tuple(obj.get("offset", (0,) * spec.d))
    return Environment(spec, int(obj["seed"]), offset)


def homogeneous_spec(d: int, law) -> EnvironmentSpec:
    law = [float(v) for v in law]
    return validate_spec(EnvironmentSpec(d, "homogeneous", min(law), {"law": law}))


def drifted_1d_spec(p: float) -> EnvironmentSpec:
    """d=1 homogeneous walk stepping +1 with probability p."""
    return homogeneous_spec(1, [p, 1.0 - p])

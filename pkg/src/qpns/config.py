"""Run configuration: one table of defaults, JSON parsing and a stable hash.

======================  ===========================================================
key                     meaning (default)
======================  ===========================================================
d                       number of frequencies (1)
L_max, J_max            time and space truncation (6, 4)
eps                     nonlinearity size (1e-3)
a_exp                   exponent a in gamma = eps^(a/2) (0.5)
tau, gamma              non-resonance constants (max(d, 2) + 1 and eps^(a/2))
omega, zeta             parameter point (d = 1: 1.0966; 0.8294, 1.4366)
forcing                 list of [l, j, amp] cosine modes
nu                      viscosity for single solves (1e-3)
nu_grid                 viscosities for the sweep (logspace(-1, -4, 7))
s0                      Sobolev index of all reported norms (floor((d + 2) / 2) + 2)
M                       smoothing steps plus one ([4 tau] + 1)
N0, chi, n_max, kam_tol KAM schedule (2, 1.5, 12, 1e-12)
newton_tol, newton_max  Euler Newton stopping (1e-13 relative to eps |F|, 20)
fixpoint_tol, ..._max   Picard stopping relative to nu (1e-14, 100)
refine                  residual correction in the pipeline solves (true)
gamma_list              thresholds for the measure estimate (0.05, 0.1, 0.2)
n_samples, box          Monte-Carlo sample size and parameter box (4000, [0.5, 1.5]^(d+2))
seed, threads           RNG seed and worker threads (0, 1)
======================  ===========================================================
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .fourier import Lattice, ParameterPoint
from .functional import ForcingSpec
from .kam import KamSchedule
from .measure import GoodSetPredicate, default_box, default_tau_gamma


class ConfigError(ValueError):
    pass


def default_parameter(d: int, L: int = 6, J: int = 4) -> ParameterPoint:
    """A fixed parameter point passing the Diophantine and Melnikov scans with margin.

    For d = 1 the point was picked by a seeded search over [0.5, 1.5]^3; other
    d repeat that search on the fly.
    """
    if d == 1:
        return ParameterPoint((1.0966,), (0.8294, 1.4366))
    pred = GoodSetPredicate(Lattice(d, L, J), float(max(d, 2) + 1))
    rng = np.random.default_rng(12345 + d)
    best, best_level = None, -1.0
    for _ in range(200):
        lam = ParameterPoint.from_array(np.round(0.5 + rng.random(d + 2), 4), d)
        level = pred.excluded_level(lam)
        if level > best_level:
            best, best_level = lam, level
    return best


def _default_forcing():
    return ForcingSpec().to_list()


@dataclass
class SolverConfig:
    d: int = 1
    L_max: int = 6
    J_max: int = 4
    eps: float = 1e-3
    a_exp: float = 0.5
    tau: float | None = None
    gamma: float | None = None
    omega: list | None = None
    zeta: list | None = None
    forcing: list = field(default_factory=_default_forcing)
    nu: float = 1e-3
    nu_grid: list = field(default_factory=lambda: [float(x) for x in np.logspace(-1, -4, 7)])
    s0: float | None = None
    M: int | None = None
    N0: float = 2.0
    chi: float = 1.5
    n_max: int = 12
    kam_tol: float = 1e-12
    newton_tol: float = 1e-13
    newton_max: int = 20
    fixpoint_tol: float = 1e-14
    fixpoint_max: int = 100
    refine: bool = True
    gamma_list: list = field(default_factory=lambda: [0.05, 0.1, 0.2])
    n_samples: int = 4000
    box: list | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.d < 1 or self.L_max < 1 or self.J_max < 2:
            raise ConfigError("need d >= 1, L_max >= 1, J_max >= 2")
        if self.eps < 0:
            raise ConfigError("eps must be nonnegative")
        if (self.omega is None) != (self.zeta is None):
            raise ConfigError("give both omega and zeta or neither")
        if self.omega is not None and (len(self.omega) != self.d or len(self.zeta) != 2):
            raise ConfigError("omega needs d entries and zeta two")
        s_min = float((self.d + 2) // 2 + 2)
        if self.s0 is None:
            self.s0 = s_min
        elif self.s0 < s_min:
            raise ConfigError(f"s0 must be at least {s_min:g} for d = {self.d}")

    # derived values ---------------------------------------------------------------
    @property
    def lattice(self) -> Lattice:
        return Lattice(self.d, self.L_max, self.J_max)

    @property
    def lam(self) -> ParameterPoint:
        if self.omega is None:
            return default_parameter(self.d, self.L_max, self.J_max)
        return ParameterPoint(tuple(self.omega), tuple(self.zeta))

    @property
    def tau_value(self) -> float:
        return self.tau if self.tau is not None else default_tau_gamma(self.d, self.eps, self.a_exp)[0]

    @property
    def gamma_value(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return default_tau_gamma(self.d, self.eps, self.a_exp)[1] if self.eps > 0 else 1.0

    @property
    def schedule(self) -> KamSchedule:
        return KamSchedule(self.tau_value, self.N0, self.chi, self.n_max, self.kam_tol, self.s0,
                           self.M)

    @property
    def M_value(self) -> int:
        return self.schedule.M

    @property
    def box_value(self) -> list:
        return [tuple(b) for b in self.box] if self.box is not None else default_box(self.d)

    def forcing_field(self):
        return ForcingSpec.from_list(self.forcing).build(self.lattice)

    # serialization ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def replace(self, **kw) -> "SolverConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, obj: dict) -> "SolverConfig":
        if not isinstance(obj, dict):
            raise ConfigError("configuration must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text: str) -> "SolverConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
        return cls.from_dict(obj)

    @classmethod
    def load(cls, path) -> "SolverConfig":
        with open(path) as f:
            return cls.from_json(f.read())

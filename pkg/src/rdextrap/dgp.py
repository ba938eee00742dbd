"""Monte Carlo data generating process.

Each replication draws district amenities and construction productivity
once.  Each referendum then draws the districts' pre-vote spending, picks one
district at random, draws the proposed log spending change, and records the
vote together with both potential equilibria (the approved state is solved
even when the measure fails, so oracle checks have both arms).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import pandas as pd

from .equilibrium import SolverConfig, solve_batch
from .model import Economy, EquilibriumState, HouseholdType
from .voting import margins_from_deltas, vote_deltas

TRUE_TYPES = (
    HouseholdType(alpha=0.55, gamma=0.35, y=0.45, sigma=0.25, theta=1.0, mu0=-3.0, mu1=-1.0, sigma0=3.0),
    HouseholdType(alpha=0.20, gamma=0.30, y=0.55, sigma=0.25, theta=1.0, mu0=-5.0, mu1=-1.0, sigma0=3.0),
    HouseholdType(alpha=0.15, gamma=0.25, y=0.55, sigma=0.25, theta=1.0, mu0=-7.0, mu1=0.0, sigma0=3.0),
    HouseholdType(alpha=0.10, gamma=0.20, y=0.45, sigma=0.25, theta=1.0, mu0=-3.0, mu1=0.0, sigma0=3.0),
)

RDD_BOUNDS = (0.095, 0.105)
TURNOUT_BOUNDS = (0.01, 0.40)


@dataclass(frozen=True)
class DgpConfig:
    n_jurisdictions: int = 10
    types: tuple = TRUE_TYPES
    amenity_mean: float = 0.0
    amenity_sd: float = 0.1
    productivity_mean: float = -1.2
    productivity_sd: float = 0.05
    dlogG_low: float = RDD_BOUNDS[0]
    dlogG_high: float = RDD_BOUNDS[1]
    n_referenda: int = 2000
    n_replications: int = 100
    seed: int = 0
    eta: float = 0.6
    lam: float = 0.0
    chi: float = 1.0
    spending_log_mean: float = math.log(0.0125)
    spending_log_sd: float = 0.05
    population_scale: float = 10_000.0
    anticipation: str = "myopic"

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(
            t if isinstance(t, HouseholdType) else HouseholdType(**t) for t in self.types))
        if self.n_jurisdictions < 1 or self.n_referenda < 1 or self.n_replications < 1:
            raise ValueError("counts must be positive")
        if not 0 < self.dlogG_low <= self.dlogG_high:
            raise ValueError("dlogG bounds must satisfy 0 < low <= high")
        if self.amenity_sd < 0 or self.productivity_sd < 0 or self.spending_log_sd < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.population_scale <= 0:
            raise ValueError("population_scale must be positive")

    def replace(self, **changes) -> "DgpConfig":
        return dataclasses.replace(self, **changes)

    def for_turnout(self) -> "DgpConfig":
        return self.replace(dlogG_low=TURNOUT_BOUNDS[0], dlogG_high=TURNOUT_BOUNDS[1])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["types"] = [dataclasses.asdict(t) for t in self.types]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        return cls(**d)


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def draw_economy(config: DgpConfig, seed=None, replication: int = 0) -> Economy:
    """Draw amenities and productivity shocks for one replication."""
    seed = config.seed if seed is None else seed
    rng = _stream(seed, replication, 0)
    J = config.n_jurisdictions
    A = rng.normal(config.amenity_mean, config.amenity_sd, J)
    B = rng.normal(config.productivity_mean, config.productivity_sd, J)
    G = np.full(J, math.exp(config.spending_log_mean))
    return Economy.from_arrays(A, B, G, config.types, eta=config.eta, lam=config.lam, chi=config.chi)


@dataclass
class ReferendumRecord:
    replication: int
    referendum: int
    district: int
    dlogG: float
    margin: float
    approved: bool
    pre: dict
    post: dict
    treated: dict
    voters: np.ndarray
    population: np.ndarray


_SNAPSHOT = ("P", "H", "tau", "G")


@dataclass
class ReferendumDataset:
    """Columnar store of simulated referenda."""

    replication: np.ndarray
    referendum: np.ndarray
    district: np.ndarray
    dlogG: np.ndarray
    margin: np.ndarray
    approved: np.ndarray
    turnout: np.ndarray
    approval: np.ndarray
    pre: EquilibriumState
    treated: EquilibriumState
    voters: np.ndarray
    population: np.ndarray
    sigma: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.margin)

    @property
    def n_types(self):
        return self.pre.Nk.shape[1]

    @property
    def n_jurisdictions(self):
        return self.pre.P.shape[1]

    @property
    def post(self) -> EquilibriumState:
        D = self.approved
        pick = lambda a, b: np.where(D.reshape((-1,) + (1,) * (a.ndim - 1)), b, a)
        return EquilibriumState(
            Nk=pick(self.pre.Nk, self.treated.Nk), P=pick(self.pre.P, self.treated.P),
            tau=pick(self.pre.tau, self.treated.tau), H=pick(self.pre.H, self.treated.H),
            G=pick(self.pre.G, self.treated.G))

    def subset(self, mask) -> "ReferendumDataset":
        idx = np.flatnonzero(np.asarray(mask)) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return ReferendumDataset(
            replication=self.replication[idx], referendum=self.referendum[idx],
            district=self.district[idx], dlogG=self.dlogG[idx], margin=self.margin[idx],
            approved=self.approved[idx], turnout=self.turnout[idx], approval=self.approval[idx],
            pre=self.pre[idx], treated=self.treated[idx], voters=self.voters[idx],
            population=self.population[idx], sigma=self.sigma, y=self.y, meta=dict(self.meta))

    def records(self) -> list:
        post = self.post
        out = []
        for i in range(len(self)):
            snap = lambda st: {**{k: np.asarray(getattr(st, k))[i].copy() for k in _SNAPSHOT},
                               "Nk": st.Nk[i].copy()}
            out.append(ReferendumRecord(
                replication=int(self.replication[i]), referendum=int(self.referendum[i]),
                district=int(self.district[i]), dlogG=float(self.dlogG[i]), margin=float(self.margin[i]),
                approved=bool(self.approved[i]), pre=snap(self.pre), post=snap(post),
                treated=snap(self.treated), voters=self.voters[i].copy(),
                population=self.population[i].copy()))
        return out

    # -- serialization ---------------------------------------------------

    def to_frame(self) -> pd.DataFrame:
        K, J = self.n_types, self.n_jurisdictions
        cols = {
            "replication": self.replication, "referendum": self.referendum,
            "district": self.district, "dlogG": self.dlogG, "margin": self.margin,
            "approved": self.approved.astype(int),
        }
        for k in range(K):
            cols[f"turnout_{k}"] = self.turnout[:, k]
            cols[f"approval_{k}"] = self.approval[:, k]
            cols[f"voters_{k}"] = self.voters[:, k]
            cols[f"population_{k}"] = self.population[:, k]
        for tag, st in (("pre", self.pre), ("treated", self.treated)):
            for name in _SNAPSHOT:
                arr = getattr(st, name)
                for j in range(J):
                    cols[f"{tag}_{name}_{j}"] = arr[:, j]
            for k in range(K):
                for j in range(J):
                    cols[f"{tag}_N_{k}_{j}"] = st.Nk[:, k, j]
        return pd.DataFrame(cols)

    def to_csv(self, path, sidecar: dict | None = None):
        frame = self.to_frame()
        frame.to_csv(path, index=False, float_format="%.17g")
        meta = {**self.meta, "sigma": self.sigma.tolist(), "y": self.y.tolist(), **(sidecar or {})}
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, sigma, y, meta=None) -> "ReferendumDataset":
        K = sum(1 for c in frame.columns if c.startswith("turnout_"))
        J = sum(1 for c in frame.columns if c.startswith("pre_P_"))

        def state(tag):
            arrs = {name: frame[[f"{tag}_{name}_{j}" for j in range(J)]].to_numpy(float)
                    for name in _SNAPSHOT}
            Nk = np.stack([frame[[f"{tag}_N_{k}_{j}" for j in range(J)]].to_numpy(float)
                           for k in range(K)], axis=1)
            return EquilibriumState(Nk=Nk, **arrs)

        per_type = lambda stem, dtype=float: frame[[f"{stem}_{k}" for k in range(K)]].to_numpy(dtype)
        return cls(
            replication=frame["replication"].to_numpy(int), referendum=frame["referendum"].to_numpy(int),
            district=frame["district"].to_numpy(int), dlogG=frame["dlogG"].to_numpy(float),
            margin=frame["margin"].to_numpy(float), approved=frame["approved"].to_numpy(int) > 0,
            turnout=per_type("turnout"), approval=per_type("approval"),
            pre=state("pre"), treated=state("treated"),
            voters=per_type("voters", np.int64), population=per_type("population", np.int64),
            sigma=np.asarray(sigma, float), y=np.asarray(y, float), meta=dict(meta or {}))

    @classmethod
    def from_csv(cls, path) -> "ReferendumDataset":
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        frame = pd.read_csv(path, float_precision="round_trip")
        return cls.from_frame(frame, meta["sigma"], meta["y"], meta)


def concat_datasets(datasets: Iterable[ReferendumDataset]) -> ReferendumDataset:
    ds = list(datasets)
    cat = lambda name: np.concatenate([getattr(d, name) for d in ds])

    def cat_state(tag):
        sts = [getattr(d, tag) for d in ds]
        return EquilibriumState(**{k: np.concatenate([getattr(s, k) for s in sts])
                                   for k in ("Nk", "P", "tau", "H", "G")})

    return ReferendumDataset(
        replication=cat("replication"), referendum=cat("referendum"), district=cat("district"),
        dlogG=cat("dlogG"), margin=cat("margin"), approved=cat("approved"), turnout=cat("turnout"),
        approval=cat("approval"), pre=cat_state("pre"), treated=cat_state("treated"),
        voters=cat("voters"), population=cat("population"), sigma=ds[0].sigma, y=ds[0].y,
        meta=dict(ds[0].meta))


def simulate_dataset(config: DgpConfig, seed=None, replication: int = 0,
                     solver: SolverConfig | None = None, economy: Economy | None = None,
                     chunk: int = 5000) -> ReferendumDataset:
    """Simulate ``config.n_referenda`` referenda for one replication.

    Referenda whose equilibria fail to converge are dropped; the count is
    stored in ``meta['n_dropped']``.
    """
    seed = config.seed if seed is None else seed
    economy = economy or draw_economy(config, seed, replication)
    J, K = config.n_jurisdictions, len(config.types)
    R = config.n_referenda
    rngs = [_stream(seed, replication, r + 1) for r in range(R)]
    G = np.empty((R, J))
    district = np.empty(R, dtype=int)
    dlogG = np.empty(R)
    for r, rng in enumerate(rngs):
        G[r] = np.exp(config.spending_log_mean + config.spending_log_sd * rng.standard_normal(J))
        district[r] = rng.integers(J)
        dlogG[r] = rng.uniform(config.dlogG_low, config.dlogG_high)

    rows = np.arange(R)
    G1 = G.copy()
    G1[rows, district] *= np.exp(dlogG)
    states0, states1, oks = [], [], []
    for lo in range(0, R, chunk):
        sl = slice(lo, min(R, lo + chunk))
        s0, ok0 = solve_batch(economy, G[sl], solver)
        s1, ok1 = solve_batch(economy, G1[sl], solver, warm_start=s0)
        states0.append(s0)
        states1.append(s1)
        oks.append(ok0 & ok1)
    cat = lambda sts, k: np.concatenate([getattr(s, k) for s in sts])
    pre = EquilibriumState(**{k: cat(states0, k) for k in ("Nk", "P", "tau", "H", "G")})
    treated = EquilibriumState(**{k: cat(states1, k) for k in ("Nk", "P", "tau", "H", "G")})
    ok = np.concatenate(oks)

    dv = vote_deltas(economy, pre, district, dlogG, mode=config.anticipation, config=solver)
    Nk_j = pre.Nk[rows, :, district]
    S, T, W = margins_from_deltas(Nk_j, dv, dlogG, economy.mu0, economy.mu1, economy.sigma0,
                                  strict=False)
    ok &= np.isfinite(S)
    population = np.rint(Nk_j * config.population_scale).astype(np.int64)
    voters = np.zeros((R, K), dtype=np.int64)
    for r, rng in enumerate(rngs):
        if ok[r]:
            voters[r] = rng.binomial(population[r], np.clip(T[r], 0.0, 1.0))

    ds = ReferendumDataset(
        replication=np.full(R, replication), referendum=rows.copy(), district=district,
        dlogG=dlogG, margin=S, approved=S > 0, turnout=T, approval=W, pre=pre, treated=treated,
        voters=voters, population=population, sigma=economy.sigma.copy(), y=economy.y.copy(),
        meta={"seed": int(seed), "replication": int(replication), "n_dropped": int((~ok).sum()),
              "A_bar": economy.A_bar.tolist(), "B": economy.B.tolist(),
              "solver_start": "pre: N[k, j] = sigma_k / (J + 1); treated: pre-vote equilibrium"})
    return ds if ok.all() else ds.subset(ok)

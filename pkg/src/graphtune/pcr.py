"""Configuration recommendation: a TD3 agent searching the grid against a performance predictor.

The environment is the predictor (normally the QPP model) plus bookkeeping of
the last and the best config seen so far. The agent never sees dataset
features or the target itself, only the state built from recalls, ADCN and
their deltas.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .collector import K, PerfRecord, StopRule, batch_recall
from .dataio import NeighborTable, VectorSet
from .densenet import Adam, DenseNet, TrainingDiverged, mse_loss_and_grad
from .features import DatasetFeatures
from .hnsw import HnswIndex, IndexParams, build_index
from .space import DEFAULT_TARGETS, ConfigSpace, ParamConfig, config_to_unit, nearest_in_log

log = logging.getLogger(__name__)

STATE_DIM = 12
ACTION_DIM = 3
TRACE_HEADER = ["step", "efC", "M", "efS", "pred_recall", "pred_adcn", "reward", "is_best"]


class InfeasibleTargetError(RuntimeError):
    """The target recall cannot be met; ``config`` is the best effort."""

    def __init__(self, message: str, config: ParamConfig, recall: float):
        super().__init__(message)
        self.config = config
        self.recall = recall


# --------------------------------------------------------------------------
# state and reward


@dataclass(frozen=True)
class AgentState:
    theta_l: tuple[float, float, float]
    theta_b: tuple[float, float, float]
    rec_l: float
    adcn_l: float
    d_rec_lt: float
    d_rec_bt: float
    d_rec_lb: float
    d_adcn_lb: float

    def to_vector(self) -> np.ndarray:
        return np.array(
            [*self.theta_l, *self.theta_b, self.rec_l, self.adcn_l,
             self.d_rec_lt, self.d_rec_bt, self.d_rec_lb, self.d_adcn_lb]
        )


def compute_deltas(rec_l: float, rec_b: float, rec_t: float, adcn_l: float, adcn_b: float):
    """``(d_rec_lt, d_rec_bt, d_rec_lb, d_adcn_lb)``; the ADCN delta is relative to ``adcn_b``."""
    if adcn_b == 0:
        raise ZeroDivisionError("adcn_b must be non-zero")
    return (rec_l - rec_t, rec_b - rec_t, rec_l - rec_b, (adcn_b - adcn_l) / adcn_b)


def reward_condition(d_rec_lt: float, d_rec_bt: float, d_adcn_lb: float) -> int:
    """Which of the five reward branches (1..5) applies."""
    if d_rec_bt < 0:
        return 1 if d_rec_lt < 0 else 2
    if d_rec_lt < 0:
        return 3
    return 4 if d_adcn_lb >= 0 else 5


def compute_reward(d_rec_lt: float, d_rec_bt: float, d_rec_lb: float, d_adcn_lb: float) -> float:
    """Five-branch reward. ``1 - (1 - x)^2`` is evaluated as ``x (2 - x)`` (and ``(1 + x)^2 - 1``
    as ``x (2 + x)``) so tiny deltas keep their sign instead of cancelling to 0."""
    cond = reward_condition(d_rec_lt, d_rec_bt, d_adcn_lb)
    if cond == 1:
        return d_rec_lt * (2.0 - d_rec_lt)
    if cond == 2:
        return (1.0 + d_rec_lt) ** 2 * (1.0 + d_rec_lb)
    if cond == 3:
        return -((1.0 - d_rec_lt) ** 2) * (1.0 - d_rec_lb)
    if cond == 4:
        return d_adcn_lb * (2.0 + d_adcn_lb)
    return d_adcn_lb * (2.0 - d_adcn_lb)


# --------------------------------------------------------------------------
# actions


def _axes(space: ConfigSpace):
    return (space.efc_grid, space.m_grid, space.efs_grid)


def action_to_config(action, space: ConfigSpace) -> ParamConfig:
    """Affine map of each clamped component onto the log of its axis range, then snap to the grid."""
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1), -1.0, 1.0)
    if a.size != ACTION_DIM:
        raise ValueError(f"action must have {ACTION_DIM} components")
    vals = []
    for x, grid in zip(a, _axes(space)):
        lo, hi = math.log(grid[0]), math.log(grid[-1])
        vals.append(nearest_in_log(grid, math.exp(lo + (x + 1.0) * 0.5 * (hi - lo))))
    return ParamConfig(*vals)


def config_to_action(cfg: ParamConfig, space: ConfigSpace) -> np.ndarray:
    """Pre-image of ``cfg`` under :func:`action_to_config`."""
    out = []
    for v, grid in zip(cfg.as_tuple(), _axes(space)):
        lo, hi = math.log(grid[0]), math.log(grid[-1])
        out.append(0.0 if hi == lo else 2.0 * (math.log(v) - lo) / (hi - lo) - 1.0)
    return np.array(out)


# --------------------------------------------------------------------------
# environment


class Predictor(Protocol):
    def predict(self, config: ParamConfig, feats: DatasetFeatures | None) -> tuple[float, float]: ...

    def normalize_adcn(self, adcn: float) -> float: ...


@dataclass
class StepInfo:
    config: ParamConfig
    recall: float
    adcn: float
    condition: int
    is_best: bool
    feasible: bool


class TuningEnv:
    """Predictor-backed environment for one (dataset, target recall) pair.

    The best config is the visited config with predicted recall >= target and
    the lowest predicted ADCN, or while none is feasible the one with the
    highest predicted recall. The reward compares the new config against the
    best *before* this step; the returned state is built against the best
    *after* it.
    """

    def __init__(self, predictor: Predictor, feats: DatasetFeatures | None, target: float,
                 space: ConfigSpace, max_steps: int = 50):
        if not 0.0 < target < 1.0:
            raise ValueError(f"target recall {target} outside (0, 1)")
        if max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        self.predictor = predictor
        self.feats = feats
        self.target = float(target)
        self.space = space
        self.max_steps = max_steps
        self._cache: dict[ParamConfig, tuple[float, float]] = {}
        self.reset()

    def evaluate(self, cfg: ParamConfig) -> tuple[float, float]:
        hit = self._cache.get(cfg)
        if hit is None:
            rec, adcn = self.predictor.predict(cfg, self.feats)
            hit = (float(rec), float(adcn))
            self._cache[cfg] = hit
        return hit

    def _better(self, rec: float, adcn: float) -> bool:
        b_ok = self.rec_b >= self.target
        ok = rec >= self.target
        if ok and not b_ok:
            return True
        if ok and b_ok:
            return adcn < self.adcn_b
        if not ok and not b_ok:
            return rec > self.rec_b
        return False

    def _state(self) -> AgentState:
        d = compute_deltas(self.rec_l, self.rec_b, self.target, self.adcn_l, self.adcn_b)
        return AgentState(
            tuple(config_to_unit(self.theta_l)),
            tuple(config_to_unit(self.theta_b)),
            self.rec_l,
            self.predictor.normalize_adcn(self.adcn_l),
            *d,
        )

    def reset(self) -> AgentState:
        cfg = self.space.min_config()
        rec, adcn = self.evaluate(cfg)
        self.theta_l = self.theta_b = cfg
        self.rec_l = self.rec_b = rec
        self.adcn_l = self.adcn_b = adcn
        self.steps = 0
        return self._state()

    @property
    def best(self) -> tuple[ParamConfig, float, float]:
        return self.theta_b, self.rec_b, self.adcn_b

    def step(self, action) -> tuple[AgentState, float, bool, StepInfo]:
        cfg = action_to_config(action, self.space)
        rec, adcn = self.evaluate(cfg)
        deltas = compute_deltas(rec, self.rec_b, self.target, adcn, self.adcn_b)
        reward = compute_reward(*deltas)
        cond = reward_condition(deltas[0], deltas[1], deltas[3])
        self.theta_l, self.rec_l, self.adcn_l = cfg, rec, adcn
        is_best = self._better(rec, adcn)
        if is_best:
            self.theta_b, self.rec_b, self.adcn_b = cfg, rec, adcn
        self.steps += 1
        info = StepInfo(cfg, rec, adcn, cond, is_best, rec >= self.target)
        return self._state(), reward, self.steps >= self.max_steps, info


# --------------------------------------------------------------------------
# surrogate performance family (testing and benchmarks only)

COEFF_RANGES = {
    "a": (1.0, 3.0),
    "b": (0.3, 0.6),
    "c": (0.05, 0.15),
    "d": (0.02, 0.08),
    "e": (1.0, 3.0),
    "f": (0.2, 0.6),
}
SURROGATE_LOG_ADCN = (0.5, 5.5)


@dataclass(frozen=True)
class SurrogateCoeffs:
    """recall = clamp(1 - a exp(-b ln(efS) (1 + c ln M + d ln efC)), 0, 1); ADCN = e efS (1 + f ln M)."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    @classmethod
    def draw(cls, seed: int, shift: float = 0.0) -> "SurrogateCoeffs":
        """Uniform draw from the ranges, each moved by ``shift`` times its width."""
        rng = np.random.default_rng(seed)
        vals = {}
        for name, (lo, hi) in COEFF_RANGES.items():
            w = hi - lo
            vals[name] = float(rng.uniform(lo, hi) + shift * w)
        return cls(**vals)

    def recall_arrays(self, efc, m, efs):
        efc, m, efs = (np.asarray(v, dtype=np.float64) for v in (efc, m, efs))
        z = self.b * np.log(efs) * (1.0 + self.c * np.log(m) + self.d * np.log(efc))
        return np.clip(1.0 - self.a * np.exp(-z), 0.0, 1.0)

    def adcn_arrays(self, m, efs):
        return self.e * np.asarray(efs, dtype=np.float64) * (1.0 + self.f * np.log(np.asarray(m, dtype=np.float64)))

    def recall(self, cfg: ParamConfig) -> float:
        return float(self.recall_arrays(cfg.efC, cfg.M, cfg.efS))

    def adcn(self, cfg: ParamConfig) -> float:
        return float(self.adcn_arrays(cfg.M, cfg.efS))

    def features(self) -> DatasetFeatures:
        """A feature vector that encodes the coefficients, so a predictor can tell datasets apart."""
        u = {k: (getattr(self, k) - lo) / (hi - lo) for k, (lo, hi) in COEFF_RANGES.items()}
        return DatasetFeatures(
            c_b=5000,
            c_d=200,
            d=int(round(16 + 48 * u["b"])),
            lid=4.0 + 20.0 * u["a"],
            ds_min=1.0 + u["c"],
            ds_mean=2.0 + 2.0 * u["c"] + u["d"],
            ds_max=4.0 + 3.0 * u["d"],
            ds_std=0.2 + 0.3 * u["e"],
            dr_min=0.2 + 0.2 * u["f"],
            dr_mean=0.4 + 0.2 * u["e"] + 0.1 * u["f"],
            dr_max=0.7 + 0.2 * u["b"],
            dr_std=0.05 + 0.05 * u["a"],
        )


class SurrogatePredictor:
    """Exact surrogate performance; satisfies :class:`Predictor`."""

    def __init__(self, coeffs: SurrogateCoeffs):
        self.coeffs = coeffs

    def predict(self, config: ParamConfig, feats: DatasetFeatures | None = None) -> tuple[float, float]:
        return self.coeffs.recall(config), self.coeffs.adcn(config)

    def normalize_adcn(self, adcn: float) -> float:
        lo, hi = SURROGATE_LOG_ADCN
        return (math.log10(adcn) - lo) / (hi - lo)


def surrogate_records(coeffs: SurrogateCoeffs, cparams: tuple[int, int], efs_grid: Sequence[int], stop=None):
    """Sweep records for one construction config as the collector would produce them."""
    stop = stop or StopRule().for_grid(efs_grid)
    efc, m = cparams
    out = []
    for efs in efs_grid:
        cfg = ParamConfig(efc, m, efs)
        rec, adcn = coeffs.recall(cfg), coeffs.adcn(cfg)
        out.append(PerfRecord(cfg, rec, adcn, 1e6 / adcn))
        if stop.reached(efs, rec):
            break
    return out


def grid_optimum(coeffs: SurrogateCoeffs, target: float, space: ConfigSpace):
    """Exhaustive scan: ``(config, adcn)`` with recall >= target and minimal ADCN, or ``None``."""
    E, Mg, S = np.meshgrid(space.efc_grid, space.m_grid, space.efs_grid, indexing="ij")
    rec = coeffs.recall_arrays(E, Mg, S)
    cost = np.where(rec >= target, coeffs.adcn_arrays(Mg, S), np.inf)
    i = int(np.argmin(cost))
    if not np.isfinite(cost.flat[i]):
        return None
    return ParamConfig(int(E.flat[i]), int(Mg.flat[i]), int(S.flat[i])), float(cost.flat[i])


# --------------------------------------------------------------------------
# TD3


@dataclass
class TD3Config:
    hidden: tuple[int, int, int] = (128, 128, 64)
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    # short horizon: the best-config rule already carries progress forward
    gamma: float = 0.5
    tau: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    explore_sigma: float = 0.1
    batch_size: int = 256
    buffer_size: int = 1_000_000
    episode_steps: int = 50
    warmup_steps: int = 1000
    reward_clip: float = 3.0
    state_clip: float = 1.0


class ReplayBuffer:
    """Ring buffer whose storage doubles until ``capacity``."""

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, action_dim: int = ACTION_DIM):
        self.capacity = capacity
        self._alloc = min(capacity, 1024)
        self.s = np.zeros((self._alloc, state_dim), np.float32)
        self.a = np.zeros((self._alloc, action_dim), np.float32)
        self.r = np.zeros(self._alloc, np.float32)
        self.s2 = np.zeros((self._alloc, state_dim), np.float32)
        self.size = 0
        self.pos = 0

    def __len__(self) -> int:
        return self.size

    def _grow(self):
        new = min(self.capacity, self._alloc * 2)
        for name in ("s", "a", "r", "s2"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], old.dtype)
            arr[: self._alloc] = old
            setattr(self, name, arr)
        self._alloc = new

    def add(self, s, a, r, s2) -> None:
        if self.size == self._alloc and self._alloc < self.capacity:
            self._grow()
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s2[i] = s, a, r, s2
        self.pos = (self.pos + 1) % self._alloc
        self.size = min(self.size + 1, self._alloc)

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, self.size, size=n)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]


def _soft_update(target: DenseNet, source: DenseNet, tau: float) -> None:
    for t, s in zip(target.params(), source.params()):
        t *= 1.0 - tau
        t += tau * s


class TD3Agent:
    def __init__(self, cfg: TD3Config = TD3Config(), seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        h = cfg.hidden
        self.actor = DenseNet((STATE_DIM, *h, ACTION_DIM), "tanh", seed=seed)
        self.critic1 = DenseNet((STATE_DIM + ACTION_DIM, *h, 1), "identity", seed=seed + 1)
        self.critic2 = DenseNet((STATE_DIM + ACTION_DIM, *h, 1), "identity", seed=seed + 2)
        self._targets_from_online()
        self._reset_training_state(seed)

    def _targets_from_online(self):
        self.actor_t = self.actor.copy()
        self.critic1_t = self.critic1.copy()
        self.critic2_t = self.critic2.copy()

    def _reset_training_state(self, seed: int):
        c = self.cfg
        self.actor_opt = Adam(self.actor.params(), c.actor_lr)
        self.critic_opt = Adam(self.critic1.params() + self.critic2.params(), c.critic_lr)
        self.buffer = ReplayBuffer(c.buffer_size)
        self.rng = np.random.default_rng(seed + 3)
        self.updates = 0

    def fork(self, seed: int) -> "TD3Agent":
        """A private copy of the weights with fresh optimizer state and an empty buffer."""
        other = TD3Agent.__new__(TD3Agent)
        other.cfg = self.cfg
        other.seed = seed
        for name in ("actor", "critic1", "critic2", "actor_t", "critic1_t", "critic2_t"):
            setattr(other, name, getattr(self, name).copy())
        other._reset_training_state(seed)
        return other

    def _prep(self, states) -> np.ndarray:
        c = self.cfg.state_clip
        return np.clip(np.atleast_2d(states), -c, c).astype(np.float32)

    def act(self, state, sigma: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
        s = state.to_vector() if isinstance(state, AgentState) else state
        a = self.actor.forward_batch(self._prep(s))[0].astype(np.float64)
        if sigma > 0:
            a = a + (rng or self.rng).normal(0.0, sigma, size=a.shape)
        return np.clip(a, -1.0, 1.0)

    def remember(self, s: AgentState, a, r: float, s2: AgentState) -> None:
        c = self.cfg.reward_clip
        self.buffer.add(self._prep(s.to_vector())[0], a, float(np.clip(r, -c, c)), self._prep(s2.to_vector())[0])

    def update(self) -> tuple[float, float | None]:
        c = self.cfg
        n = min(c.batch_size, len(self.buffer))
        s, a, r, s2 = self.buffer.sample(self.rng, n)
        noise = np.clip(self.rng.normal(0.0, c.target_noise, size=a.shape), -c.noise_clip, c.noise_clip)
        a2 = np.clip(self.actor_t.forward_batch(s2) + noise.astype(np.float32), -1.0, 1.0)
        sa2 = np.hstack([s2, a2])
        q_next = np.minimum(self.critic1_t.forward_batch(sa2), self.critic2_t.forward_batch(sa2))[:, 0]
        y = (r + c.gamma * q_next).reshape(-1, 1).astype(np.float32)
        sa = np.hstack([s, a])
        grads = []
        loss = 0.0
        for critic in (self.critic1, self.critic2):
            q, cache = critic.forward_batch(sa, keep_cache=True)
            l, g = mse_loss_and_grad(q, y)
            loss += l
            gw, gb, _ = critic.backward(cache, g)
            grads.append(gw + gb)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"critic loss became {loss} after {self.updates} updates")
        self.critic_opt.step(grads[0] + grads[1])
        self.updates += 1
        actor_loss = None
        if self.updates % c.policy_delay == 0:
            pa, acache = self.actor.forward_batch(s, keep_cache=True)
            q, qcache = self.critic1.forward_batch(np.hstack([s, pa]), keep_cache=True)
            actor_loss = -float(q.mean())
            _, _, gin = self.critic1.backward(qcache, np.full_like(q, -1.0 / n))
            gw, gb, _ = self.actor.backward(acache, gin[:, STATE_DIM:])
            self.actor_opt.step(gw + gb)
            _soft_update(self.actor_t, self.actor, c.tau)
            _soft_update(self.critic1_t, self.critic1, c.tau)
            _soft_update(self.critic2_t, self.critic2, c.tau)
        return loss, actor_loss

    # checkpoints: three online nets, their targets, and a JSON sidecar

    _NETS = ("actor", "critic1", "critic2", "actor_t", "critic1_t", "critic2_t")

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in self._NETS:
            getattr(self, name).save(d / f"{name}.gtnet")
        meta = {"version": 1, "seed": self.seed, "updates": self.updates, "config": asdict(self.cfg)}
        (d / "agent.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "TD3Agent":
        d = Path(directory)
        meta = json.loads((d / "agent.json").read_text())
        raw = meta["config"]
        raw["hidden"] = tuple(raw["hidden"])
        agent = cls(TD3Config(**raw), seed=meta["seed"])
        h = agent.cfg.hidden
        dims = {
            "actor": (STATE_DIM, *h, ACTION_DIM),
            "critic1": (STATE_DIM + ACTION_DIM, *h, 1),
            "critic2": (STATE_DIM + ACTION_DIM, *h, 1),
        }
        for name in cls._NETS:
            setattr(agent, name, DenseNet.load(d / f"{name}.gtnet", expect_dims=dims[name.removesuffix("_t")]))
        agent._reset_training_state(meta["seed"])
        agent.updates = meta["updates"]
        return agent


def td3_pretrain(envs: Sequence[TuningEnv], total_steps: int, cfg: TD3Config = TD3Config(), seed: int = 0,
                 agent: TD3Agent | None = None) -> TD3Agent:
    """Train over episodes whose environment is drawn uniformly from ``envs``.

    The first ``warmup_steps`` actions are uniform random; after that the
    actor acts with Gaussian exploration noise and one update runs per step.
    """
    if not envs:
        raise ValueError("need at least one environment")
    agent = agent or TD3Agent(cfg, seed)
    rng = np.random.default_rng(seed + 17)
    step = 0
    while step < total_steps:
        env = envs[int(rng.integers(len(envs)))]
        env.max_steps = cfg.episode_steps
        s = env.reset()
        done = False
        while not done and step < total_steps:
            if step < cfg.warmup_steps:
                a = rng.uniform(-1.0, 1.0, ACTION_DIM)
            else:
                a = agent.act(s, cfg.explore_sigma, rng)
            s2, r, done, _ = env.step(a)
            agent.remember(s, a, r, s2)
            if len(agent.buffer) >= min(cfg.batch_size, cfg.warmup_steps):
                agent.update()
            s = s2
            step += 1
    return agent


def make_envs(predictors: Sequence[tuple[Predictor, DatasetFeatures | None]], space: ConfigSpace,
              targets: Sequence[float] = DEFAULT_TARGETS, episode_steps: int = 50) -> list[TuningEnv]:
    """One environment per (dataset, target) pair."""
    return [TuningEnv(p, f, t, space, episode_steps) for p, f in predictors for t in targets]


# --------------------------------------------------------------------------
# recommendation


@dataclass
class Recommendation:
    config: ParamConfig
    pred_recall: float
    pred_adcn: float
    feasible: bool
    trace: list[dict] = field(default_factory=list)


def recommend(agent: TD3Agent, predictor: Predictor, feats: DatasetFeatures | None, target: float,
              space: ConfigSpace, max_rounds: int = 250, seed: int = 0, learn: bool = True) -> Recommendation:
    """Fine-tune a private copy of ``agent`` for up to ``max_rounds`` steps and keep the best visited config.

    The run is a single episode so the best config carries through every
    round. If nothing visited reaches ``target`` the highest-recall config is
    returned with ``feasible=False``.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    local = agent.fork(seed)
    rng = np.random.default_rng(seed)
    env = TuningEnv(predictor, feats, target, space, max_steps=max_rounds)
    s = env.reset()
    warm = max(1, local.cfg.batch_size // 4)
    trace = []
    for step in range(1, max_rounds + 1):
        a = local.act(s, local.cfg.explore_sigma, rng)
        s2, r, _, info = env.step(a)
        if learn:
            local.remember(s, a, r, s2)
            if len(local.buffer) >= warm:
                local.update()
        trace.append({"step": step, **info.config.to_dict(), "pred_recall": info.recall,
                      "pred_adcn": info.adcn, "reward": r, "is_best": info.is_best})
        s = s2
    cfg, rec, adcn = env.best
    feasible = rec >= target
    if not feasible:
        log.warning("no visited config reaches recall %.4f; returning max-recall config %s", target, cfg)
    return Recommendation(cfg, rec, adcn, feasible, trace)


def write_trace(path: str | os.PathLike, trace: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_HEADER)
        w.writeheader()
        for row in trace:
            w.writerow({k: (int(row[k]) if k == "is_best" else row[k]) for k in TRACE_HEADER})


# --------------------------------------------------------------------------
# post-processing on the real index


@dataclass
class PostProcessResult:
    config: ParamConfig
    recall: float
    measured: list[tuple[int, float]]


def post_process(config: ParamConfig, target: float, base: VectorSet | None, queries: VectorSet,
                 truth: NeighborTable, space: ConfigSpace, index: HnswIndex | None = None,
                 seed: int = 0) -> PostProcessResult:
    """Walk efS one grid step at a time until the measured recall is minimal-feasible.

    Below target the walk goes up until the target is met. At or above target
    it goes down until recall drops below, then returns the previous step.
    The index is built once (or taken from ``index``).
    """
    if index is None:
        index = build_index(base, IndexParams(config.efC, config.M, seed))
    efs_grid = space.efs_grid
    i = space.efs_index(space.snap_efs_up(config.efS))
    measured: dict[int, float] = {}

    def recall_at(j: int) -> float:
        if j not in measured:
            ids, _ = index.search_batch(queries.data, K, efs_grid[j])
            measured[j] = batch_recall(ids, truth)
        return measured[j]

    def result(j: int) -> PostProcessResult:
        return PostProcessResult(ParamConfig(config.efC, config.M, efs_grid[j]), measured[j], sorted(
            (efs_grid[x], r) for x, r in measured.items()))

    if recall_at(i) < target:
        while i + 1 < len(efs_grid):
            i += 1
            if recall_at(i) >= target:
                return result(i)
        raise InfeasibleTargetError(
            f"target recall infeasible for this construction: efC={config.efC} M={config.M} "
            f"reaches {measured[i]:.4f} < {target} at efS={efs_grid[i]}",
            ParamConfig(config.efC, config.M, efs_grid[i]),
            measured[i],
        )
    while i > 0 and recall_at(i - 1) >= target:
        i -= 1
    return result(i)

"""MALA*: Langevin proposals with Metropolis-Hastings acceptance, per-chain
adaptive temperature and dynamic resetting of the worst chains.

The loop is generic. A *problem* object provides

    n_chains                      number of chains
    initial_states()              list of per-chain states
    reinit(i, rng)                fresh state for chain i (dynamic reset)
    evaluate(states, idx)         BatchEval for the listed chains
    propose(i, state, grad, T, rng, config)   one Langevin proposal
    trace_terms(breakdown)        dict of named energy terms for the trace

so the same code drives grasp synthesis and the toy benchmarks.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "chain_id", "e_fc", "e_dis", "e_pen", "e_spen", "e_joints", "total",
                 "temperature", "accepted", "reset")
MAX_NONFINITE = 100


@dataclass
class MalaConfig:
    steps: int = 7000
    t_start: float = 1e-2
    t_end: float = 1e-4
    step_trans: float = 1e-4
    step_rot: float = 1e-3
    step_q: float = 1e-3
    noise_scale: float = 1.0
    # step sizes are multiplied by step_decay every step_decay_period steps since the
    # chain was last (re)initialized (1.0 = constant)
    step_decay: float = 1.0
    step_decay_period: int = 50
    n_reset: int = 500
    p_th: float = 0.8413
    p_switch: float = 0.25
    enable_resets: bool = True
    enable_adaptive_temp: bool = True
    # True resets the high-energy tail (Phi >= p_th); False the low tail (Phi <= p_th)
    reset_high_tail: bool = True

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if min(self.step_trans, self.step_rot, self.step_q) <= 0:
            raise ValueError("step sizes must be positive")
        if not 0 < self.step_decay <= 1 or self.step_decay_period <= 0:
            raise ValueError("step_decay must lie in (0, 1] with a positive period")
        if not 0 < self.p_th <= 1:
            raise ValueError("p_th must lie in (0, 1]")
        if self.n_reset <= 0:
            raise ValueError("n_reset must be positive")

    def step_scale(self, t):
        return self.step_decay ** (t // self.step_decay_period)

    def temperature(self, t):
        """Linear decay from t_start at t=0 to t_end at the last step."""
        if self.steps <= 1:
            return self.t_start
        a = min(max(t / (self.steps - 1), 0.0), 1.0)
        return self.t_start + a * (self.t_end - self.t_start)


@dataclass
class EnergyStats:
    mu: float
    sigma: float

    @classmethod
    def of(cls, energies):
        e = np.asarray(energies, dtype=float)
        e = e[np.isfinite(e)]
        if len(e) == 0:
            return cls(0.0, 0.0)
        return cls(float(e.mean()), float(e.std()))  # population std

    def cdf(self, e):
        if self.sigma <= 0:
            return np.full(np.shape(e), 0.5)
        return ndtr((np.asarray(e, dtype=float) - self.mu) / self.sigma)


@dataclass
class BatchEval:
    energies: np.ndarray
    grads: list
    breakdowns: list
    flags: list


@dataclass
class ChainState:
    state: object
    energy: float
    grad: object
    breakdown: object
    rng: np.random.Generator
    temperature: float = 0.0
    accepted: int = 0
    rejected: int = 0
    resets: int = 0
    # iteration of the last (re)initialization; step decay counts from here
    started: int = 0
    nonfinite: int = 0
    frozen: bool = False


@dataclass
class OptimizeResult:
    chains: list
    trace: np.ndarray  # structured rows, see TRACE_COLUMNS
    n_flagged_evals: int = 0
    n_evals: int = 0
    flag_counts: dict = field(default_factory=dict)

    @property
    def states(self):
        return [c.state for c in self.chains]

    @property
    def energies(self):
        return np.array([c.energy for c in self.chains])


def adaptive_temperature(energy, stats, t_base):
    """T_i = T (1 + Phi((E_i - mu) / sigma)); Phi := 0.5 when sigma = 0."""
    return t_base * (1.0 + stats.cdf(energy))


def mh_accept(delta_e, temperature, rng):
    """Metropolis-Hastings test: accept iff U < exp(-dE / T)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if delta_e <= 0:
        # probability 1; still consume a draw so streams do not depend on dE
        rng.random()
        return True
    return bool(rng.random() < math.exp(-delta_e / temperature))


def reset_mask(energies, stats, p_th, high_tail=True, eligible=None):
    """Chains to re-initialize; empty when the batch has zero spread."""
    energies = np.asarray(energies, dtype=float)
    mask = np.zeros(len(energies), dtype=bool)
    if stats.sigma <= 0:
        return mask
    phi = stats.cdf(energies)
    if high_tail and p_th >= 1.0:
        return mask  # ndtr saturates to 1.0 far out; p_th = 1 means never reset
    mask = phi >= p_th if high_tail else phi <= p_th
    if eligible is not None:
        mask &= eligible
    return mask


def dynamic_reset(chains, problem, config, evaluate=True):
    """Re-initialize chains in the selected tail of the energy distribution.

    Returns the boolean reset mask.
    """
    live = np.array([not c.frozen and np.isfinite(c.energy) for c in chains])
    energies = np.array([c.energy for c in chains])
    stats = EnergyStats.of(energies[live])
    mask = reset_mask(energies, stats, config.p_th, config.reset_high_tail, eligible=live)
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return mask
    states = [problem.reinit(int(i), chains[i].rng) for i in idx]
    if evaluate:
        ev = problem.evaluate(states, idx)
        for j, i in enumerate(idx):
            c = chains[i]
            c.state, c.energy, c.grad, c.breakdown = states[j], float(ev.energies[j]), ev.grads[j], ev.breakdowns[j]
            c.resets += 1
            c.started = getattr(problem, "iteration", 0)
            c.nonfinite = 0
    return mask


def optimize(problem, config, seed_rngs=None, trace=True, callback=None):
    """Run MALA* (or plain MALA with both features off) for ``config.steps``."""
    n = problem.n_chains
    rngs = seed_rngs if seed_rngs is not None else problem.rngs
    states = problem.initial_states()
    ev = problem.evaluate(states, np.arange(n))
    chains = [ChainState(states[i], float(ev.energies[i]), ev.grads[i], ev.breakdowns[i], rngs[i],
                         temperature=config.temperature(0) * (1.5 if config.enable_adaptive_temp else 1.0))
              for i in range(n)]
    rows = []
    n_evals, n_flagged = n, 0
    flag_counts = {}

    def tally(flags):
        nonlocal n_flagged
        for fl in flags:
            for f in fl:
                flag_counts[f] = flag_counts.get(f, 0) + 1
            if "qp_not_converged" in fl:
                n_flagged += 1

    tally(ev.flags)

    def record(t, accepted, reset, temps):
        for i in range(n):
            terms = problem.trace_terms(chains[i].breakdown)
            rows.append((t, i, terms.get("e_fc", np.nan), terms.get("e_dis", np.nan),
                         terms.get("e_pen", np.nan), terms.get("e_spen", np.nan),
                         terms.get("e_joints", np.nan), chains[i].energy, temps[i],
                         bool(accepted[i]), bool(reset[i])))

    if trace:
        # iteration 0 holds the initial grasps
        none = np.zeros(n, dtype=bool)
        record(0, none, none, [c.temperature for c in chains])
    for t in range(1, config.steps + 1):
        t_base = config.temperature(t)
        active = np.array([i for i in range(n) if not chains[i].frozen], dtype=np.int64)
        if len(active) == 0:
            log.warning("all chains frozen at iteration %d", t)
            break
        problem.iteration = t
        if hasattr(problem, "propose_batch"):
            proposals = problem.propose_batch(active, [chains[i] for i in active], config)
        else:
            proposals = [problem.propose(int(i), chains[i].state, chains[i].grad, chains[i].temperature,
                                         chains[i].rng, config, age=t - chains[i].started) for i in active]
        pev = problem.evaluate(proposals, active)
        n_evals += len(active)
        tally(pev.flags)
        finite = np.isfinite(pev.energies)
        stats = EnergyStats.of(pev.energies[finite])
        accepted = np.zeros(n, dtype=bool)
        if config.enable_adaptive_temp:
            t_prop = adaptive_temperature(pev.energies, stats, t_base)
        else:
            t_prop = np.full(len(active), t_base)
        t_prop = np.where(np.isfinite(t_prop), t_prop, t_base)
        temps = np.array([c.temperature for c in chains])
        temps[active] = t_prop
        for j, i in enumerate(active):
            c = chains[i]
            c.temperature = float(t_prop[j])
            if not finite[j]:
                c.nonfinite += 1
                c.rejected += 1
                c.rng.random()
                if c.nonfinite >= MAX_NONFINITE:
                    c.frozen = True
                    log.warning("chain %d frozen after %d non-finite energies", i, c.nonfinite)
                continue
            c.nonfinite = 0
            e_new = float(pev.energies[j])
            if mh_accept(e_new - c.energy, c.temperature, c.rng):
                c.state, c.energy, c.grad, c.breakdown = proposals[j], e_new, pev.grads[j], pev.breakdowns[j]
                c.accepted += 1
                accepted[i] = True
            else:
                c.rejected += 1
        reset = np.zeros(n, dtype=bool)
        if config.enable_resets and t % config.n_reset == 0 and t < config.steps:
            reset = dynamic_reset(chains, problem, config)
            n_evals += int(reset.sum())
        if trace:
            record(t, accepted, reset, temps)
        if callback is not None:
            callback(t, chains)
    dtype = [(c, "f8") for c in TRACE_COLUMNS]
    dtype[0] = ("iteration", "i8")
    dtype[1] = ("chain_id", "i8")
    dtype[9] = ("accepted", "?")
    dtype[10] = ("reset", "?")
    arr = np.array(rows, dtype=dtype) if rows else np.zeros(0, dtype=dtype)
    return OptimizeResult(chains, arr, n_flagged, n_evals, flag_counts)


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([int(row[0]), int(row[1])] + [repr(float(row[k])) for k in range(2, 9)]
                       + [int(row[9]), int(row[10])])


# ---------------------------------------------------------------------------
# problems


def langevin_step(x, grad, eta, T, rng, noise_scale=1.0):
    """x - eta grad + sqrt(2 eta T) xi, xi ~ N(0, I)."""
    x = np.asarray(x, dtype=float)
    xi = rng.standard_normal(x.shape)
    return x - eta * np.asarray(grad, dtype=float) + noise_scale * np.sqrt(2.0 * eta * max(T, 0.0)) * xi


class GraspProblem:
    """Chains over grasps of one gripper on one object."""

    def __init__(self, model, obj, weights, batch):
        from .gripper import sample_initial_grasp

        self.model, self.obj, self.weights = model, obj, weights
        self.batch = batch
        self.pool = batch.pool
        self.n_contacts = len(batch.grasps[0].contacts)
        self.rngs = batch.rngs
        self._sample = sample_initial_grasp
        self.iteration = 0  # set by optimize()

    @property
    def n_chains(self):
        return len(self.batch)

    def initial_states(self):
        return [g.copy() for g in self.batch.grasps]

    def reinit(self, i, rng):
        return self._sample(self.model, self.obj, self.pool, self.n_contacts, rng)

    def evaluate(self, states, idx):
        from .energy import NONSMOOTH_FLAGS, evaluate_grasps  # noqa: F401

        t = np.stack([s.translation for s in states])
        quat = np.stack([s.quat for s in states])
        q = np.stack([s.q for s in states])
        c = np.stack([s.contacts for s in states])
        be = evaluate_grasps(self.model, self.obj, t, quat, q, c, self.weights, grad=True)
        return BatchEval(be.total, list(be.grad), be.breakdowns, be.flags)

    def propose(self, i, state, grad, T, rng, config, age=None):
        from .gripper import Grasp, clamp_joints, resample_contact_indices, retract_quat

        contacts = resample_contact_indices(state.contacts, self.pool, rng, config.p_switch)
        ns = config.noise_scale
        k = config.step_scale(self.iteration if age is None else age)
        t = langevin_step(state.translation, grad[:3], k * config.step_trans, T, rng, ns)
        delta = langevin_step(np.zeros(3), grad[3:6], k * config.step_rot, T, rng, ns)
        q = langevin_step(state.q, grad[6:], k * config.step_q, T, rng, ns)
        g = Grasp(t, retract_quat(state.quat, delta), clamp_joints(self.model, q), contacts, state.tau_q)
        assert np.all(g.q >= self.model.lower) and np.all(g.q <= self.model.upper)
        return g

    @staticmethod
    def trace_terms(b):
        return b.as_dict()


class FunctionProblem:
    """Chains over R^d for an energy given as a Python callable.

    ``energy(X) -> (values, gradients)`` on a (B, d) stack of points; used
    by the toy benchmarks.
    """

    NOISE_BLOCK = 256

    def __init__(self, energy, init, n_chains, seed=0, step=1e-2):
        self.energy = energy
        self.init = init
        self.step = step
        self._n = n_chains
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chains)]
        self._init_states = [np.asarray(init(r), dtype=float) for r in self.rngs]
        d = len(self._init_states[0])
        self._noise = np.zeros((n_chains, self.NOISE_BLOCK, d))
        self._ptr = np.full(n_chains, self.NOISE_BLOCK)

    def _draw(self, idx, chains):
        # each chain reads its own stream in blocks, so results do not depend
        # on how many chains are active or batched together
        for i, c in zip(idx, chains):
            if self._ptr[i] == self.NOISE_BLOCK:
                self._noise[i] = c.rng.standard_normal(self._noise.shape[1:])
                self._ptr[i] = 0
        xi = self._noise[idx, self._ptr[idx]]
        self._ptr[idx] += 1
        return xi

    def propose_batch(self, idx, chains, config):
        x = np.stack([c.state for c in chains])
        g = np.stack([c.grad for c in chains])
        T = np.array([c.temperature for c in chains])
        xi = self._draw(idx, chains)
        t = getattr(self, "iteration", 0)
        eta = self.step * np.array([config.step_scale(t - c.started) for c in chains])
        out = x - eta[:, None] * g + config.noise_scale * np.sqrt(2.0 * eta * T)[:, None] * xi
        return list(out)

    @property
    def n_chains(self):
        return self._n

    def initial_states(self):
        return [s.copy() for s in self._init_states]

    def reinit(self, i, rng):
        return np.asarray(self.init(rng), dtype=float)

    def evaluate(self, states, idx):
        v, g = self.energy(np.stack(states))
        return BatchEval(np.asarray(v, dtype=float), list(g), [None] * len(states), [set()] * len(states))

    def propose(self, i, state, grad, T, rng, config, age=None):
        xi = rng.standard_normal(state.shape)
        eta = self.step * config.step_scale(getattr(self, "iteration", 0) if age is None else age)
        return state - eta * grad + config.noise_scale * math.sqrt(2.0 * eta * T) * xi

    @staticmethod
    def trace_terms(b):
        return {}


def quadratic_energy(center, A=None):
    center = np.asarray(center, dtype=float)
    A = np.eye(len(center)) if A is None else np.asarray(A, dtype=float)

    def f(X):
        d = np.atleast_2d(X) - center
        g = d @ A.T
        return 0.5 * np.sum(d * g, axis=1), g

    return f


def mixture_modes(k=8, radius=4.0):
    ang = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gaussian_mixture_energy(modes, width=0.5):
    """-log sum_k exp(-|x - m_k|^2 / (2 w^2)) with its gradient."""
    modes = np.asarray(modes, dtype=float)

    def f(X):
        d = np.atleast_2d(X)[:, None, :] - modes[None]
        a = -np.sum(d * d, axis=2) / (2 * width ** 2)
        amax = a.max(axis=1, keepdims=True)
        w = np.exp(a - amax)
        s = w.sum(axis=1, keepdims=True)
        value = -(amax[:, 0] + np.log(s[:, 0]))
        grad = np.einsum("bk,bkd->bd", w / s, d) / width ** 2
        return value, grad

    return f


def count_modes(points, modes, radius):
    """Number of modes with at least one point within ``radius``."""
    points = np.atleast_2d(points)
    d = np.linalg.norm(points[:, None, :] - np.asarray(modes)[None], axis=2)
    return int(np.any(d < radius, axis=0).sum())

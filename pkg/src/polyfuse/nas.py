"""Latency-aware architecture search with a recurrent policy.

A small tanh-recurrence controller emits one categorical decision per step
(layer count, hidden size, ffn size), conditioned on the embedding of the
previous action. Score-function gradients with an exponential-moving-average
accuracy baseline update the weights. The search runs in two phases: depth
first with sizes pinned to midpoints, then sizes with depth frozen, because
depth moves accuracy the most.

Architectures whose measured latency exceeds the budget receive the penalty
branch of the reward and are never handed to the trainer.
"""

from __future__ import annotations

import math
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import fusion, schedule, tuning
from .graph import count_metrics
from .interp import DTYPE
from .model import ArchSample, build_transformer_graph, graph_flops, param_count


# ---------------------------------------------------------------------------
# Search space


@dataclass(frozen=True)
class SearchSpace:
    layer_choices: tuple[int, ...]
    hidden_choices: tuple[int, ...]
    ffn_choices: tuple[int, ...]
    latency_budget_ms: float
    seq_len: int = 128
    num_heads: int = 4

    def __post_init__(self):
        if not (self.layer_choices and self.hidden_choices and self.ffn_choices):
            raise ValueError("all choice lists must be non-empty")
        if self.latency_budget_ms <= 0:
            raise ValueError("latency budget must be positive")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        for h in self.hidden_choices:
            if h % self.num_heads != 0:
                raise ValueError(f"hidden choice {h} not divisible by {self.num_heads} heads")
            if not any(f >= h for f in self.ffn_choices):
                raise ValueError(f"no ffn choice >= hidden choice {h}")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.layer_choices), len(self.hidden_choices), len(self.ffn_choices))

    def ffn_mask(self, hidden: int) -> tuple[bool, ...]:
        return tuple(f >= hidden for f in self.ffn_choices)

    def mask_for_step(self, step: int, prior_actions: Sequence[int]) -> tuple[bool, ...] | None:
        if step == 2:
            return self.ffn_mask(self.hidden_choices[prior_actions[1]])
        return None

    def arch(self, actions: Sequence[int]) -> ArchSample:
        sample = ArchSample(
            num_layers=self.layer_choices[actions[0]],
            hidden_size=self.hidden_choices[actions[1]],
            ffn_size=self.ffn_choices[actions[2]],
            num_heads=self.num_heads,
        )
        sample.validate()
        return sample


# ---------------------------------------------------------------------------
# Controller


@dataclass
class ControllerState:
    """Weights of the recurrent policy plus the EMA accuracy baseline.

    Arrays are float64 so the analytic gradients can be checked against
    central finite differences at tight tolerance.
    """

    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray
    heads: list[np.ndarray]
    head_bias: list[np.ndarray]
    embed: list[np.ndarray]
    baseline: float = 0.0
    beta: float = 0.9

    @property
    def hidden_width(self) -> int:
        return self.wx.shape[0]

    @property
    def n_steps(self) -> int:
        return len(self.heads)

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = [("wx", self.wx), ("wh", self.wh), ("b", self.b)]
        for t in range(self.n_steps):
            items.append((f"head{t}", self.heads[t]))
            items.append((f"head_bias{t}", self.head_bias[t]))
            items.append((f"embed{t}", self.embed[t]))
        return items


def init_controller(
    sizes: Sequence[int],
    hidden_width: int = 32,
    embed_dim: int = 16,
    rng: np.random.Generator | None = None,
    scale: float = 0.1,
    beta: float = 0.9,
) -> ControllerState:
    """Fresh controller; scale=0 gives the uniform policy."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def w(*shape: int) -> np.ndarray:
        if scale == 0.0:
            return np.zeros(shape)
        return rng.normal(0.0, scale, size=shape)

    return ControllerState(
        wx=w(hidden_width, embed_dim),
        wh=w(hidden_width, hidden_width),
        b=np.zeros(hidden_width),
        heads=[w(n, hidden_width) for n in sizes],
        head_bias=[np.zeros(n) for n in sizes],
        embed=[w(n, embed_dim) for n in sizes],
        beta=beta,
    )


@dataclass(frozen=True)
class DecisionTrace:
    actions: tuple[int, ...]
    active: tuple[bool, ...]  # steps whose log-probs enter the objective
    masks: tuple[tuple[bool, ...] | None, ...]


def _masked_softmax(logits: np.ndarray, mask: tuple[bool, ...] | None) -> np.ndarray:
    z = np.array(logits, dtype=np.float64)
    if mask is not None:
        z = np.where(np.asarray(mask), z, -np.inf)
    z -= np.max(z)
    e = np.exp(z)
    return e / np.sum(e)


def _forward(
    state: ControllerState, trace_actions: Sequence[int], masks: Sequence[tuple[bool, ...] | None]
) -> list[dict]:
    """Replay the recurrence for known actions; caches everything backward needs."""
    h = np.zeros(state.hidden_width)
    x = np.zeros(state.wx.shape[1])
    steps = []
    for t in range(state.n_steps):
        h_prev, x_in = h, x
        z = state.wx @ x_in + state.wh @ h_prev + state.b
        h = np.tanh(z)
        probs = _masked_softmax(state.heads[t] @ h + state.head_bias[t], masks[t])
        a = trace_actions[t]
        steps.append({"x": x_in, "h_prev": h_prev, "h": h, "probs": probs, "action": a})
        x = state.embed[t][a]
    return steps


def sample_trace(
    state: ControllerState,
    space: SearchSpace,
    rng: np.random.Generator,
    forced: Mapping[int, int] | None = None,
) -> tuple[DecisionTrace, tuple[float, ...]]:
    """Sample one decision sequence; forced steps contribute no log-prob."""
    forced = forced or {}
    h = np.zeros(state.hidden_width)
    x = np.zeros(state.wx.shape[1])
    actions: list[int] = []
    active: list[bool] = []
    masks: list[tuple[bool, ...] | None] = []
    logps: list[float] = []
    for t in range(state.n_steps):
        z = state.wx @ x + state.wh @ h + state.b
        h = np.tanh(z)
        mask = space.mask_for_step(t, actions)
        masks.append(mask)
        probs = _masked_softmax(state.heads[t] @ h + state.head_bias[t], mask)
        if t in forced:
            a = forced[t]
            active.append(False)
            logps.append(0.0)
        else:
            a = int(rng.choice(len(probs), p=probs))
            active.append(True)
            logps.append(float(np.log(probs[a])))
        actions.append(a)
        x = state.embed[t][a]
    return DecisionTrace(tuple(actions), tuple(active), tuple(masks)), tuple(logps)


def controller_sample(
    state: ControllerState, space: SearchSpace, rng: np.random.Generator
) -> tuple[ArchSample, tuple[float, ...]]:
    trace, logps = sample_trace(state, space, rng)
    return space.arch(trace.actions), logps


def step_probabilities(
    state: ControllerState, trace_actions: Sequence[int], masks: Sequence[tuple[bool, ...] | None]
) -> list[np.ndarray]:
    return [s["probs"] for s in _forward(state, trace_actions, masks)]


# ---------------------------------------------------------------------------
# Reward, baseline, policy gradient


def compute_reward(
    accuracy: float,
    latency_ms: float,
    budget_ms: float,
    baseline: float,
    favor_low_latency: bool = False,
) -> float:
    """Over-budget architectures get the pure latency penalty; within budget the
    baseline-shifted accuracy and the latency term add up.

    favor_low_latency flips the in-budget latency term to reward headroom
    instead of latency itself; it is off by default.
    """
    if budget_ms <= 0:
        raise ValueError(f"latency budget must be positive, got {budget_ms}")
    if latency_ms > budget_ms:
        return (budget_ms - latency_ms) / budget_ms - 1.0
    term = 1.0 - latency_ms / budget_ms if favor_low_latency else latency_ms / budget_ms
    return (accuracy - baseline) + term


def baseline_update(baseline: float, accuracy: float, beta: float) -> float:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    return beta * baseline + (1.0 - beta) * accuracy


@dataclass(frozen=True)
class Episode:
    arch: ArchSample
    trace: DecisionTrace
    log_probs: tuple[float, ...]
    accuracy: float | None
    latency_ms: float
    reward: float
    baseline: float  # EMA value the reward was computed against
    feasible: bool
    fused_layer_count: int | None = None
    computation_count: int | None = None

    @property
    def advantage(self) -> float:
        return self.reward - self.baseline


def episode_objective(state: ControllerState, batch: Sequence[Episode]) -> float:
    """Mean advantage-weighted log-likelihood of the sampled decisions."""
    total = 0.0
    for ep in batch:
        steps = _forward(state, ep.trace.actions, ep.trace.masks)
        for t, s in enumerate(steps):
            if ep.trace.active[t]:
                total += ep.advantage * math.log(s["probs"][s["action"]])
    return total / len(batch)


def episode_gradients(
    state: ControllerState, batch: Sequence[Episode]
) -> dict[str, np.ndarray]:
    """Analytic gradient of episode_objective via backprop through time."""
    grads = {name: np.zeros_like(p) for name, p in state.param_items()}
    for idx, ep in enumerate(batch):
        steps = _forward(state, ep.trace.actions, ep.trace.masks)
        dh_next = np.zeros(state.hidden_width)
        for t in range(state.n_steps - 1, -1, -1):
            s = steps[t]
            a = s["action"]
            dh = dh_next
            if ep.trace.active[t]:
                dlogits = -ep.advantage * s["probs"]
                dlogits[a] += ep.advantage
                grads[f"head{t}"] += np.outer(dlogits, s["h"])
                grads[f"head_bias{t}"] += dlogits
                dh = dh + state.heads[t].T @ dlogits
            dz = dh * (1.0 - s["h"] * s["h"])
            grads["wx"] += np.outer(dz, s["x"])
            grads["wh"] += np.outer(dz, s["h_prev"])
            grads["b"] += dz
            dh_next = state.wh.T @ dz
            if t > 0:
                dx = state.wx.T @ dz
                grads[f"embed{t - 1}"][steps[t - 1]["action"]] += dx
        for name in grads:
            if not np.all(np.isfinite(grads[name])):
                raise ValueError(f"non-finite gradient produced by episode {idx}")
    for name in grads:
        grads[name] /= len(batch)
    return grads


def reinforce_update(
    state: ControllerState, batch: Sequence[Episode], learning_rate: float
) -> ControllerState:
    """One ascent step on the advantage-weighted log-likelihood; updates in place."""
    grads = episode_gradients(state, batch)
    for name, param in state.param_items():
        param += learning_rate * grads[name]
    return state


# ---------------------------------------------------------------------------
# Trainers


class TrainerIface(Protocol):
    def evaluate(self, arch: ArchSample) -> float: ...


_ACC_CEILING = 0.87
_CAL_TARGET = 0.846
_CAL_ARCH = ArchSample(num_layers=12, hidden_size=768, ffn_size=3072, num_heads=12)
_CAL_COEFF = (_ACC_CEILING - _CAL_TARGET) * math.sqrt(param_count(_CAL_ARCH))


def surrogate_accuracy(arch: ArchSample, space: SearchSpace | None = None) -> float:
    """Saturating accuracy proxy: ceiling minus c / sqrt(parameter count).

    The coefficient is pinned so a 12x768x3072 encoder lands at 0.846; the
    proxy is monotone non-decreasing in depth and both widths, clamped to [0, 1].
    """
    acc = _ACC_CEILING - _CAL_COEFF / math.sqrt(param_count(arch))
    return min(1.0, max(0.0, acc))


class SurrogateTrainer:
    """Deterministic closed-form accuracy stand-in for a real fine-tuning loop."""

    def evaluate(self, arch: ArchSample) -> float:
        return surrogate_accuracy(arch)


class ExternalCommandTrainer:
    """Runs a configured command and reads one real number from its stdout.

    argv entries may contain {layers}, {hidden}, {ffn}, {heads} placeholders.
    """

    def __init__(self, argv: Sequence[str], timeout_s: float = 300.0):
        if not argv:
            raise ValueError("trainer command must be non-empty")
        self.argv = list(argv)
        self.timeout_s = timeout_s

    def evaluate(self, arch: ArchSample) -> float:
        argv = [
            a.format(
                layers=arch.num_layers,
                hidden=arch.hidden_size,
                ffn=arch.ffn_size,
                heads=arch.num_heads,
            )
            for a in self.argv
        ]
        proc = subprocess.run(
            argv, capture_output=True, text=True, timeout=self.timeout_s, check=True
        )
        try:
            acc = float(proc.stdout.strip().split()[-1])
        except (IndexError, ValueError):
            raise ValueError(f"trainer command printed no number: {proc.stdout!r}") from None
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"trainer accuracy {acc} outside [0, 1]")
        return acc


# ---------------------------------------------------------------------------
# Two-phase search


@dataclass(frozen=True)
class SearchConfig:
    episodes_per_update: int = 8
    updates_phase1: int = 30
    updates_phase2: int = 30
    learning_rate: float = 0.1
    baseline_decay: float = 0.9
    seed: int = 0
    favor_low_latency: bool = False
    hidden_width: int = 32
    embed_dim: int = 16
    init_scale: float = 0.1


@dataclass
class SearchResult:
    best: ArchSample | None
    best_reward: float
    best_accuracy: float | None
    best_latency_ms: float | None
    exhausted: bool
    best_infeasible: ArchSample | None
    episodes: list[Episode]
    state: ControllerState
    space: SearchSpace
    phase1_layer_index: int

    @property
    def phase1_layers(self) -> int:
        return self.space.layer_choices[self.phase1_layer_index]


CompileAndMeasure = Callable[[ArchSample], Mapping[str, object]]


def search(
    space: SearchSpace,
    trainer: TrainerIface,
    compile_and_measure: CompileAndMeasure,
    cfg: SearchConfig = SearchConfig(),
) -> SearchResult:
    """Two-phase policy-gradient search; returns the best in-budget architecture.

    Phase 1 samples only the layer count, with hidden/ffn pinned to midpoint
    choices. The most probable layer choice is then frozen and phase 2 samples
    the sizes. Over-budget samples skip the trainer entirely.
    """
    rng = np.random.default_rng(cfg.seed)
    state = init_controller(
        space.sizes,
        hidden_width=cfg.hidden_width,
        embed_dim=cfg.embed_dim,
        rng=rng,
        scale=cfg.init_scale,
        beta=cfg.baseline_decay,
    )
    episodes: list[Episode] = []

    def run_phase(forced: dict[int, int], n_updates: int) -> None:
        for _ in range(n_updates):
            batch: list[Episode] = []
            for _ in range(cfg.episodes_per_update):
                trace, logps = sample_trace(state, space, rng, forced)
                arch = space.arch(trace.actions)
                info = compile_and_measure(arch)
                latency = float(info["latency_ms"])  # type: ignore[arg-type]
                b0 = state.baseline
                if latency > space.latency_budget_ms:
                    accuracy = None
                    reward = compute_reward(
                        0.0, latency, space.latency_budget_ms, b0, cfg.favor_low_latency
                    )
                else:
                    accuracy = float(trainer.evaluate(arch))
                    reward = compute_reward(
                        accuracy, latency, space.latency_budget_ms, b0, cfg.favor_low_latency
                    )
                    state.baseline = baseline_update(state.baseline, accuracy, cfg.baseline_decay)
                batch.append(
                    Episode(
                        arch=arch,
                        trace=trace,
                        log_probs=logps,
                        accuracy=accuracy,
                        latency_ms=latency,
                        reward=reward,
                        baseline=b0,
                        feasible=latency <= space.latency_budget_ms,
                        fused_layer_count=info.get("fused_layer_count"),  # type: ignore[arg-type]
                        computation_count=info.get("computation_count"),  # type: ignore[arg-type]
                    )
                )
            episodes.extend(batch)
            reinforce_update(state, batch, cfg.learning_rate)

    n_hidden = len(space.hidden_choices)
    pinned_hidden = n_hidden // 2
    valid_ffn = [i for i, ok in enumerate(space.ffn_mask(space.hidden_choices[pinned_hidden])) if ok]
    pinned_ffn = valid_ffn[len(valid_ffn) // 2]

    run_phase({1: pinned_hidden, 2: pinned_ffn}, cfg.updates_phase1)
    probs0 = step_probabilities(state, [0, pinned_hidden, pinned_ffn], [None, None, None])[0]
    layer_idx = int(np.argmax(probs0))
    run_phase({0: layer_idx}, cfg.updates_phase2)

    feasible = [e for e in episodes if e.feasible]
    infeasible = [e for e in episodes if not e.feasible]
    best_inf = max(infeasible, key=lambda e: e.reward).arch if infeasible else None
    if not feasible:
        return SearchResult(
            best=None,
            best_reward=float("-inf"),
            best_accuracy=None,
            best_latency_ms=None,
            exhausted=True,
            best_infeasible=best_inf,
            episodes=episodes,
            state=state,
            space=space,
            phase1_layer_index=layer_idx,
        )
    best = max(feasible, key=lambda e: e.reward)
    return SearchResult(
        best=best.arch,
        best_reward=best.reward,
        best_accuracy=best.accuracy,
        best_latency_ms=best.latency_ms,
        exhausted=False,
        best_infeasible=best_inf,
        episodes=episodes,
        state=state,
        space=space,
        phase1_layer_index=layer_idx,
    )


# ---------------------------------------------------------------------------
# Compile-and-measure pipelines


def flops_latency_pipeline(
    space: SearchSpace, ms_per_gflop: float = 2.0, base_ms: float = 0.0
) -> CompileAndMeasure:
    """Latency affine in FLOPs; fused metrics come from the real fusion pass."""
    cache: dict[tuple, dict[str, object]] = {}

    def measure(arch: ArchSample) -> dict[str, object]:
        key = (arch.num_layers, arch.hidden_size, arch.ffn_size, arch.num_heads)
        if key not in cache:
            g = build_transformer_graph(arch, space.seq_len)
            flops = graph_flops(g)
            fused, _, _ = fusion.fuse(g)
            metrics = count_metrics(fused)
            cache[key] = {
                "latency_ms": base_ms + ms_per_gflop * flops / 1e9,
                "fused_layer_count": metrics["layer_count"],
                "computation_count": metrics["computation_count"],
                "flops": flops,
            }
        return cache[key]

    return measure


def measured_latency_pipeline(
    space: SearchSpace, runs: int = 10, warmup: int = 2, seed: int = 0
) -> CompileAndMeasure:
    """Builds, fuses, and actually times each architecture on the host."""
    from .interp import random_bindings

    cache: dict[tuple, dict[str, object]] = {}
    cfg = tuning.MeasureConfig(runs=runs, warmup=warmup)

    def measure(arch: ArchSample) -> dict[str, object]:
        key = (arch.num_layers, arch.hidden_size, arch.ffn_size, arch.num_heads)
        if key not in cache:
            g = build_transformer_graph(arch, space.seq_len)
            fused, _, _ = fusion.fuse(g)
            metrics = count_metrics(fused)
            bindings = random_bindings(fused, np.random.default_rng(seed))
            stats = tuning.measure_latency(schedule.graph_executable(fused), cfg, bindings)
            cache[key] = {
                "latency_ms": stats.median_ms,
                "fused_layer_count": metrics["layer_count"],
                "computation_count": metrics["computation_count"],
                "flops": graph_flops(g),
            }
        return cache[key]

    return measure

"""Multi-agent pipelines over four topologies with textual and visual flow."""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .attention import ReallocationConfig, allocation_by_type
from .errors import ConfigError, InvariantError, ValidationError
from .model import ForwardResult, Model, Reallocation, forward, generate, readout_report
from .relay import RelayBlock, RelayMessage, contextualize, inject_relay, merge_messages
from .scene import Scene, build_prompt
from .selection import (
    SelectionParams,
    SubsetLabel,
    Trajectory,
    classify_all,
    select_unimodal,
    subset_proportions,
    trajectories_from_matrix,
)
from .tokens import ALL_TYPES, BASELINE_TYPES, TokenType

TRACE_SCHEMA = "viflab/trace v1"


class TopologyKind(enum.Enum):
    LINEAR = "linear"
    LAYERED = "layered"
    RANDOM = "random"
    CIRCULAR = "circular"


class Mode(enum.Enum):
    BASELINE = "baseline"
    VIF = "vif"


@dataclass(frozen=True)
class Topology:
    kind: TopologyKind
    n_agents: int
    edges: tuple[tuple[int, int], ...]
    layers: tuple[tuple[int, ...], ...] | None = None
    seed: int | None = None

    def predecessors(self, agent: int) -> list[int]:
        return sorted(a for a, b in self.edges if b == agent)

    def successors(self, agent: int) -> list[int]:
        return sorted(b for a, b in self.edges if a == agent)

    def entry_agents(self) -> list[int]:
        if self.kind is TopologyKind.CIRCULAR:
            return [0]
        has_in = {b for _, b in self.edges}
        return [a for a in range(self.n_agents) if a not in has_in]

    def reachable(self) -> set[int]:
        seen = set(self.entry_agents())
        queue = deque(seen)
        while queue:
            u = queue.popleft()
            for v in self.successors(u):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return seen

    def validate(self) -> None:
        if self.n_agents < 1:
            raise ConfigError("need at least one agent")
        for a, b in self.edges:
            if not (0 <= a < self.n_agents and 0 <= b < self.n_agents) or a == b:
                raise ConfigError(f"bad edge {a}->{b}")
        if not self.entry_agents() or self.reachable() != set(range(self.n_agents)):
            raise ConfigError("topology is not connected from its entry agents")

    def schedule(self, turns: int) -> list[int]:
        """Agent activated at each turn (turn order)."""
        if turns < 1:
            raise ConfigError("turns must be >= 1")
        if self.kind is TopologyKind.CIRCULAR:
            return [t % self.n_agents for t in range(turns)]
        if self.kind is TopologyKind.LAYERED:
            order = [a for layer in self.layers for a in layer]
        else:
            order = list(range(self.n_agents))  # edges always point to higher ids
        if turns > len(order):
            raise ConfigError(
                f"{self.kind.value} topology has {len(order)} agents; cannot run {turns} turns"
            )
        return order[:turns]


def build_topology(
    kind: TopologyKind | str,
    n_agents: int,
    seed: int = 0,
    n_layers: int | None = None,
    extra_edge_prob: float = 0.3,
) -> Topology:
    kind = TopologyKind(kind)
    n = n_agents
    if n < 1:
        raise ConfigError("n_agents must be >= 1")
    layers = None
    if kind is TopologyKind.LINEAR:
        edges = [(i, i + 1) for i in range(n - 1)]
    elif kind is TopologyKind.CIRCULAR:
        if n < 2:
            raise ConfigError("circular topology needs >= 2 agents")
        edges = [(i, i + 1) for i in range(n - 1)] + [(n - 1, 0)]
    elif kind is TopologyKind.LAYERED:
        n_layers = max(2, n // 2) if n_layers is None else n_layers
        if n_layers < 2 or n < n_layers:
            raise ConfigError(f"cannot arrange {n} agents into {n_layers} (>= 2) layers")
        layers = tuple(tuple(int(a) for a in part) for part in np.array_split(np.arange(n), n_layers))
        edges = [(a, b) for up, down in zip(layers, layers[1:]) for a in up for b in down]
    else:
        rng = np.random.default_rng([seed, 0x70B0])
        chosen = set()
        for j in range(1, n):
            chosen.add((int(rng.integers(0, j)), j))
        for i in range(n):
            for j in range(i + 1, n):
                if rng.random() < extra_edge_prob:
                    chosen.add((i, j))
        for i in range(n - 1):
            if not any(a == i for a, _ in chosen):
                chosen.add((i, int(rng.integers(i + 1, n))))
        edges = sorted(chosen)
    topo = Topology(kind, n, tuple(edges), layers, seed if kind is TopologyKind.RANDOM else None)
    topo.validate()
    return topo


@dataclass(frozen=True)
class SystemConfig:
    selection: SelectionParams = SelectionParams()
    tau: float = 0.8
    alpha_middle: float = 0.1
    alpha_deep: float = 0.3
    relay_cap: int = 8
    merge_cap: int | None = None
    max_steps: int = 4
    decode_temperature: float = 1.0
    decode_seed: int = 0
    realloc_first_turn: bool = True
    check_invariants: bool = True

    @property
    def effective_merge_cap(self) -> int:
        return 2 * self.relay_cap if self.merge_cap is None else self.merge_cap

    def realloc_config(self, depth: int) -> ReallocationConfig:
        return ReallocationConfig.for_depth(
            depth, tau=self.tau, alpha_middle=self.alpha_middle, alpha_deep=self.alpha_deep
        )

    def snapshot(self) -> dict[str, Any]:
        return {
            "omega": self.selection.omega,
            "trend_tolerance": self.selection.trend_tolerance,
            "keynorm_buffer": self.selection.keynorm_buffer,
            "tau": self.tau,
            "alpha_middle": self.alpha_middle,
            "alpha_deep": self.alpha_deep,
            "relay_cap": self.relay_cap,
            "merge_cap": self.effective_merge_cap,
            "max_steps": self.max_steps,
            "decode_temperature": self.decode_temperature,
            "decode_seed": self.decode_seed,
            "realloc_first_turn": self.realloc_first_turn,
        }


@dataclass
class TurnLog:
    turn: int  # 1-based activation index
    agent: int
    inbound_turns: tuple[int, ...]
    inbound_text: tuple[int, ...]
    inbound_relay: int | None  # relay tokens received, None in baseline mode
    allocation: list[dict[TokenType, float]]  # one profile per layer
    proportions: dict[SubsetLabel, float]
    output_ids: tuple[int, ...]
    facts: np.ndarray
    severity: float
    relay_selected: tuple[int, ...]  # vision positions sent on
    # analysis payload, not serialised
    relay_out: RelayMessage | None = field(default=None, repr=False)
    result: ForwardResult | None = field(default=None, repr=False)
    vision_index: np.ndarray | None = field(default=None, repr=False)
    grid: np.ndarray | None = field(default=None, repr=False)
    trajectories: list[Trajectory] | None = field(default=None, repr=False)


@dataclass
class SystemTrace:
    topology: Topology
    mode: Mode
    logs: list[TurnLog]
    config: dict[str, Any]
    middle_band: tuple[int, int]

    @property
    def turns(self) -> int:
        return len(self.logs)

    def band_allocation(self, *types: TokenType) -> list[float]:
        """Per turn: mean over middle-band layers of the summed fractions of ``types``."""
        lo, hi = self.middle_band
        return [
            float(np.mean([sum(p.get(t, 0.0) for t in types) for p in log.allocation[lo : hi + 1]]))
            for log in self.logs
        ]

    def vision_allocation(self) -> list[float]:
        return self.band_allocation(TokenType.VISION)

    def visual_allocation(self) -> list[float]:
        return self.band_allocation(TokenType.VISION, TokenType.RELAY)

    def relay_allocation(self) -> list[float]:
        return self.band_allocation(TokenType.RELAY)

    def unimodal_fractions(self) -> list[float]:
        return [log.proportions.get(SubsetLabel.UNIMODAL, 0.0) for log in self.logs]

    def severities(self) -> list[float]:
        return [log.severity for log in self.logs]

    # ------------------------------------------------------------ serialise

    def to_jsonl(self) -> str:
        """Header line then one JSON record per turn, stable key order."""
        from .metrics import propagation_distances

        d, D = propagation_distances(self)
        header = {
            "schema": TRACE_SCHEMA,
            "topology": self.topology.kind.value,
            "n_agents": self.topology.n_agents,
            "edges": [list(e) for e in self.topology.edges],
            "mode": self.mode.value,
            "turns": self.turns,
            "middle_band": list(self.middle_band),
            "D": D,
            "config": self.config,
        }
        lines = [json.dumps(header)]
        for log, di in zip(self.logs, d):
            rec = {
                "turn": log.turn,
                "agent": log.agent,
                "mode": self.mode.value,
                "inbound": list(log.inbound_turns),
                "inbound_relay": log.inbound_relay,
                "allocations": [
                    {t.value: p[t] for t in TokenType if t in p} for p in log.allocation
                ],
                "proportions": {
                    lab.value: log.proportions[lab] for lab in SubsetLabel if lab in log.proportions
                },
                "outputs": list(log.output_ids),
                "relay_selected": list(log.relay_selected),
                "h": log.severity,
                "d": di,
            }
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        from .csvio import atomic_write_text

        atomic_write_text(path, self.to_jsonl())


def read_trace_records(path: str | Path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != TRACE_SCHEMA:
        raise ValidationError(f"unexpected trace schema {header.get('schema')!r}")
    return header, [json.loads(line) for line in lines[1:]]


# ------------------------------------------------------------------ running


def middle_trajectories(result: ForwardResult, vision_index: np.ndarray, band: tuple[int, int]):
    """Per-token received attention (query-normalised) over the band's layers."""
    lo, hi = band
    values = np.stack([
        result.records[layer].mean[:, vision_index].sum(axis=0) / result.records[layer].mean.shape[0]
        for layer in range(lo, hi + 1)
    ])
    return trajectories_from_matrix(values, vision_index)


def middle_key_norms(result: ForwardResult, vision_index: np.ndarray, band: tuple[int, int]) -> np.ndarray:
    lo, hi = band
    return np.stack([result.records[layer].key_norms[vision_index] for layer in range(lo, hi + 1)])


def _check_result(result: ForwardResult, profiles) -> None:
    for rec in result.records:
        if np.max(np.abs(rec.heads.sum(axis=-1) - 1.0)) > 1e-9:
            raise InvariantError(f"attention rows at layer {rec.layer} are not stochastic")
    for layer, prof in enumerate(profiles):
        if abs(sum(prof.values()) - 1.0) > 1e-9:
            raise InvariantError(f"allocation profile at layer {layer} does not sum to 1")


def run_system(
    scene: Scene,
    topology: Topology,
    turns: int,
    mode: Mode | str,
    model: Model,
    relay_block: RelayBlock,
    config: SystemConfig = SystemConfig(),
    keep_analysis: bool = False,
) -> SystemTrace:
    """Run ``turns`` agent activations and record every turn.

    Each agent receives its predecessors' latest outputs appended to the
    question (textual flow).  In vif mode it also receives their merged
    relay messages and runs with attention reallocation, using the inactive
    vision set found by an un-intervened probe pass over its prompt.
    """
    mode = Mode(mode)
    topology.validate()
    schedule = topology.schedule(turns)
    bands = model.bands
    rcfg = config.realloc_config(model.config.depth)
    types = ALL_TYPES if mode is Mode.VIF else BASELINE_TYPES
    truth = scene.facts()
    logs: list[TurnLog] = []
    latest: dict[int, TurnLog] = {}

    for turn, agent in enumerate(schedule, start=1):
        inbound = [latest[p] for p in topology.predecessors(agent) if p in latest]
        inbound_text = tuple(t for log in inbound for t in log.output_ids)
        seq = build_prompt(model, scene, scene.question_ids + inbound_text)
        n_relay_in = None
        if mode is Mode.VIF:
            msgs = [log.relay_out for log in inbound if log.relay_out is not None]
            n_relay_in = 0
            if msgs:
                merged = merge_messages(msgs, config.effective_merge_cap)
                seq = inject_relay(seq, merged)
                n_relay_in = merged.n

        active = mode is Mode.VIF and (turn > 1 or config.realloc_first_turn)
        vis = seq.indices(TokenType.VISION)
        inactive: list[int] = []
        if active:
            probe = forward(model, seq)
            labels = classify_all(middle_trajectories(probe, vis, bands["middle"]), config.selection)
            inactive = [i for i, lab in labels.items() if lab is SubsetLabel.INACTIVE]

        gen = generate(
            model,
            seq,
            config.max_steps,
            config.decode_temperature,
            seed=[config.decode_seed, turn],
            realloc_config=rcfg if active else None,
            inactive=inactive,
        )
        full = gen.sequence
        realloc = Reallocation.from_inactive(rcfg, full.tags, inactive) if active else None
        result = forward(model, full, realloc=realloc)
        profiles = [allocation_by_type(rec.mean, full.tags, types) for rec in result.records]
        if config.check_invariants:
            _check_result(result, profiles)

        trajs = middle_trajectories(result, vis, bands["middle"])
        labels = classify_all(trajs, config.selection)
        proportions = subset_proportions(labels.values())

        selected: list[int] = []
        relay_out = None
        if mode is Mode.VIF:
            selected = select_unimodal(trajs, config.selection)[: config.relay_cap]
            instr = full.indices(TokenType.INSTRUCTION)
            relay_out = contextualize(
                full.embeddings[selected] if selected else np.zeros((0, full.dim)),
                full.embeddings[instr],
                relay_block,
                source_positions=full.positions[selected] if selected else [],
                grid=full.grid[selected] if selected else np.zeros((0, 2)),
                source_agent=agent,
            )

        facts = readout_report(model, result.hidden[-1], full)
        severity = float(100.0 * np.mean(np.abs(facts - truth)))
        log = TurnLog(
            turn=turn,
            agent=agent,
            inbound_turns=tuple(l.turn for l in inbound),
            inbound_text=inbound_text,
            inbound_relay=n_relay_in,
            allocation=profiles,
            proportions=proportions,
            output_ids=tuple(gen.token_ids),
            facts=facts,
            severity=severity,
            relay_selected=tuple(int(i) for i in selected),
            relay_out=relay_out,
        )
        if keep_analysis:
            log.result = result
            log.vision_index = vis
            log.grid = full.grid[vis]
            log.trajectories = trajs
        logs.append(log)
        latest[agent] = log

    return SystemTrace(
        topology=topology,
        mode=mode,
        logs=logs,
        config={**config.snapshot(), "model_seed": model.config.rng_seed,
                "relay_seed": relay_block.config.rng_seed},
        middle_band=bands["middle"],
    )


@dataclass(frozen=True)
class TraceComparison:
    vision_alloc: list[float]
    visual_alloc: list[float]
    unimodal_frac: list[float]
    severity: list[float]

    def means(self) -> dict[str, float]:
        return {
            "vision_alloc": float(np.mean(self.vision_alloc)),
            "visual_alloc": float(np.mean(self.visual_alloc)),
            "unimodal_frac": float(np.mean(self.unimodal_frac)),
            "severity": float(np.mean(self.severity)),
        }


def trace_compare(a: SystemTrace, b: SystemTrace) -> TraceComparison:
    """Per-turn ``a - b`` differences of the headline series."""
    if a.turns != b.turns:
        raise ValidationError(f"turn counts differ: {a.turns} vs {b.turns}")

    def diff(x: Sequence[float], y: Sequence[float]) -> list[float]:
        return [float(p - q) for p, q in zip(x, y)]

    return TraceComparison(
        vision_alloc=diff(a.vision_allocation(), b.vision_allocation()),
        visual_alloc=diff(a.visual_allocation(), b.visual_allocation()),
        unimodal_frac=diff(a.unimodal_fractions(), b.unimodal_fractions()),
        severity=diff(a.severities(), b.severities()),
    )

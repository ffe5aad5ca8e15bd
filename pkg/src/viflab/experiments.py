"""Experiment harness behind the CLI subcommands.

Each function takes an :class:`ExperimentConfig` and returns plain rows
(dicts) so the CLI only has to serialise them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .config import ExperimentConfig
from .errors import InvariantError, ValidationError
from .mas import (
    Mode,
    SystemTrace,
    build_topology,
    middle_key_norms,
    middle_trajectories,
    run_system,
    trace_compare,
)
from .metrics import allocation_decay, percent, propagation_distances, trace_hs
from .model import DropSpec, ForwardResult, Model, forward, init_model, readout_report
from .relay import RelayBlock, RelayBlockConfig
from .scene import Scene, build_prompt, make_scene
from .selection import (
    SubsetLabel,
    classify_all,
    overlap,
    peak_salience,
    select_by_keynorm,
    select_random,
    select_unimodal,
)
from .tokens import TokenSequence, TokenType

DROP_FRACTIONS = (0.25, 0.5, 0.75, 1.0)
DROP_SUBSETS = (
    SubsetLabel.RANDOM,
    SubsetLabel.INACTIVE,
    SubsetLabel.RISE,
    SubsetLabel.FALL,
    SubsetLabel.UNIMODAL,
)
DROP_BANDS = ("shallow", "middle", "deep")
BUFFER_SWEEP = (0, 1, 3, 5, 8)


@dataclass(frozen=True)
class Setup:
    model: Model
    block: RelayBlock
    scene: Scene


def setup(cfg: ExperimentConfig) -> Setup:
    mcfg = cfg.model_config()
    model = init_model(mcfg)
    block = RelayBlock.init(
        RelayBlockConfig(model_dim=mcfg.model_dim, heads=mcfg.heads, rng_seed=cfg.resolved_seed("model"))
    )
    scene = make_scene(
        grid_side=mcfg.grid_side,
        n_colors=mcfg.n_colors,
        n_shapes=mcfg.n_shapes,
        vocab_size=mcfg.vocab_size,
        seed=cfg.resolved_seed("scene"),
    )
    return Setup(model, block, scene)


def run_traces(cfg: ExperimentConfig, keep_analysis: bool = False) -> dict[Mode, SystemTrace]:
    env = setup(cfg)
    topo = build_topology(cfg.topology, cfg.agents, seed=cfg.resolved_seed("topology"))
    return {
        mode: run_system(
            env.scene, topo, cfg.turns, mode, env.model, env.block, cfg.system_config(), keep_analysis
        )
        for mode in cfg.modes
    }


# --------------------------------------------------------------- allocation


def allocation_rows(trace: SystemTrace) -> list[dict]:
    rows = []
    for log in trace.logs:
        for layer, prof in enumerate(log.allocation):
            for t in TokenType:
                if t in prof:
                    rows.append({
                        "turn": log.turn, "layer": layer, "token_type": t.value, "allocation": prof[t],
                    })
    return rows


def check_allocation_rows(rows: Iterable[dict], tol: float = 1e-9) -> None:
    sums: dict[tuple[int, int], float] = {}
    for r in rows:
        key = (r["turn"], r["layer"])
        sums[key] = sums.get(key, 0.0) + r["allocation"]
    bad = {k: s for k, s in sums.items() if abs(s - 1.0) > tol}
    if bad:
        raise InvariantError(f"allocation sums off for (turn, layer) {sorted(bad)[:5]}")


# ----------------------------------------------------------------- ablation


@dataclass(frozen=True)
class Probe:
    seq: TokenSequence
    base: ForwardResult
    vision: np.ndarray
    subsets: dict[str, list[int]]


def _ranked_subsets(cfg: ExperimentConfig, env: Setup, base: ForwardResult, vision: np.ndarray):
    params = cfg.selection_params()
    trajs = middle_trajectories(base, vision, env.model.bands["middle"])
    labels = classify_all(trajs, params)
    by_label = {lab: [t for t in trajs if labels[t.token_index] is lab] for lab in SubsetLabel}

    ranked: dict[str, list[int]] = {}
    ranked["unimodal"] = [
        t.token_index
        for t in sorted(by_label[SubsetLabel.UNIMODAL], key=lambda t: (-peak_salience(t), t.token_index))
    ]
    ranked["rise"] = [
        t.token_index
        for t in sorted(by_label[SubsetLabel.RISE], key=lambda t: (-(t.values[-1] - t.values[0]), t.token_index))
    ]
    ranked["fall"] = [
        t.token_index
        for t in sorted(by_label[SubsetLabel.FALL], key=lambda t: (-(t.values[0] - t.values[-1]), t.token_index))
    ]
    ranked["inactive"] = [
        t.token_index
        for t in sorted(by_label[SubsetLabel.INACTIVE], key=lambda t: (t.values.mean(), t.token_index))
    ]
    others = [len(ranked[k]) for k in ("inactive", "rise", "fall", "unimodal")]
    count = int(round(float(np.mean(others))))
    cells = select_random(count, env.model.config.grid_side, [cfg.seed, 0xD40B], params)
    ranked["random"] = [int(vision[c]) for c in cells]
    ranked["all"] = [int(i) for i in vision]
    return ranked


def probe(cfg: ExperimentConfig, env: Setup | None = None) -> tuple[Setup, Probe]:
    env = env or setup(cfg)
    seq = build_prompt(env.model, env.scene, env.scene.question_ids)
    base = forward(env.model, seq)
    vision = seq.indices(TokenType.VISION)
    return env, Probe(seq, base, vision, _ranked_subsets(cfg, env, base, vision))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def logit_divergence(base: np.ndarray, other: np.ndarray, positions: np.ndarray) -> float:
    """Mean KL(base || other) of next-token distributions at ``positions``."""
    lp = _log_softmax(base[positions])
    lq = _log_softmax(other[positions])
    return float(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=-1)))


def verify_drop(base: ForwardResult, dropped: ForwardResult, spec: DropSpec) -> None:
    """Exact checks: zeros where dropped, identical states before the first dropped layer."""
    if dropped.hidden.shape != base.hidden.shape or dropped.logits.shape != base.logits.shape:
        raise InvariantError("dropping changed tensor shapes")
    lo, hi = spec.layer_range
    idx = sorted(spec.token_indices)
    for layer in range(lo, hi + 1):
        if idx and np.any(dropped.hidden[layer + 1][idx] != 0.0):
            raise InvariantError(f"dropped states not zero at layer {layer}")
    if not np.array_equal(dropped.hidden[: lo + 1], base.hidden[: lo + 1]):
        raise InvariantError("states before the dropped band changed")


def band_range(model: Model, band: str) -> tuple[int, int]:
    if band == "all":
        return (0, model.config.depth - 1)
    try:
        return model.bands[band]
    except KeyError:
        raise ValidationError(f"unknown band {band!r}") from None


def ablate_drop(
    cfg: ExperimentConfig,
    subsets: Iterable[str] | None = None,
    fractions: Iterable[float] | None = None,
    bands: Iterable[str] | None = None,
    include_reference: bool = True,
) -> list[dict]:
    """Drop the top fraction of each ranked subset in each band, against an undropped pass."""
    env, pr = probe(cfg)
    subsets = [s.value if isinstance(s, SubsetLabel) else s for s in (subsets or DROP_SUBSETS)]
    fractions = list(fractions or DROP_FRACTIONS)
    bands = list(bands or DROP_BANDS)
    for f in fractions:
        if not 0 < f <= 1:
            raise ValidationError(f"fraction {f} not in (0, 1]")
    cells = [(b, s, f) for b in bands for s in subsets for f in fractions]
    if include_reference:
        cells.append(("all", "all", 1.0))

    text_pos = pr.seq.indices(TokenType.INSTRUCTION)
    base_facts = readout_report(env.model, pr.base.hidden[-1], pr.seq)
    rows = []
    for band, subset, frac in cells:
        if subset not in pr.subsets:
            raise ValidationError(f"unknown subset {subset!r}")
        members = pr.subsets[subset]
        n_drop = math.ceil(frac * len(members) - 1e-9)
        row = {"band": band, "subset": subset, "fraction": frac, "subset_size": len(members), "n_dropped": n_drop}
        if n_drop == 0:
            rows.append({**row, "status": "empty", "logit_divergence": None, "fact_shift": None, "verified": False})
            continue
        spec = DropSpec(band_range(env.model, band), frozenset(members[:n_drop]))
        res = forward(env.model, pr.seq, drop=spec)
        verify_drop(pr.base, res, spec)
        facts = readout_report(env.model, res.hidden[-1], pr.seq)
        rows.append({
            **row,
            "status": "ok",
            "logit_divergence": logit_divergence(pr.base.logits, res.logits, text_pos),
            "fact_shift": float(np.mean(np.abs(facts - base_facts))),
            "verified": True,
        })
    return rows


# ---------------------------------------------------------------- MAS runs


def metric_rows(trace: SystemTrace) -> list[dict]:
    d, D = propagation_distances(trace)
    vision = trace.vision_allocation()
    relay = trace.relay_allocation()
    visual = trace.visual_allocation()
    uni = trace.unimodal_fractions()
    mode = trace.mode.value
    rows = [
        {
            "kind": "turn", "mode": mode, "turn": log.turn, "agent": log.agent,
            "vision_alloc": vision[i], "relay_alloc": relay[i], "visual_alloc": visual[i],
            "unimodal_frac": uni[i], "h": log.severity, "d": d[i], "D": D,
        }
        for i, log in enumerate(trace.logs)
    ]
    _, decay = allocation_decay(visual)
    rows.append({
        "kind": "summary", "mode": mode, "turn": trace.turns, "agent": None,
        "vision_alloc": vision[-1], "relay_alloc": relay[-1], "visual_alloc": visual[-1],
        "unimodal_frac": uni[-1], "D": D,
        "hs": trace_hs(trace), "decay_pct": percent(decay),
    })
    return rows


def compare_rows(a: SystemTrace, b: SystemTrace) -> list[dict]:
    cmp = trace_compare(a, b)
    rows = [
        {
            "turn": i + 1, "vision_alloc_delta": cmp.vision_alloc[i], "visual_alloc_delta": cmp.visual_alloc[i],
            "unimodal_frac_delta": cmp.unimodal_frac[i], "h_delta": cmp.severity[i],
        }
        for i in range(a.turns)
    ]
    means = cmp.means()
    rows.append({
        "turn": None, "vision_alloc_delta": means["vision_alloc"], "visual_alloc_delta": means["visual_alloc"],
        "unimodal_frac_delta": means["unimodal_frac"], "h_delta": means["severity"],
    })
    return rows


# --------------------------------------------------------------- strategies


def strategy_rows(cfg: ExperimentConfig, buffers: Iterable[int] = BUFFER_SWEEP) -> list[dict]:
    """Attention-score vs key-norm selection for every forward pass of one run."""
    mode = cfg.modes[-1]
    trace = run_traces(cfg, keep_analysis=True)[mode]
    params = cfg.selection_params()
    band = trace.middle_band
    rows = []
    for log in trace.logs:
        attn_set = select_unimodal(log.trajectories, params)
        norms = middle_key_norms(log.result, log.vision_index, band)
        for b in buffers:
            kn = select_by_keynorm(norms, log.vision_index, log.grid, params, buffer=b)
            rows.append({
                "mode": mode.value, "turn": log.turn, "agent": log.agent, "buffer": b,
                "attn_size": len(attn_set), "keynorm_size": len(kn),
                "overlap": overlap(attn_set, kn),
                "attn_set": ";".join(str(i) for i in sorted(attn_set)),
                "keynorm_set": ";".join(str(i) for i in sorted(kn)),
            })
    return rows


def selections(cfg: ExperimentConfig) -> dict[str, list[int]]:
    """Grid cells chosen by each strategy on the entry agent's prompt."""
    env, pr = probe(cfg)
    params = cfg.selection_params()
    band = env.model.bands["middle"]
    g = env.model.config.grid_side
    cell_of = {int(v): int(r * g + c) for v, (r, c) in zip(pr.vision, pr.seq.grid[pr.vision])}
    attn = select_unimodal(middle_trajectories(pr.base, pr.vision, band), params)
    norms = middle_key_norms(pr.base, pr.vision, band)
    kn = select_by_keynorm(norms, pr.vision, pr.seq.grid[pr.vision], params)
    out = {
        "attention": [cell_of[i] for i in attn],
        "keynorm": [cell_of[i] for i in kn],
        "random": select_random(len(attn), g, [cfg.seed, 0xD40B], params),
    }
    for label in ("inactive", "rise", "fall"):
        out[label] = [cell_of[i] for i in pr.subsets[label]]
    return out

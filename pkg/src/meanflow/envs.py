"""Shipped tabular environments with feasible safe policies by construction.

Two small MDPs exercise the safety layer end to end. SafeResource is a
renewable-stock management problem where extracting faster than the stock
regenerates incurs safety cost; SafeChain is a corridor with a tempting
shortcut whose one-shot discounted cost already exceeds the budget, so any
shortcut from a fresh budget is a violation. Both keep a zero-cost action
available in every state, which certifies that a safe policy exists without
any search. The registry entries record those structural guarantees.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mdp import (
    AugmentedMdp,
    BarrierSpec,
    DiscretizedMdp,
    MdpValidationError,
    SafetySpec,
    discretize,
)

RESOURCE_REGEN = {0: 0.2, 1: 0.5, 2: 0.3}
RESOURCE_COST_RATE = 0.35
CHAIN_SHORTCUT_COST = 1.2
DEFAULT_BARRIER_SCALE = 4.0
DEFAULT_BARRIER_CAP = 20.0


@dataclass
class EnvRegistryEntry:
    """Registry row: key, builder, and the structural guarantees it ships."""

    key: str
    builder: Callable[..., AugmentedMdp]
    notes: str


def safe_resource(
    barrier_scale: float = DEFAULT_BARRIER_SCALE,
    m_bar: float = DEFAULT_BARRIER_CAP,
    z_cells: int = 25,
) -> AugmentedMdp:
    """Renewable stock in {0..8} with five extraction levels.

    Action k harvests take = min(k, stock) for utility 0.5 sqrt(take); the
    stock then regenerates by 0, 1, or 2 units with probabilities 0.2, 0.5,
    0.3 and is clipped to [0, 8]. Extracting beyond half the current stock
    costs g = 0.35 (k - floor(stock / 2))_+ against a budget of 1. Action 0
    is free everywhere, so the never-extract policy is safe for all time.
    """
    n_s, n_a = 9, 5
    p = np.zeros((n_s, n_a, n_s))
    u = np.zeros((n_s, n_a))
    g = np.zeros((1, n_s, n_a))
    for s in range(n_s):
        for k in range(n_a):
            take = min(k, s)
            u[s, k] = 0.5 * np.sqrt(take)
            g[0, s, k] = RESOURCE_COST_RATE * max(0, k - s // 2)
            for regen, prob in RESOURCE_REGEN.items():
                p[s, k, min(max(s - take + regen, 0), n_s - 1)] += prob
    p0 = np.zeros(n_s)
    p0[8] = 1.0
    return AugmentedMdp(
        P=p,
        u=u,
        rho=np.full(n_a, 1.0 / n_a),
        beta=0.9,
        safety=SafetySpec(g=g, b=np.array([1.0]), beta_g=np.array([0.9])),
        barrier=BarrierSpec(c=barrier_scale, m_bar=m_bar),
        p0=p0,
        z_grid_spec=[(-0.35, 1.25, z_cells)],
        state_labels=[f"stock{s}" for s in range(n_s)],
        action_labels=[f"extract{k}" for k in range(n_a)],
    )


def safe_chain(
    barrier_scale: float = DEFAULT_BARRIER_SCALE,
    m_bar: float = DEFAULT_BARRIER_CAP,
    z_cells: int = 12,
) -> AugmentedMdp:
    """Five-state corridor with a shortcut that blows the safety budget.

    Actions are advance, shortcut, stay. Advance moves one step toward the
    goal state 4, shortcut jumps straight there, stay loiters. The goal pays
    1 per step under every action; before the goal, advance pays 0, stay
    0.05, and the shortcut a tempting 2. Only the shortcut carries safety
    cost, and its cost 1.2 exceeds the budget 1 outright, so a shortcut off
    a fresh budget always violates. The safe optimum walks the corridor:
    value beta^4 / (1 - beta) from the start state.
    """
    n_s, n_a = 5, 3
    p = np.zeros((n_s, n_a, n_s))
    u = np.zeros((n_s, n_a))
    g = np.zeros((1, n_s, n_a))
    for s in range(n_s):
        p[s, 0, min(s + 1, n_s - 1)] = 1.0
        p[s, 1, n_s - 1] = 1.0
        p[s, 2, s] = 1.0
        if s == n_s - 1:
            u[s, :] = 1.0
        else:
            u[s, 0] = 0.0
            u[s, 1] = 2.0
            u[s, 2] = 0.05
        g[0, s, 1] = CHAIN_SHORTCUT_COST
    p0 = np.zeros(n_s)
    p0[0] = 1.0
    return AugmentedMdp(
        P=p,
        u=u,
        rho=np.full(n_a, 1.0 / n_a),
        beta=0.9,
        safety=SafetySpec(g=g, b=np.array([1.0]), beta_g=np.array([0.9])),
        barrier=BarrierSpec(c=barrier_scale, m_bar=m_bar),
        p0=p0,
        z_grid_spec=[(-0.35, 1.25, z_cells)],
        state_labels=[f"cell{s}" for s in range(n_s)],
        action_labels=["advance", "shortcut", "stay"],
    )


ENV_REGISTRY = {
    "safe-resource": EnvRegistryEntry(
        key="safe-resource",
        builder=safe_resource,
        notes=(
            "finite state and action spaces; bounded utility in [0, 1]; "
            "safety costs nonnegative and bounded by 1.4; extraction level 0 "
            "has zero cost in every state, so a feasible safe policy exists "
            "by construction"
        ),
    ),
    "safe-chain": EnvRegistryEntry(
        key="safe-chain",
        builder=safe_chain,
        notes=(
            "finite deterministic chain; bounded utility in [0, 2]; advance "
            "and stay carry zero safety cost in every state, so the walk-the-"
            "corridor policy is feasible and safe; the shortcut's one-shot "
            "cost 1.2 exceeds the budget 1, so it violates from a fresh budget"
        ),
    ),
}


def make_env(key: str, **overrides) -> AugmentedMdp:
    """Build a registered environment, forwarding builder overrides."""
    if key not in ENV_REGISTRY:
        raise MdpValidationError(
            f"unknown environment {key!r}; known: {sorted(ENV_REGISTRY)}"
        )
    return ENV_REGISTRY[key].builder(**overrides)


def discretized_env(key: str, **overrides) -> DiscretizedMdp:
    """Registered environment with budgets folded onto the finite z grid."""
    return discretize(make_env(key, **overrides))

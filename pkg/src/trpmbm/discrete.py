"""Finite-state-space version of the branching-tree prediction rule.

Runs the same per-branch prediction as the Gaussian filter (survival mass
redistribution over end times, one new potential branch per spawning mode
per parent) but with arbitrary state-dependent probabilities on a finite
state space, where expectations are exact sums.  Exists so the prediction
rule can be cross-checked against exhaustive enumeration of the joint
transition on toy problems; the Gaussian filter specialises the same
formulas to constant probabilities and linear kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

StateSeq = tuple[int, ...]


@dataclass(frozen=True)
class DiscreteEndCase:
    """Branch ends at a known generation: probability, marks, state law."""

    beta: float
    genealogy: tuple[int, ...]  # alive prefix, tree-relative
    dist: dict[StateSeq, float]  # state sequence -> probability (sums to 1)


@dataclass(frozen=True)
class DiscreteBranchDensity:
    components: dict[int, DiscreteEndCase]  # end generation -> case

    def beta(self, gen: int) -> float:
        case = self.components.get(gen)
        return case.beta if case is not None else 0.0


@dataclass(frozen=True)
class DiscreteSlot:
    """Bernoulli branch: existence probability and end-time mixture."""

    r: float
    density: DiscreteBranchDensity | None


@dataclass(frozen=True)
class DiscreteModel:
    """State-dependent mode probabilities and column-stochastic kernels.

    ``survive_prob[x]`` and ``survive_kernel[y, x]`` drive the main mode;
    ``spawn[m]`` holds (prob[x], kernel[y, x]) for spawning mode m+2.
    """

    survive_prob: np.ndarray
    survive_kernel: np.ndarray
    spawn: tuple[tuple[np.ndarray, np.ndarray], ...] = ()

    @property
    def n_states(self) -> int:
        return len(self.survive_prob)


def _last_state_marginal(case: DiscreteEndCase, n_states: int) -> np.ndarray:
    marg = np.zeros(n_states)
    for seq, p in case.dist.items():
        marg[seq[-1]] += p
    return marg


def predict_slots(
    slots: list[DiscreteSlot], model: DiscreteModel, new_gen: int
) -> list[DiscreteSlot]:
    """Advance a tree's branch slots from generation new_gen-1 to new_gen.

    Output order: the surviving version of every input slot, then one
    spawned slot per (mode, input slot) with mode-major ordering, i.e. the
    spawn of parent j under mode m lands at index j + (m-1) * len(slots).
    """
    survived: list[DiscreteSlot] = []
    for slot in slots:
        if slot.density is None:
            survived.append(slot)
            continue
        prev = slot.density.components.get(new_gen - 1)
        if prev is None or prev.beta == 0.0:
            survived.append(slot)  # nothing alive to move forward
            continue
        marg = _last_state_marginal(prev, model.n_states)
        p_s = float(model.survive_prob @ marg)
        cases = dict(slot.density.components)
        if p_s < 1.0:
            die = {
                seq: p * (1.0 - model.survive_prob[seq[-1]]) / (1.0 - p_s)
                for seq, p in prev.dist.items()
            }
            cases[new_gen - 1] = DiscreteEndCase(
                prev.beta * (1.0 - p_s), prev.genealogy, die
            )
        else:
            del cases[new_gen - 1]
        if p_s > 0.0:
            grow: dict[StateSeq, float] = {}
            for seq, p in prev.dist.items():
                x = seq[-1]
                w = p * model.survive_prob[x]
                if w == 0.0:
                    continue
                for y in range(model.n_states):
                    q = w * model.survive_kernel[y, x] / p_s
                    if q > 0.0:
                        grow[seq + (y,)] = grow.get(seq + (y,), 0.0) + q
            cases[new_gen] = DiscreteEndCase(
                prev.beta * p_s, prev.genealogy + (1,), grow
            )
        survived.append(slot.__class__(slot.r, DiscreteBranchDensity(cases)))

    spawned: list[DiscreteSlot] = []
    for mi, (prob, kernel) in enumerate(model.spawn):
        mode = mi + 2
        for slot in slots:
            prev = (
                slot.density.components.get(new_gen - 1)
                if slot.density is not None
                else None
            )
            if prev is None:
                spawned.append(DiscreteSlot(0.0, None))
                continue
            marg = _last_state_marginal(prev, model.n_states)
            mass = float(prob @ marg)
            r_new = slot.r * mass * prev.beta
            if mass == 0.0:
                spawned.append(DiscreteSlot(0.0, None))
                continue
            child = kernel @ (prob * marg) / mass
            dist = {(y,): float(child[y]) for y in range(model.n_states) if child[y] > 0}
            density = DiscreteBranchDensity(
                {new_gen: DiscreteEndCase(1.0, prev.genealogy + (mode,), dist)}
            )
            spawned.append(DiscreteSlot(r_new, density))
    return survived + spawned


def slot_marginal(slot: DiscreteSlot) -> dict:
    """Bernoulli marginal as {(genealogy, states): prob}; missing mass is empty."""
    out: dict = {}
    if slot.density is None or slot.r == 0.0:
        return out
    for case in slot.density.components.values():
        for seq, p in case.dist.items():
            w = slot.r * case.beta * p
            if w != 0.0:
                key = (case.genealogy, seq)
                out[key] = out.get(key, 0.0) + w
    return out

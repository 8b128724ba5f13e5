"""Multi-Bernoulli-mixture recursion over sets of tree trajectories.

The posterior splits into a Poisson intensity for never-detected trees and
a weighted mixture of global hypotheses over Bernoulli trees.  Each tree
holds branch slots; each slot holds local hypotheses (one per measurement
history) with a weight, an existence probability and an end-time mixture
of Gaussians over the branch's state sequence.

One filtering step runs: predict (branch survival mass redistribution plus
one new potential branch per spawning mode per parent slot), window
truncation, measurement update (missed/detected local hypotheses, new
Bernoulli trees off every measurement), global-hypothesis formation via
k-best assignment per parent hypothesis, and pruning.

Three operating modes share the recursion:
  kind='trpmbm'  Poisson birth into the undetected-tree intensity.
  kind='trmbm'   zero intensity, one birth Bernoulli tree per step.
  kind='tpmbm'   'trpmbm' with the spawning modes removed.

All weights live in the log domain.  Structures are immutable; every
operation returns a new posterior and shares unchanged pieces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .assignment import murty_kbest
from .gaussian import (
    BranchDensity,
    EndCase,
    GaussianBranchComponent,
    PPPComponent,
    _chol_with_jitter,
    innovation,
    l_scan_truncate,
    l_scan_truncate_component,
    predict_augment_survive,
    spawn_component,
    update_last_state,
)
from .models import NX, ScenarioConfig
from .trees import Branch, TreeTrajectory

LOG_FLOOR = -700.0  # stand-in for log 0 where a finite baseline is required
_LOG2PI = math.log(2.0 * math.pi)

KINDS = ("trpmbm", "trmbm", "tpmbm")


def _log(x: float) -> float:
    return math.log(x) if x > 0.0 else -math.inf


def _gate_whiten(S: np.ndarray, innovs: np.ndarray, gate: float):
    """Gated rows, their squared Mahalanobis distances, and 0.5*log|S|.

    innovs has one innovation per row; 2x2 innovation covariances take the
    closed form, anything else goes through Cholesky.
    """
    if S.shape == (2, 2):
        a, b, c = S[0, 0], S[0, 1], S[1, 1]
        det = a * c - b * b
        if det <= 0.0:
            S = S + JITTER_EYE2
            a, c = S[0, 0], S[1, 1]
            det = a * c - b * b
        u, v = innovs[:, 0], innovs[:, 1]
        d2 = (c * u * u - 2.0 * b * u * v + a * v * v) / det
        logdet = 0.5 * math.log(det)
    else:
        L = _chol_with_jitter(S)
        white = solve_triangular(L, innovs.T, lower=True)
        d2 = (white**2).sum(axis=0)
        logdet = float(np.log(np.diag(L)).sum())
    gated = np.flatnonzero(d2 <= gate)
    return gated, d2[gated], logdet


JITTER_EYE2 = 1e-9 * np.eye(2)


def _inv_small(S: np.ndarray) -> np.ndarray:
    """Inverse of a tiny symmetric matrix; closed form for 2x2."""
    if S.shape == (2, 2):
        a, b, c = S[0, 0], S[0, 1], S[1, 1]
        det = a * c - b * b
        return np.array([[c, -b], [-b, a]]) / det
    return np.linalg.inv(S)


@dataclass(frozen=True)
class LocalHyp:
    """One measurement history of a branch slot."""

    log_w: float
    r: float
    density: BranchDensity | None  # None when r == 0 and nothing is tracked
    assoc: frozenset  # {(step, measurement index)}


@dataclass(frozen=True)
class BranchSlot:
    branch_id: tuple[int, ...]  # genealogy prefix up to last spawning, tree-relative
    start_time: int  # absolute step of the branch's first state
    hyps: tuple[LocalHyp, ...]


@dataclass(frozen=True)
class BernoulliTree:
    start_time: int
    slots: tuple[BranchSlot, ...]


@dataclass(frozen=True)
class GlobalHyp:
    log_w: float
    selection: tuple[tuple[int, ...], ...]  # per tree, per slot: local hyp index


@dataclass(frozen=True)
class Posterior:
    step: int
    ppp: tuple[PPPComponent, ...]
    trees: tuple[BernoulliTree, ...]
    hypotheses: tuple[GlobalHyp, ...]


def initial_posterior() -> Posterior:
    return Posterior(0, (), (), (GlobalHyp(0.0, ()),))


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def ppp_predict(
    ppp: tuple[PPPComponent, ...],
    cfg: ScenarioConfig,
    k: int,
    include_births: bool = True,
) -> tuple[PPPComponent, ...]:
    """Survival-thinned continuation of every intensity term, plus births."""
    surv = cfg.survival
    out = []
    if surv.prob > 0.0:
        log_ps = math.log(surv.prob)
        for comp in ppp:
            moved = predict_augment_survive(
                comp.comp, surv.F, surv.offset_at(comp.comp.last_mean), surv.Q
            )
            out.append(PPPComponent(comp.log_weight + log_ps, comp.start_time, moved))
    if include_births:
        for b in cfg.births:
            gauss = GaussianBranchComponent(
                (1,), np.asarray(b.mean, dtype=float), np.asarray(b.cov, dtype=float), NX
            )
            out.append(PPPComponent(_log(b.weight), k, gauss))
    return tuple(out)


def tree_predict(
    tree: BernoulliTree, cfg: ScenarioConfig, k: int
) -> tuple[BernoulliTree, list[int]]:
    """Advance one Bernoulli tree to step k.

    Surviving slots keep their existence; the alive end-time mass splits
    into death-at-(k-1) and alive-at-k with a Kalman-augmented component.
    Every (spawning mode, parent slot) pair appends a new slot whose local
    hypotheses parallel the parent's, each existing with probability
    r * p_spawn * beta(k-1).  Frozen or dead hypotheses pass through
    untouched; slots with no alive existence mass produce no spawn slots
    (every spawn hypothesis would carry exactly zero existence).

    Returns the advanced tree and, for the appended slots in order, the
    index of the parent slot each one was spawned from.
    """
    surv = cfg.survival
    p_s = surv.prob
    new_slots: list[BranchSlot] = []
    spawnable: list[int] = []
    any_change = False
    for ji, slot in enumerate(tree.slots):
        hyps = []
        alive = False
        changed = False
        for h in slot.hyps:
            prev = h.density.components.get(k - 1) if h.density is not None else None
            if prev is None or prev.beta == 0.0:
                hyps.append(h)
                continue
            if h.r > 0.0:
                alive = True
            cases = dict(h.density.components)
            if p_s < 1.0:
                cases[k - 1] = EndCase(prev.beta * (1.0 - p_s), prev.comp)
            else:
                del cases[k - 1]
            if p_s > 0.0:
                moved = predict_augment_survive(
                    prev.comp, surv.F, surv.offset_at(prev.comp.last_mean), surv.Q
                )
                cases[k] = EndCase(prev.beta * p_s, moved)
            hyps.append(
                LocalHyp(h.log_w, h.r, BranchDensity(h.density.start_time, cases), h.assoc)
            )
            changed = True
        if alive:
            spawnable.append(ji)
        any_change = any_change or changed
        new_slots.append(
            slot if not changed else BranchSlot(slot.branch_id, slot.start_time, tuple(hyps))
        )

    parent_of: list[int] = []
    for mode in cfg.spawn_modes:
        for ji in spawnable:
            slot = tree.slots[ji]
            # deterministic alive genealogy of the parent at step k-1
            pad = (k - 1 - tree.start_time + 1) - len(slot.branch_id)
            child_id = slot.branch_id + (1,) * pad + (mode.index,)
            hyps = []
            for h in slot.hyps:
                prev = (
                    h.density.components.get(k - 1) if h.density is not None else None
                )
                if prev is None:
                    hyps.append(LocalHyp(0.0, 0.0, None, frozenset()))
                    continue
                r_new = h.r * mode.prob * prev.beta
                predicted_mean = surv.F @ prev.comp.last_mean + surv.offset_at(
                    prev.comp.last_mean
                )
                child = spawn_component(
                    prev.comp, mode.F, mode.offset_at(predicted_mean), mode.Q, mode.index
                )
                density = BranchDensity(k, {k: EndCase(1.0, child)})
                hyps.append(LocalHyp(0.0, r_new, density, frozenset()))
            new_slots.append(BranchSlot(child_id, k, tuple(hyps)))
            parent_of.append(ji)
    if not any_change and not parent_of:
        return tree, parent_of
    return BernoulliTree(tree.start_time, tuple(new_slots)), parent_of


def _birth_tree(cfg: ScenarioConfig, k: int) -> BernoulliTree:
    """One Bernoulli tree per birth term (multi-Bernoulli birth mode)."""
    slots = []
    for b in cfg.births:
        gauss = GaussianBranchComponent(
            (1,), np.asarray(b.mean, dtype=float), np.asarray(b.cov, dtype=float), NX
        )
        density = BranchDensity(k, {k: EndCase(1.0, gauss)})
        slots.append(
            BranchSlot((1,), k, (LocalHyp(0.0, min(b.weight, 1.0), density, frozenset()),))
        )
    return BernoulliTree(k, tuple(slots))


def predict(post: Posterior, cfg: ScenarioConfig, kind: str = "trpmbm") -> Posterior:
    k = post.step + 1
    results = [tree_predict(t, cfg, k) for t in post.trees]
    trees = tuple(r[0] for r in results)
    hypotheses = tuple(
        GlobalHyp(
            g.log_w,
            tuple(
                s + tuple(s[p] for p in parents) if parents else s
                for s, (_, parents) in zip(g.selection, results)
            ),
        )
        for g in post.hypotheses
    )
    if kind == "trmbm":
        ppp = ()
        birth = _birth_tree(cfg, k)
        if birth.slots:
            trees = trees + (birth,)
            hypotheses = tuple(
                GlobalHyp(g.log_w, g.selection + ((0,) * len(birth.slots),))
                for g in hypotheses
            )
    else:
        ppp = ppp_predict(post.ppp, cfg, k, include_births=True)
    return Posterior(k, ppp, trees, hypotheses)


def truncate_window(post: Posterior, lscan: int) -> Posterior:
    ppp = tuple(
        replace(c, comp=l_scan_truncate_component(c.comp, lscan)) for c in post.ppp
    )
    trees = []
    for tree in post.trees:
        slots = []
        tree_changed = False
        for slot in tree.slots:
            hyps = []
            changed = False
            for h in slot.hyps:
                if h.density is None:
                    hyps.append(h)
                    continue
                density = l_scan_truncate(h.density, lscan)
                if density is h.density:
                    hyps.append(h)
                else:
                    hyps.append(replace(h, density=density))
                    changed = True
            slots.append(
                slot if not changed else replace(slot, hyps=tuple(hyps))
            )
            tree_changed = tree_changed or changed
        trees.append(tree if not tree_changed else replace(tree, slots=tuple(slots)))
    return replace(post, ppp=ppp, trees=tuple(trees))


# ---------------------------------------------------------------------------
# Update
# ---------------------------------------------------------------------------


@dataclass
class UpdateMaps:
    """Bookkeeping linking predicted hypotheses to their updated children.

    Only hypotheses with nonzero detectable mass appear in miss_logfactor;
    absent keys mean a missed-detection factor of exactly 1 (log 0).
    """

    n_prev_trees: int
    miss_logfactor: dict  # (tree, slot, hyp) -> log(1 - r beta(k) pD), != 0 only
    det_meas: dict  # (tree, slot, hyp) -> list of gated measurement indices
    det_index: dict  # (tree, slot, hyp, meas) -> updated hyp index
    det_logratio: dict  # (tree, slot, hyp, meas) -> log w_det - log w_miss
    new_tree_logw: np.ndarray  # per measurement: log(clutter + ppp mass)


def update(
    post: Posterior, Z: np.ndarray, cfg: ScenarioConfig
) -> tuple[Posterior, UpdateMaps]:
    """Measurement update: expand local hypotheses, spawn new Bernoulli trees.

    Missed-detection versions sit at the same index as their predicted
    hypothesis, so previous global selections stay valid until
    form_hypotheses rewires the detected ones.
    """
    k = post.step
    meas = cfg.measurement
    Z = np.asarray(Z, dtype=float).reshape(-1, meas.H.shape[0])
    m_k = Z.shape[0]
    p_d = meas.p_detect
    gate = cfg.filters.gate
    log_clutter = _log(meas.clutter_density)

    # --- Poisson intensity: per-measurement mass and thinning ---------------
    ppp_loglik = np.full((len(post.ppp), m_k), -np.inf)
    for qi, comp in enumerate(post.ppp):
        if not np.isfinite(comp.log_weight) or m_k == 0:
            continue
        zhat, S = innovation(comp.comp, meas.H, meas.R)
        gated, white2, logdet = _gate_whiten(S, Z - zhat, gate)
        loglik = -0.5 * white2 - logdet - 0.5 * len(zhat) * _LOG2PI
        ppp_loglik[qi, gated] = comp.log_weight + _log(p_d) + loglik
    new_tree_logw = np.empty(m_k)
    new_trees = []
    for m in range(m_k):
        col = ppp_loglik[:, m]
        total = float(logsumexp(col)) if len(col) else -np.inf
        log_w2 = float(np.logaddexp(log_clutter, total))
        new_tree_logw[m] = log_w2
        if np.isfinite(total):
            r2 = float(math.exp(total - log_w2))
            best = max(
                range(len(post.ppp)),
                key=lambda q: (col[q], post.ppp[q].start_time, q),
            )
            comp = post.ppp[best]
            upd, _ = update_last_state(comp.comp, Z[m], meas.H, meas.R)
            density = BranchDensity(comp.start_time, {k: EndCase(1.0, upd)})
            start = comp.start_time
        else:
            r2, density, start = 0.0, None, k
        hyp_none = LocalHyp(0.0, 0.0, None, frozenset())
        hyp_exist = LocalHyp(log_w2, r2, density, frozenset({(k, m)}))
        new_trees.append(
            BernoulliTree(start, (BranchSlot((1,), start, (hyp_none, hyp_exist)),))
        )
    if p_d >= 1.0:
        ppp = ()
    else:
        thin = _log(1.0 - p_d)
        ppp = tuple(replace(c, log_weight=c.log_weight + thin) for c in post.ppp)

    # --- Bernoulli trees: missed and detected local hypotheses --------------
    miss_logfactor: dict = {}
    det_meas: dict = {}
    det_index: dict = {}
    det_logratio: dict = {}
    trees = []
    for ti, tree in enumerate(post.trees):
        slots = []
        tree_changed = False
        for ji, slot in enumerate(tree.slots):
            if all(
                h.density is None or h.r <= 0.0 or h.density.beta(k) <= 0.0
                for h in slot.hyps
            ):
                slots.append(slot)  # nothing detectable: untouched
                continue
            tree_changed = True
            # one missed hypothesis per predicted one (same index), then the
            # detected hypotheses appended behind the full missed block
            n_missed = len(slot.hyps)
            hyps: list[LocalHyp] = []
            detected: list[LocalHyp] = []
            for bi, h in enumerate(slot.hyps):
                beta_k = h.density.beta(k) if h.density is not None else 0.0
                detectable = h.r * beta_k * p_d
                if detectable <= 0.0:
                    hyps.append(h)
                    continue
                miss_factor = 1.0 - detectable
                norm = 1.0 - p_d * beta_k
                if norm <= 0.0:
                    # detection was certain: the missed branch cannot exist
                    missed = LocalHyp(h.log_w + _log(miss_factor), 0.0, None, h.assoc)
                else:
                    cases = {}
                    for kappa, case in h.density.components.items():
                        beta = case.beta / norm
                        if kappa == k:
                            beta = case.beta * (1.0 - p_d) / norm
                        if beta > 0.0:
                            cases[kappa] = EndCase(beta, case.comp)
                    r_miss = h.r * (1.0 - beta_k * p_d) / miss_factor
                    missed = LocalHyp(
                        h.log_w + _log(miss_factor),
                        r_miss,
                        BranchDensity(h.density.start_time, cases),
                        h.assoc,
                    )
                hyps.append(missed)
                log_miss = max(_log(miss_factor), LOG_FLOOR)
                miss_logfactor[(ti, ji, bi)] = log_miss
                if m_k == 0:
                    continue

                case_k = h.density.components[k]
                comp_k = case_k.comp
                nx = comp_k.nx
                zhat = meas.H @ comp_k.mean[-nx:]
                S = meas.H @ comp_k.cov[-nx:, -nx:] @ meas.H.T + meas.R
                gated, white2, logdet = _gate_whiten(S, Z - zhat, gate)
                if gated.size == 0:
                    continue
                logliks = -0.5 * white2 - logdet - 0.5 * len(zhat) * _LOG2PI
                # shared posterior covariance; means vary with the measurement
                PHt = comp_k.cov[:, -nx:] @ meas.H.T
                K = PHt @ _inv_small(S)
                cov_post = comp_k.cov - K @ S @ K.T
                cov_post = (cov_post + cov_post.T) / 2.0
                log_base = h.log_w + _log(h.r) + _log(beta_k) + _log(p_d)
                innovs = Z[gated] - zhat
                base_key = (ti, ji, bi)
                det_meas[base_key] = [int(m) for m in gated]
                for pos, m in enumerate(gated):
                    mean_post = comp_k.mean + K @ innovs[pos]
                    comp_post = replace(comp_k, mean=mean_post, cov=cov_post)
                    det = LocalHyp(
                        log_base + logliks[pos],
                        1.0,
                        BranchDensity(h.density.start_time, {k: EndCase(1.0, comp_post)}),
                        h.assoc | {(k, int(m))},
                    )
                    det_index[(ti, ji, bi, int(m))] = n_missed + len(detected)
                    det_logratio[(ti, ji, bi, int(m))] = (
                        log_base + logliks[pos] - (h.log_w + log_miss)
                    )
                    detected.append(det)
            slots.append(BranchSlot(slot.branch_id, slot.start_time, tuple(hyps + detected)))
        trees.append(
            tree if not tree_changed else BernoulliTree(tree.start_time, tuple(slots))
        )

    maps = UpdateMaps(
        len(post.trees), miss_logfactor, det_meas, det_index, det_logratio, new_tree_logw
    )
    return (
        Posterior(k, ppp, tuple(trees) + tuple(new_trees), post.hypotheses),
        maps,
    )


# ---------------------------------------------------------------------------
# Global hypothesis formation
# ---------------------------------------------------------------------------


def form_hypotheses(
    post: Posterior, maps: UpdateMaps, m_k: int, cfg: ScenarioConfig
) -> Posterior:
    """Children of every predicted global hypothesis via k-best assignment.

    Rows are this step's measurements; columns are detectable selected
    local hypotheses plus one new-tree column per measurement.  Parents
    sharing the same detectable selection share one assignment problem.
    Children are merged on identical selections and renormalised.
    """
    n_hyp = cfg.filters.n_hyp

    # Parents sharing the same detectable selected hypotheses (those with at
    # least one gated measurement) share the same assignment problem.
    groups: dict = {}
    baselines = {}
    for gi, g in enumerate(post.hypotheses):
        cols = []
        baseline = 0.0
        for (ti, ji, bi), log_miss in maps.miss_logfactor.items():
            if g.selection[ti][ji] == bi:
                baseline += log_miss
                if (ti, ji, bi) in maps.det_meas:
                    cols.append((ti, ji, bi))
        baselines[gi] = baseline
        cols.sort()
        groups.setdefault(tuple(cols), []).append(gi)

    children: dict = {}

    def add_child(log_w: float, selection) -> None:
        prev = children.get(selection)
        children[selection] = (
            np.logaddexp(prev, log_w) if prev is not None else log_w
        )

    for cols, members in groups.items():
        n_cols = len(cols)
        free = sorted({m for key in cols for m in maps.det_meas[key]})
        free_pos = {m: i for i, m in enumerate(free)}
        n_free = len(free)
        # rows with no gated column are forced onto their own new-tree column
        forced_cost = -sum(
            maps.new_tree_logw[m] for m in range(m_k) if m not in free_pos
        )
        C = np.full((n_free, n_cols + n_free), np.inf)
        for ci, key in enumerate(cols):
            for m in maps.det_meas[key]:
                C[free_pos[m], ci] = -maps.det_logratio[key + (m,)]
        for i, m in enumerate(free):
            C[i, n_cols + i] = -maps.new_tree_logw[m]

        k_max = max(
            max(1, math.ceil(n_hyp * math.exp(post.hypotheses[gi].log_w)))
            for gi in members
        )
        solutions = (
            murty_kbest(C, k_max) if n_free else [(np.zeros(0, dtype=int), 0.0)]
        )

        for gi in members:
            g = post.hypotheses[gi]
            k_want = max(1, math.ceil(n_hyp * math.exp(g.log_w)))
            for assignment, cost in solutions[:k_want]:
                log_w = g.log_w + baselines[gi] - (forced_cost + cost)
                sel = list(g.selection)
                assigned_new = [True] * m_k
                for row_pos, col_pos in enumerate(assignment):
                    if col_pos >= n_cols:
                        continue
                    m = free[row_pos]
                    assigned_new[m] = False
                    ti, ji, bi = cols[col_pos]
                    row = list(sel[ti])
                    row[ji] = maps.det_index[(ti, ji, bi, m)]
                    sel[ti] = tuple(row)
                for m in range(m_k):
                    sel.append((1,) if assigned_new[m] else (0,))
                add_child(log_w, tuple(sel))

    if not children:
        return replace(post, hypotheses=())
    keys = sorted(children)
    logs = np.array([children[s] for s in keys])
    logs -= logsumexp(logs)
    hyps = tuple(GlobalHyp(float(w), s) for s, w in zip(keys, logs))
    return replace(post, hypotheses=hyps)


# ---------------------------------------------------------------------------
# Pruning and estimation
# ---------------------------------------------------------------------------


def prune(post: Posterior, cfg: ScenarioConfig) -> Posterior:
    """Hypothesis, Bernoulli, intensity and end-time pruning, then remapping."""
    f = cfg.filters
    k = post.step
    if not post.hypotheses:
        return Posterior(post.step, (), (), ())

    hyps = [g for g in post.hypotheses if g.log_w >= _log(f.gamma_mbm)]
    if not hyps:
        hyps = [max(post.hypotheses, key=lambda g: g.log_w)]
    hyps.sort(key=lambda g: (-g.log_w, g.selection))
    hyps = hyps[: f.n_hyp]

    keep_ppp = tuple(c for c in post.ppp if c.log_weight >= _log(f.gamma_ppp))

    # referenced local hypotheses; hypotheses mostly share per-tree selection
    # rows (children only copy rows they touch), so work per distinct row once
    n_trees = len(post.trees)
    tree_rows: list[dict] = [dict() for _ in range(n_trees)]
    for g in hyps:
        for ti, row in enumerate(g.selection):
            tree_rows[ti][row] = None
    used: dict[tuple[int, int], set[int]] = {}
    for ti, rows in enumerate(tree_rows):
        for row in rows:
            for ji, bi in enumerate(row):
                used.setdefault((ti, ji), set()).add(bi)

    def shrink_hyp(h: LocalHyp) -> LocalHyp:
        if 0.0 < h.r < f.gamma_bern:
            h = LocalHyp(h.log_w, 0.0, None, h.assoc)
        if h.density is not None:
            beta_k = h.density.beta(k)
            if 0.0 < beta_k < f.gamma_alive:
                rest = {
                    kappa: EndCase(case.beta / (1.0 - beta_k), case.comp)
                    for kappa, case in h.density.components.items()
                    if kappa != k
                }
                if rest:
                    h = replace(h, density=BranchDensity(h.density.start_time, rest))
                else:
                    h = LocalHyp(h.log_w, 0.0, None, h.assoc)
        return h

    new_trees = []
    tree_map: dict[int, int] = {}
    slot_maps: dict[tuple[int, int], dict[int, int]] = {}
    slot_keep: dict[int, list[int]] = {}
    for ti, tree in enumerate(post.trees):
        slots = []
        kept_slots = []
        for ji, slot in enumerate(tree.slots):
            refs = sorted(used.get((ti, ji), ()))
            if not refs:
                continue
            new_hyps = [shrink_hyp(slot.hyps[bi]) for bi in refs]
            if all(h.r == 0.0 for h in new_hyps):
                continue
            slot_maps[(ti, ji)] = {bi: pos for pos, bi in enumerate(refs)}
            slots.append(BranchSlot(slot.branch_id, slot.start_time, tuple(new_hyps)))
            kept_slots.append(ji)
        if slots:
            tree_map[ti] = len(new_trees)
            slot_keep[ti] = kept_slots
            new_trees.append(BernoulliTree(tree.start_time, tuple(slots)))

    kept_tis = sorted(tree_map)
    for ti in kept_tis:
        rows = tree_rows[ti]
        for row in rows:
            rows[row] = tuple(slot_maps[(ti, ji)][row[ji]] for ji in slot_keep[ti])

    remapped: dict = {}
    for g in hyps:
        key = tuple(tree_rows[ti][g.selection[ti]] for ti in kept_tis)
        prev = remapped.get(key)
        remapped[key] = np.logaddexp(prev, g.log_w) if prev is not None else g.log_w

    keys = sorted(remapped)
    logs = np.array([remapped[s] for s in keys])
    logs -= logsumexp(logs)
    order = sorted(range(len(keys)), key=lambda i: (-logs[i], keys[i]))
    new_hyps = tuple(GlobalHyp(float(logs[i]), keys[i]) for i in order)
    return Posterior(post.step, keep_ppp, tuple(new_trees), new_hyps)


def best_hypothesis(post: Posterior) -> GlobalHyp:
    return max(post.hypotheses, key=lambda g: (g.log_w, g.selection))


def estimate(post: Posterior, cfg: ScenarioConfig) -> list[TreeTrajectory]:
    """Branches with confident existence under the heaviest global hypothesis.

    Each reported branch carries its most likely end time's genealogy
    (zero-padded to the tree horizon) and mean state sequence.
    """
    if not post.hypotheses:
        return []
    best = best_hypothesis(post)
    out = []
    for ti, tree in enumerate(post.trees):
        horizon = post.step - tree.start_time + 1
        branches = []
        for ji, slot in enumerate(tree.slots):
            h = slot.hyps[best.selection[ti][ji]]
            if h.r <= cfg.filters.gamma_estimate or h.density is None:
                continue
            kappa = h.density.most_likely_end()
            comp = h.density.components[kappa].comp
            marks = comp.genealogy + (0,) * (horizon - len(comp.genealogy))
            states = comp.full_mean().reshape(-1, comp.nx)
            branches.append(Branch(marks, states))
        if branches:
            out.append(TreeTrajectory(tree.start_time, branches))
    return out


# ---------------------------------------------------------------------------
# One full step and invariants
# ---------------------------------------------------------------------------


def step(
    post: Posterior,
    Z: np.ndarray,
    cfg: ScenarioConfig,
    kind: str = "trpmbm",
    validate: bool = False,
) -> Posterior:
    """predict -> window truncation -> update -> hypothesis formation -> prune."""
    if kind not in KINDS:
        raise ValueError(f"unknown filter kind {kind!r}")
    if kind == "tpmbm" and cfg.n_modes > 1:
        from .models import no_spawning

        cfg = no_spawning(cfg)
    Z = np.asarray(Z, dtype=float).reshape(-1, cfg.measurement.H.shape[0])
    pred = predict(post, cfg, kind)
    pred = truncate_window(pred, cfg.filters.lscan)
    upd, maps = update(pred, Z, cfg)
    formed = form_hypotheses(upd, maps, Z.shape[0], cfg)
    if validate:
        problems = check_posterior(formed, current_step_measurements=Z.shape[0])
        if problems:
            raise AssertionError("; ".join(problems))
    pruned = prune(formed, cfg)
    if validate:
        problems = check_posterior(pruned)
        if problems:
            raise AssertionError("; ".join(problems))
    return pruned


def check_posterior(
    post: Posterior,
    current_step_measurements: int | None = None,
    tol: float = 1e-9,
) -> list[str]:
    """Structural invariants; returns human-readable violations.

    Exclusivity is checked as "never twice" for all measurements plus
    "exactly once" for the current step when its count is given (records of
    older measurements can legitimately disappear with pruned zero-
    existence Bernoullis).
    """
    problems = []
    if post.hypotheses:
        total = sum(math.exp(g.log_w) for g in post.hypotheses)
        if abs(total - 1.0) > tol:
            problems.append(f"hypothesis weights sum to {total}, not 1")
    for qi, comp in enumerate(post.ppp):
        if any(m != 1 for m in comp.comp.genealogy):
            problems.append(f"intensity term {qi}: genealogy not all ones")
    for g in post.hypotheses:
        seen: set = set()
        for ti, sel in enumerate(g.selection):
            for ji, bi in enumerate(sel):
                h = post.trees[ti].slots[ji].hyps[bi]
                dup = h.assoc & seen
                if dup:
                    problems.append(f"measurements {sorted(dup)} associated twice")
                seen |= h.assoc
        if current_step_measurements is not None:
            want = {(post.step, m) for m in range(current_step_measurements)}
            got = {pair for pair in seen if pair[0] == post.step}
            if got != want:
                problems.append(
                    f"current-step associations {sorted(got)} != expected {sorted(want)}"
                )
    for ti, tree in enumerate(post.trees):
        for ji, slot in enumerate(tree.slots):
            for bi, h in enumerate(slot.hyps):
                if not 0.0 <= h.r <= 1.0 + 1e-12:
                    problems.append(f"tree {ti} slot {ji} hyp {bi}: r={h.r}")
                if h.density is not None:
                    s = h.density.beta_total()
                    if abs(s - 1.0) > tol:
                        problems.append(
                            f"tree {ti} slot {ji} hyp {bi}: beta sums to {s}"
                        )
                    for kappa, case in h.density.components.items():
                        for P in (case.comp.cov, *case.comp.frozen_covs):
                            if np.abs(P - P.T).max() > tol:
                                problems.append(
                                    f"tree {ti} slot {ji} hyp {bi} end {kappa}: cov asymmetric"
                                )
                            elif np.linalg.eigvalsh(P).min() < -tol:
                                problems.append(
                                    f"tree {ti} slot {ji} hyp {bi} end {kappa}: cov not PSD"
                                )
    return problems


# ---------------------------------------------------------------------------
# Snapshot export
# ---------------------------------------------------------------------------


def posterior_to_dict(post: Posterior) -> dict:
    """JSON-ready snapshot of the full posterior (debugging aid)."""

    def comp_dict(c: GaussianBranchComponent) -> dict:
        return {
            "genealogy": list(c.genealogy),
            "mean": c.full_mean().tolist(),
            "cov": c.full_cov().tolist(),
        }

    return {
        "step": post.step,
        "ppp": [
            {
                "log_weight": c.log_weight,
                "start_time": c.start_time,
                "component": comp_dict(c.comp),
            }
            for c in post.ppp
        ],
        "trees": [
            {
                "start_time": tree.start_time,
                "slots": [
                    {
                        "branch_id": list(slot.branch_id),
                        "start_time": slot.start_time,
                        "hypotheses": [
                            {
                                "log_w": h.log_w,
                                "r": h.r,
                                "associations": sorted(h.assoc),
                                "density": None
                                if h.density is None
                                else {
                                    "start_time": h.density.start_time,
                                    "components": {
                                        str(kappa): {
                                            "beta": case.beta,
                                            **comp_dict(case.comp),
                                        }
                                        for kappa, case in sorted(
                                            h.density.components.items()
                                        )
                                    },
                                },
                            }
                            for h in slot.hyps
                        ],
                    }
                    for slot in tree.slots
                ],
            }
            for tree in post.trees
        ],
        "hypotheses": [
            {"log_w": g.log_w, "selection": [list(s) for s in g.selection]}
            for g in post.hypotheses
        ],
    }

"""Two-stage training and routed evaluation.

Stage I fits concept translation and the mask head with teacher-forced
trajectories while the policy stays frozen.  Stage II samples trajectory groups,
scores them with the unified reward and takes one group-relative policy
gradient step (plus the KL and segmentation terms) per episode.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import concept as cc
from . import metrics as mt
from . import numerics as nx
from . import policy as pl
from . import router
from .numerics import Tensor
from .rewards import RewardBreakdown, RewardConfig, unified_reward
from .synthbench import FAMILIES, recompose

CORE_PREFIXES = ("ctm.", "mask.", "text.")
# the segmenter (mask head and its text table) stays frozen once Stage I ends
STAGE2_CORE_PREFIXES = ("ctm.",)
POLICY_PREFIXES = ("pol.",)
MODES = ("direct", "reason", "adaptive")


class NumericalFailure(FloatingPointError):
    """A loss or parameter became NaN/Inf."""


@dataclass(frozen=True)
class TrainSettings:
    seed: int = 42
    C: int = 16
    L2: int = 8
    G: int = 8
    beta: float = 0.04
    theta: float = 0.5
    rewards: str = "all"
    optimizer: str = "adam"
    stage1_steps: int = 500
    stage1_lr: float = 0.03
    stage1_schedule: str = "cosine"
    stage1_box_weight: float = 1.0
    stage1_batch: int = 16
    stage1_direct: bool = True
    stage2_steps: int = 2000
    stage2_policy_lr: float = 0.05
    stage2_core_lr: float = 0.003
    seg_trajectories: str = "all"
    reshuffle: bool = False


# ---- parameter stores and optimizers ----------------------------------------


def init_model(s: TrainSettings) -> dict[str, np.ndarray]:
    store = cc.init_core_params(cc.CoreConfig(C=s.C, L2=s.L2), s.seed)
    store.update(pl.init_policy_params(pl.PolicyConfig(C=s.C), s.seed + 1))
    return store


class Optimizer:
    """Adam (default) or plain gradient descent over a named array store."""

    def __init__(self, kind: str = "adam", b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {kind!r}")
        self.kind, self.b1, self.b2, self.eps = kind, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, store: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalFailure(f"non-finite gradient for {k}")
            if self.kind == "sgd":
                store[k] = store[k] - lr * g
                continue
            t = self.t.get(k, 0) + 1
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.t[k], self.m[k], self.v[k] = t, m, v
            mh = m / (1 - self.b1 ** t)
            vh = v / (1 - self.b2 ** t)
            store[k] = store[k] - lr * mh / (np.sqrt(vh) + self.eps)


def _grads(loss: Tensor, leaves: Mapping[str, Tensor], prefixes) -> dict[str, np.ndarray]:
    names = [k for k in leaves if k.startswith(prefixes)]
    gs = nx.backward(loss, [leaves[k] for k in names])
    return dict(zip(names, gs))


def _finite(x: float, what: str) -> float:
    if not math.isfinite(x):
        raise NumericalFailure(f"{what} is not finite")
    return x


# ---- shared forward pieces --------------------------------------------------


def prepare(view: pl.EncodedEpisode) -> pl.EncodedEpisode:
    if view.basis is None:
        view.basis = cc.pixel_basis(view.episode.query.features)
    return view


def hidden_objects(view: pl.EncodedEpisode, p: Mapping[str, Tensor]) -> Tensor:
    return nx.tanh(Tensor(view.x) @ p["pol.W_e"] + p["pol.b_e"])


def decode(view: pl.EncodedEpisode, H_obj: Tensor, p: Mapping[str, Tensor],
           traj: pl.Trajectory) -> cc.MaskPrediction:
    """Mask for the reasoning path: concept rows from the trajectory, then answer words."""
    H = pl.trajectory_hidden(view, H_obj, p, traj)
    Z = cc.translate(H, cc.CTMParams.from_leaves(p))
    prompt = cc.assemble_prompt(Z, cc.embed_text(traj.answer_text, p))
    ep = view.episode
    return cc.predict_mask(prompt, None, p, (ep.query.height, ep.query.width), view.basis)


def decode_direct(view: pl.EncodedEpisode, p: Mapping[str, Tensor],
                  text: str | None = None) -> cc.MaskPrediction:
    """Mask for the shortcut path: the bare instruction (or ``text``) as the prompt."""
    ep = view.episode
    text = ep.instruction if text is None else text
    prompt = cc.assemble_prompt(None, cc.embed_text(text or "<unk>", p))
    return cc.predict_mask(prompt, None, p, (ep.query.height, ep.query.width), view.basis)


def _gt(view: pl.EncodedEpisode) -> np.ndarray:
    return view.episode.gt_mask


def concept_mask(view: pl.EncodedEpisode, text: str | None = None) -> np.ndarray:
    """Target of the shortcut path: every query object whose color the instruction names.

    Instructions that name no color describe no explicit concept, so the
    target is empty and the segmenter learns to report low presence.
    """
    key = ("concept_gt", text)
    if key not in view.cache:
        ep = view.episode
        words = set((ep.instruction if text is None else text).lower().split())
        m = np.zeros((ep.query.height, ep.query.width))
        for o in ep.query.objects:
            if o.color in words:
                m = np.maximum(m, ep.query.object_mask(o.id))
        view.cache[key] = m
    return view.cache[key]


SCHEDULES = ("constant", "cosine")


def lr_at(lr: float, step: int, total: int, schedule: str) -> float:
    """Learning rate at ``step``; cosine decays to a tenth of ``lr`` at the last step."""
    if schedule == "constant" or total <= 1:
        return lr
    if schedule == "cosine":
        return lr * (0.1 + 0.45 * (1.0 + math.cos(math.pi * step / (total - 1))))
    raise ValueError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")


# ---- stage I ----------------------------------------------------------------


def stage1_loss(views: Sequence[pl.EncodedEpisode], p: Mapping[str, Tensor],
                direct: bool = True, box_weight: float = 1.0) -> Tensor:
    terms = []
    for v in views:
        prepare(v)
        if "H_obj" not in v.cache:
            v.cache["H_obj"] = hidden_objects(v, p).detach()
        traj = v.cache.setdefault("oracle", pl.oracle_trajectory(v))
        pred = decode(v, v.cache["H_obj"], p, traj)
        terms.append(cc.seg_loss_logits(pred.logits, _gt(v)))
        if box_weight:
            # the decoded window should reproduce the emitted target box
            err = pred.box - Tensor(np.array([pl.trajectory_boxes(v, traj.check, traj.target)[1].as_tuple()]))
            terms.append(nx.sum_all(nx.square(err)) * box_weight)
        if direct:
            terms.append(cc.seg_loss_logits(decode_direct(v, p).logits, concept_mask(v)))
            # the target's color word alone must recall every object of that color
            ep = v.episode
            color = ep.query.obj(ep.target_id).color
            terms.append(cc.seg_loss_logits(decode_direct(v, p, color).logits,
                                            concept_mask(v, color)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def reshuffled(views: Sequence[pl.EncodedEpisode], rng) -> list[pl.EncodedEpisode]:
    """Re-encode every episode with freshly composed reference tiles."""
    return [pl.encode_episode(recompose(v.episode, rng)) for v in views]


def stage1_step(store: dict[str, np.ndarray], views: Sequence[pl.EncodedEpisode], lr: float,
                opt: Optimizer, direct: bool = True, box_weight: float = 1.0) -> float:
    """One update of concept translation, text table and mask head; policy untouched."""
    p = cc.leaves(store, CORE_PREFIXES)
    loss = stage1_loss(views, p, direct, box_weight)
    val = _finite(loss.item(), "stage I loss")
    if lr != 0.0:
        opt.step(store, _grads(loss, p, CORE_PREFIXES), lr)
    return val


def train_stage1(store: dict[str, np.ndarray], views: Sequence[pl.EncodedEpisode],
                 s: TrainSettings, log: Callable[[dict], None] | None = None) -> list[float]:
    rng = np.random.default_rng(s.seed)
    mix = np.random.default_rng([s.seed, 1])
    opt = Optimizer(s.optimizer)
    losses = []
    order: list[int] = []
    for step in range(s.stage1_steps):
        if len(order) < s.stage1_batch:
            if s.reshuffle and step:
                views = reshuffled(views, mix)
            order.extend(rng.permutation(len(views)).tolist())
        batch = [views[order.pop(0)] for _ in range(min(s.stage1_batch, len(views)))]
        lr = lr_at(s.stage1_lr, step, s.stage1_steps, s.stage1_schedule)
        loss = stage1_step(store, batch, lr, opt, s.stage1_direct, s.stage1_box_weight)
        losses.append(loss)
        if log:
            log({"stage": 1, "step": step, "loss": loss, "lr": lr})
    return losses


# ---- stage II ---------------------------------------------------------------


@dataclass
class StepReport:
    policy: float
    kl: float
    seg: float
    rewards: list[RewardBreakdown]
    advantages: np.ndarray

    def as_dict(self) -> dict:
        rs = self.rewards
        return {"policy_loss": self.policy, "kl": self.kl, "seg_loss": self.seg,
                "r_format": float(np.mean([r.r_format for r in rs])),
                "r_mask": float(np.mean([r.r_mask for r in rs])),
                "r_meta": float(np.mean([r.r_meta for r in rs])),
                "r_uni": float(np.mean([r.r_uni for r in rs])),
                "adv_mean": float(self.advantages.mean()),
                "adv_std": float(self.advantages.std())}


def stage2_objective(view: pl.EncodedEpisode, p: Mapping[str, Tensor],
                     ref: Mapping[str, Tensor], s: TrainSettings, seed: int,
                     rcfg: RewardConfig) -> tuple[Tensor, Tensor, Tensor, StepReport]:
    """Policy, KL and segmentation terms for one sampled group."""
    prepare(view)
    ep = view.episode
    out = pl.policy_outputs(view, p)
    ref_out = pl.policy_outputs(view, ref)
    group = pl.sample_group(view, p, s.G, seed, out)
    H_obj = out.H_obj.detach()
    preds: dict[tuple, cc.MaskPrediction] = {}
    for t in group.trajectories:
        if t.key not in preds:
            preds[t.key] = decode(view, H_obj, p, t)
    gt = _gt(view)
    for t in group.trajectories:
        t.breakdown = unified_reward(t.text, ep.gt_box, ep.gt_check, gt,
                                     preds[t.key].soft, rcfg)
    adv = pl.group_advantages([t.breakdown.r_uni for t in group.trajectories])
    group.advantages = adv
    pol_terms, kl_terms = [], []
    for a, t in zip(adv, group.trajectories):
        lp = pl.trajectory_log_prob(out, t)
        lref = pl.trajectory_log_prob(ref_out, t).detach()
        pol_terms.append(lp * float(-a))
        kl_terms.append(pl.k3(lref - lp))
    policy_term = _mean(pol_terms)
    kl_term = _mean(kl_terms)
    if s.seg_trajectories == "best":
        best = group.trajectories[int(np.argmax([t.breakdown.r_uni for t in group.trajectories]))]
        seg_term = cc.seg_loss_logits(preds[best.key].logits, gt)
    else:
        counts: dict[tuple, int] = {}
        for t in group.trajectories:
            counts[t.key] = counts.get(t.key, 0) + 1
        seg_term = _mean([cc.seg_loss_logits(preds[k].logits, gt) * (c * len(counts) / s.G)
                          for k, c in counts.items()])
    report = StepReport(policy_term.item(), kl_term.item(), seg_term.item(),
                        [t.breakdown for t in group.trajectories], adv)
    return policy_term, kl_term, seg_term, report


def _mean(ts: Sequence[Tensor]) -> Tensor:
    total = ts[0]
    for t in ts[1:]:
        total = total + t
    return total / len(ts)


def stage2_step(store: dict[str, np.ndarray], ref_store: Mapping[str, np.ndarray],
                view: pl.EncodedEpisode, s: TrainSettings, seed: int, opt_pol: Optimizer,
                opt_core: Optimizer, rcfg: RewardConfig) -> StepReport:
    trainable = POLICY_PREFIXES + STAGE2_CORE_PREFIXES
    p = cc.leaves(store, trainable)
    ref = cc.leaves(ref_store, requires_grad=False)
    pol, kl, seg, rep = stage2_objective(view, p, ref, s, seed, rcfg)
    loss = pol + kl * s.beta + seg
    _finite(loss.item(), "stage II loss")
    grads = _grads(loss, p, trainable)
    opt_pol.step(store, {k: g for k, g in grads.items() if k.startswith(POLICY_PREFIXES)},
                 s.stage2_policy_lr)
    opt_core.step(store, {k: g for k, g in grads.items() if k.startswith(STAGE2_CORE_PREFIXES)},
                  s.stage2_core_lr)
    return rep


def train_stage2(store: dict[str, np.ndarray], views: Sequence[pl.EncodedEpisode],
                 s: TrainSettings, log: Callable[[dict], None] | None = None) -> dict[str, np.ndarray]:
    """Runs Stage II in place; returns the frozen reference snapshot."""
    ref_store = {k: v.copy() for k, v in store.items()}
    rcfg = RewardConfig.ablation(s.rewards, s.theta)
    rng = np.random.default_rng(s.seed + 7)
    mix = np.random.default_rng([s.seed, 2])
    opt_pol, opt_core = Optimizer(s.optimizer), Optimizer(s.optimizer)
    for step in range(s.stage2_steps):
        if s.reshuffle and step and step % len(views) == 0:
            views = reshuffled(views, mix)
        view = views[int(rng.integers(len(views)))]
        rep = stage2_step(store, ref_store, view, s, int(rng.integers(2**31)), opt_pol,
                          opt_core, rcfg)
        if log:
            log({"stage": 2, "step": step, "episode": view.episode.episode_id, **rep.as_dict()})
    return ref_store


# ---- evaluation -------------------------------------------------------------


@dataclass
class EvalRecord:
    family: str
    direct: mt.SampleMetrics
    reason: mt.SampleMetrics
    adaptive: mt.SampleMetrics
    routed_direct: bool
    presence: float
    correct_target: bool


def evaluate_episode(view: pl.EncodedEpisode, p: Mapping[str, Tensor], theta: float = 0.5,
                     trajectory: str = "policy") -> EvalRecord:
    prepare(view)
    ep = view.episode
    gt = _gt(view)
    d = decode_direct(view, p)
    traj = pl.greedy_trajectory(view, p) if trajectory == "policy" else pl.oracle_trajectory(view)
    r = decode(view, hidden_objects(view, p), p, traj)
    dm = mt.sample_metrics(d.soft, gt, theta)
    rm = mt.sample_metrics(r.soft, gt, theta)
    decision = router.route(d.presence, ep.instruction)
    direct = decision.path is router.Path.Direct
    correct = ep.query.objects[traj.target].id == ep.target_id
    return EvalRecord(ep.rule.family, dm, rm, dm if direct else rm, direct, d.presence, correct)


def evaluate(views: Sequence[pl.EncodedEpisode], store: Mapping[str, np.ndarray],
             theta: float = 0.5, trajectory: str = "policy", workers: int = 1) -> list[EvalRecord]:
    """Records in input order; ``workers > 1`` evaluates contiguous shards in threads."""
    p = cc.leaves(store, requires_grad=False)
    views = list(views)
    if workers <= 1 or len(views) < 2:
        return [evaluate_episode(v, p, theta, trajectory) for v in views]
    shards = _shards(views, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(lambda vs: [evaluate_episode(v, p, theta, trajectory) for v in vs], shards)
        return [r for part in parts for r in part]


def _shards(items: Sequence, n: int) -> list[list]:
    bounds = np.linspace(0, len(items), min(n, len(items)) + 1).astype(int)
    return [list(items[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def target_accuracy(views: Iterable[pl.EncodedEpisode], store: Mapping[str, np.ndarray]) -> float:
    p = cc.leaves(store, requires_grad=False)
    hits = []
    for v in views:
        t = pl.greedy_trajectory(v, p)
        hits.append(v.episode.query.objects[t.target].id == v.episode.target_id)
    return float(np.mean(hits))


def mean_iou(records: Sequence[EvalRecord], mode: str) -> float:
    return float(np.mean([getattr(r, mode).iou for r in records]))


def summarize(records: Sequence[EvalRecord], shards: int = 1) -> list[dict]:
    """One row per (mode, family) plus an ``all`` row per mode, metrics in percent.

    Each of ``shards`` contiguous slices fills its own accumulators; the
    partial accumulators are merged per row.
    """
    rows = []
    fams = [f for f in FAMILIES if any(r.family == f for r in records)]
    parts = _shards(list(records), max(1, shards)) if records else []
    for mode in MODES:
        for fam in fams + ["all"]:
            sel = [r for r in records if fam == "all" or r.family == fam]
            acc = mt.MetricAccumulator()
            for part in parts:
                local = mt.MetricAccumulator()
                for r in part:
                    if fam == "all" or r.family == fam:
                        local = mt.accumulate(local, getattr(r, mode))
                acc = mt.merge(acc, local)
            row = {"mode": mode, "family": fam, "n": len(sel)}
            row.update(mt.as_percent(acc.finalize()))
            if mode == "direct":
                rate = 1.0
            elif mode == "reason":
                rate = 0.0
            else:
                rate = float(np.mean([r.routed_direct for r in sel]))
            row["routing_rate"] = round(100.0 * rate, 2)
            row["target_acc"] = round(100.0 * float(np.mean([r.correct_target for r in sel])), 2)
            rows.append(row)
    return rows

"""Toy reasoning policy over structured trajectories.

The policy reads hand-built per-object descriptors from every scene of an
episode, encodes them into hidden rows, and samples one trajectory as a set of
discrete choices: the proxy-tile object to box as the check, the query object
to box as the target, an answer phrase, and one compliance draw per tag.
Trajectory tokens (the emitted box coordinates) are appended to the hidden
rows so that concept translation can read them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from . import template
from .geometry import BoxN, to_global
from .numerics import Tensor
from .rewards import RewardBreakdown
from .synthbench import ANSWER_PHRASES, COLORS, SHAPES, Episode, Scene, displacement

DESCRIPTORS = ("contrast", "area", "rarity", "shared", "motion", "named_color") + \
    tuple(f"color_{c}" for c in COLORS) + tuple(f"shape_{s}" for s in SHAPES)
N_DESC = len(DESCRIPTORS)
ROLES = ("support", "proxy", "query")
N_INPUT = 2 * N_DESC + len(ROLES)
N_SLOTS = 8          # check x1 y1 x2 y2, bbox x1 y1 x2 y2
THINK_TEXT = "compare the annotated references and apply the shared rule"
RULE_TEXT = "the rule induced from the support tiles"


class EpisodeConstructionError(ValueError):
    pass


def _z(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    return np.zeros_like(v) if sd < 1e-9 else (v - v.mean()) / sd


def scene_descriptors(scenes: Sequence[Scene], index: int, instruction: str) -> np.ndarray:
    """Descriptor rows for every object of ``scenes[index]`` (episode context)."""
    s = scenes[index]
    objs = s.objects
    words = set(instruction.lower().split())
    others = [{o.cls for o in t.objects} for j, t in enumerate(scenes) if j != index]
    counts = {}
    for o in objs:
        counts[o.cls] = counts.get(o.cls, 0) + 1
    contrast = _z(np.array([s.contrast(o) for o in objs]))
    area = _z(np.array([o.area for o in objs]))
    rarity = _z(np.array([-float(counts[o.cls]) for o in objs]))
    shared = np.array([np.mean([o.cls in c for c in others]) if others else 0.0 for o in objs])
    shared = shared - shared.mean()
    motion = _z(np.array([displacement(o, scenes, index) for o in objs]))
    named = np.array([float(o.color in words) for o in objs])
    color = np.array([[float(o.color == c) for c in COLORS] for o in objs])
    shape = np.array([[float(o.shape == t) for t in SHAPES] for o in objs])
    return np.column_stack([contrast, area, rarity, shared, motion, named, color, shape])


@dataclass
class EncodedEpisode:
    """Episode plus the fixed numeric inputs the policy needs."""

    episode: Episode
    x: np.ndarray                  # all objects of all scenes, N_INPUT columns
    scene_rows: list[slice]        # row range of each scene (tiles, then query)
    support_profile: np.ndarray
    basis: np.ndarray | None = None
    cache: dict = field(default_factory=dict)

    @property
    def query_rows(self) -> slice:
        return self.scene_rows[-1]

    @property
    def proxy_rows(self) -> slice | None:
        p = self.episode.proxy_tile
        return None if p is None else self.scene_rows[p]

    @property
    def n_query(self) -> int:
        return len(self.episode.query.objects)

    @property
    def n_proxy(self) -> int:
        p = self.episode.proxy_tile
        return 0 if p is None else len(self.episode.tiles[p].objects)


def encode_episode(ep: Episode) -> EncodedEpisode:
    scenes = ep.scenes
    desc = [scene_descriptors(scenes, i, ep.instruction) for i in range(len(scenes))]
    sup = [desc[t][ep.tiles[t].objects.index(ep.tiles[t].obj(ep.tile_targets[t]))]
           for t in ep.layout.support_indices]
    profile = np.mean(sup, axis=0) if sup else np.zeros(N_DESC)
    rows, slices, start = [], [], 0
    proxy = ep.proxy_tile
    for i, d in enumerate(desc):
        role = 2 if i == len(scenes) - 1 else (1 if i == proxy else 0)
        onehot = np.zeros((d.shape[0], len(ROLES)))
        onehot[:, role] = 1.0
        rows.append(np.hstack([d, d * profile, onehot]))
        slices.append(slice(start, start + d.shape[0]))
        start += d.shape[0]
    if not ep.query.objects:
        raise EpisodeConstructionError(f"{ep.episode_id}: query scene has no candidates")
    return EncodedEpisode(ep, np.vstack(rows), slices, profile)


# ---- parameters -------------------------------------------------------------


@dataclass(frozen=True)
class PolicyConfig:
    C: int = 16
    tag_logit_init: float = 2.0


TRAINABLE = ("pol.",)


def init_policy_params(cfg: PolicyConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    C = cfg.C
    n_ans = len(ANSWER_PHRASES)
    return {
        "pol.W_e": rng.normal(0.0, 1.0 / math.sqrt(N_INPUT), (N_INPUT, C)),
        "pol.b_e": np.zeros((1, C)),
        "pol.w_target": np.zeros((C, 1)),
        "pol.w_check": np.zeros((C, 1)),
        "pol.W_ans": np.zeros((C, n_ans)),
        "pol.b_ans": np.zeros((1, n_ans)),
        "pol.tags": np.full((1, len(template.TAGS)), cfg.tag_logit_init),
        # fixed token embeddings for emitted coordinates (not trained)
        "traj.slots": rng.normal(0.0, 1.0, (N_SLOTS, C)),
        "traj.num": rng.normal(0.0, 1.0, (N_SLOTS, C)),
    }


@dataclass
class PolicyOutputs:
    H_obj: Tensor
    logp_target: Tensor          # 1 x n_query
    logp_check: Tensor | None    # 1 x n_proxy
    logp_answer: Tensor          # n_query x n_answers
    logp_tag_ok: Tensor          # 1 x 5
    logp_tag_fail: Tensor        # 1 x 5


def policy_outputs(view: EncodedEpisode, p: Mapping[str, Tensor]) -> PolicyOutputs:
    H_obj = nx.tanh(Tensor(view.x) @ p["pol.W_e"] + p["pol.b_e"])
    q = view.query_rows
    hq = nx.take_rows(H_obj, range(q.start, q.stop))
    logp_t = nx.log_softmax_rows((hq @ p["pol.w_target"]).T)
    logp_c = None
    if view.proxy_rows is not None:
        r = view.proxy_rows
        hp = nx.take_rows(H_obj, range(r.start, r.stop))
        logp_c = nx.log_softmax_rows((hp @ p["pol.w_check"]).T)
    logp_a = nx.log_softmax_rows(hq @ p["pol.W_ans"] + p["pol.b_ans"])
    tags = p["pol.tags"]
    return PolicyOutputs(H_obj, logp_t, logp_c, logp_a, nx.log_sigmoid(tags),
                         nx.log_sigmoid(-tags))


# ---- trajectories -----------------------------------------------------------


@dataclass
class Trajectory:
    check: int | None          # index into the proxy tile's objects
    target: int                # index into the query scene's objects
    answer: int                # index into ANSWER_PHRASES
    tags: tuple[bool, ...]
    text: str = ""
    log_prob: float = 0.0
    breakdown: RewardBreakdown | None = None

    @property
    def key(self) -> tuple:
        return (self.check, self.target, self.answer)

    @property
    def answer_text(self) -> str:
        return ANSWER_PHRASES[self.answer]


def trajectory_boxes(view: EncodedEpisode, check: int | None, target: int) -> tuple[BoxN, BoxN]:
    """(check box in global mosaic coordinates, target box in query coordinates)."""
    ep = view.episode
    bbox = ep.query.objects[target].box
    if check is None:
        # no proxy tile: the check box repeats the full canvas and is not scored
        return BoxN(0.0, 0.0, 1.0, 1.0), bbox
    p = ep.proxy_tile
    return to_global(ep.layout, p, ep.tiles[p].objects[check].box), bbox


def render_text(view: EncodedEpisode, check: int | None, target: int, answer: int,
                tags: Sequence[bool]) -> str:
    cbox, bbox = trajectory_boxes(view, check, target)
    text = template.serialize(template.StructuredResponse(
        THINK_TEXT, RULE_TEXT, cbox, bbox, ANSWER_PHRASES[answer]))
    for name, ok in zip(template.TAGS, tags):
        if not ok:
            text = text.replace(f"<{name}>", "", 1)
    return text


def _validate(view: EncodedEpisode, traj: Trajectory) -> None:
    if not 0 <= traj.target < view.n_query:
        raise nx.ContractError(f"target {traj.target} outside {view.n_query} query objects")
    if view.n_proxy:
        if traj.check is None or not 0 <= traj.check < view.n_proxy:
            raise nx.ContractError(f"check {traj.check} outside {view.n_proxy} proxy objects")
    elif traj.check is not None:
        raise nx.ContractError("episode has no proxy tile but the trajectory has a check")
    if not 0 <= traj.answer < len(ANSWER_PHRASES):
        raise nx.ContractError(f"answer id {traj.answer} out of range")
    if len(traj.tags) != len(template.TAGS):
        raise nx.ContractError("one compliance draw per tag is required")


def trajectory_log_prob(out: PolicyOutputs, traj: Trajectory) -> Tensor:
    terms = [nx.take(out.logp_target, 0, traj.target),
             nx.take(out.logp_answer, traj.target, traj.answer)]
    if traj.check is not None:
        terms.append(nx.take(out.logp_check, 0, traj.check))
    for i, ok in enumerate(traj.tags):
        terms.append(nx.take(out.logp_tag_ok if ok else out.logp_tag_fail, 0, i))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def log_prob(traj: Trajectory, p: Mapping[str, Tensor], view: EncodedEpisode) -> Tensor:
    _validate(view, traj)
    return trajectory_log_prob(policy_outputs(view, p), traj)


def _draw(rng: np.random.Generator, logp: np.ndarray) -> int:
    probs = np.exp(logp - logp.max())
    cdf = np.cumsum(probs / probs.sum())
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), len(cdf) - 1))


@dataclass
class GroupBatch:
    episode_id: str
    trajectories: list[Trajectory]
    advantages: np.ndarray | None = None


def sample_group(view: EncodedEpisode, p: Mapping[str, Tensor], G: int, seed: int,
                 out: PolicyOutputs | None = None) -> GroupBatch:
    if G < 2:
        raise ValueError(f"group size must be at least 2, got {G}")
    out = out or policy_outputs(view, p)
    lt = out.logp_target.data[0]
    la = out.logp_answer.data
    lc = None if out.logp_check is None else out.logp_check.data[0]
    p_ok = np.exp(out.logp_tag_ok.data[0])
    trajs = []
    for child in np.random.SeedSequence(seed).spawn(G):
        rng = np.random.default_rng(child)
        check = None if lc is None else _draw(rng, lc)
        target = _draw(rng, lt)
        answer = _draw(rng, la[target])
        tags = tuple(bool(rng.random() < q) for q in p_ok)
        lp = lt[target] + la[target, answer] + (0.0 if check is None else lc[check])
        lp += float(np.sum(np.where(tags, out.logp_tag_ok.data[0], out.logp_tag_fail.data[0])))
        trajs.append(Trajectory(check, target, answer, tags,
                                render_text(view, check, target, answer, tags), float(lp)))
    return GroupBatch(view.episode.episode_id, trajs)


def greedy_trajectory(view: EncodedEpisode, p: Mapping[str, Tensor]) -> Trajectory:
    out = policy_outputs(view, p)
    target = int(np.argmax(out.logp_target.data[0]))
    check = None if out.logp_check is None else int(np.argmax(out.logp_check.data[0]))
    answer = int(np.argmax(out.logp_answer.data[target]))
    tags = (True,) * len(template.TAGS)
    return Trajectory(check, target, answer, tags, render_text(view, check, target, answer, tags))


def oracle_trajectory(view: EncodedEpisode) -> Trajectory:
    """The correct trajectory, used for teacher forcing."""
    ep = view.episode
    objs = ep.query.objects
    target = objs.index(ep.query.obj(ep.target_id))
    check = None
    if ep.proxy_tile is not None:
        tile = ep.tiles[ep.proxy_tile]
        check = tile.objects.index(tile.obj(ep.tile_targets[ep.proxy_tile]))
    answer = ANSWER_PHRASES.index(ep.answer)
    tags = (True,) * len(template.TAGS)
    return Trajectory(check, target, answer, tags, render_text(view, check, target, answer, tags))


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    sd = r.std()
    if sd < 1e-8:
        return np.zeros_like(r)
    return (r - r.mean()) / (sd + 1e-6)


def k3(delta: Tensor) -> Tensor:
    """``exp(d) - d - 1``: nonnegative, zero only at ``d = 0``."""
    return nx.exp(delta) - delta - 1.0


def kl_penalty(p: Mapping[str, Tensor], ref: Mapping[str, Tensor], traj: Trajectory,
               view: EncodedEpisode) -> Tensor:
    delta = log_prob(traj, ref, view).detach() - log_prob(traj, p, view)
    return k3(delta)


# ---- hidden states for translation ------------------------------------------


def trajectory_hidden(view: EncodedEpisode, H_obj: Tensor, p: Mapping[str, Tensor],
                      traj: Trajectory) -> Tensor:
    """Object rows followed by one row per emitted coordinate."""
    cbox, bbox = trajectory_boxes(view, traj.check, traj.target)
    slots = p["traj.slots"].data
    num = p["traj.num"].data
    coords = []
    if traj.check is not None:
        coords += [(i, c) for i, c in enumerate(cbox.as_tuple())]
    coords += [(4 + i, c) for i, c in enumerate(bbox.as_tuple())]
    idx = [i for i, _ in coords]
    # each token is its slot embedding shifted along a slot-specific direction
    tok = slots[idx] + np.array([[2.0 * c - 1.0] for _, c in coords]) * num[idx]
    return nx.concat_rows([H_obj, Tensor(tok)])

"""Synthetic concept micro-world.

Scenes are small canvases of flat-colored rectangles and discs.  A task rule
picks one object per scene; an episode lays ``k*k`` reference scenes out as a
mosaic (support tiles annotated, one proxy tile withheld) and adds a query scene
whose target the model must find.

Rule families (and what picks the target):

============== =====================================================
CI_attribute   the object of a named color
CD_saliency    highest luminance contrast to the background
CD_camouflage  lowest luminance contrast to the background
CD_anomaly     the one object whose (shape, color) class breaks the pattern
CR_consistency the class present in every scene of the episode
CR_difference  the class present in no other scene of the episode
CR_logical     largest or smallest area
CR_moved       the object whose center shifted from the previous frame
============== =====================================================
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import BoxN, MosaicLayout, rasterize_soft_box, rasterize_soft_disc, to_global

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "cyan": (0.10, 0.85, 0.90),
    "magenta": (0.85, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.45, 0.15, 0.60),
}
COLORS = tuple(PALETTE)
SHAPES = ("rect", "disc")
CLASSES = tuple((s, c) for c in COLORS for s in SHAPES)
FAMILIES = ("CI_attribute", "CD_saliency", "CD_camouflage", "CD_anomaly",
            "CR_consistency", "CR_difference", "CR_logical", "CR_moved")
FAMILY_PARAMS: dict[str, tuple] = {
    "CI_attribute": COLORS,
    "CR_logical": ("largest", "smallest"),
}
ANSWER_PHRASES = tuple(f"{c} {s}" for c in COLORS for s in SHAPES)

PHRASES: dict[str, tuple[str, ...]] = {
    "CI_attribute": ("{c}", "{c} object", "the {c} one", "{c} shape"),
    "CD_saliency": ("most salient object", "object standing out", "the object that stands out",
                    "most eye catching item"),
    "CD_camouflage": ("the camouflaged object", "object hidden in background",
                      "the object blending into background"),
    "CD_anomaly": ("the anomalous object", "object breaking the pattern", "the odd one out",
                   "the defective item here"),
    "CR_consistency": ("the object shared by every reference image",
                       "find the item common to all images",
                       "object that appears in all the references"),
    "CR_difference": ("the object missing from all reference images",
                      "find what is new compared to references",
                      "the item that no reference image contains at all"),
    "CR_logical": ("pick the object that follows the size logic",
                   "which object satisfies the same logical rule",
                   "apply the size relation shown by the references"),
    "CR_moved": ("the object that moved between the frames",
                 "track the item that changed its position",
                 "find the thing whose location shifted"),
}


class GenerationError(RuntimeError):
    pass


class ConstructionError(ValueError):
    pass


def luminance(rgb: Sequence[float]) -> float:
    r, g, b = rgb
    return 0.2126 * r + 0.7152 * g + 0.0722 * b


@dataclass(frozen=True)
class SceneSpec:
    n_objects: int = 4
    width: int = 64
    height: int = 64
    min_size_px: int = 9
    max_size_px: int = 17
    min_gap_px: int = 3

    def __post_init__(self):
        if not 2 <= self.n_objects <= 8:
            raise ValueError(f"object count must lie in [2, 8], got {self.n_objects}")


@dataclass(frozen=True)
class SceneObject:
    id: int
    box: BoxN
    shape: str
    color: str
    track: int = -1

    @property
    def rgb(self) -> tuple[float, float, float]:
        return PALETTE[self.color]

    @property
    def cls(self) -> tuple[str, str]:
        return (self.shape, self.color)

    @property
    def area(self) -> float:
        if self.shape == "disc":
            return float(np.pi * (0.5 * (self.box.x2 - self.box.x1)) ** 2)
        return self.box.area


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[SceneObject, ...]
    background: tuple[float, float, float]

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ConstructionError(f"duplicate object ids {ids}")

    def contrast(self, obj: SceneObject) -> float:
        return abs(luminance(obj.rgb) - luminance(self.background))

    def obj(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def object_mask(self, oid: int, temp: float = 1e-4) -> np.ndarray:
        """Binary mask of one object (its soft rasterization thresholded at 0.5)."""
        o = self.obj(oid)
        if o.shape == "disc":
            cx, cy = o.box.center
            soft = rasterize_soft_disc(cx, cy, 0.5 * (o.box.x2 - o.box.x1),
                                       self.width, self.height, temp)
        else:
            soft = rasterize_soft_box(o.box, self.width, self.height, temp)
        return (soft >= 0.5).astype(np.float64)

    @cached_property
    def image(self) -> np.ndarray:
        img = np.empty((self.height, self.width, 3))
        img[:] = self.background
        for o in self.objects:
            img[self.object_mask(o.id) > 0] = o.rgb
        return img

    @cached_property
    def features(self) -> np.ndarray:
        """Per-pixel channels ``[r, g, b, x, y]``, shape ``(h*w, 5)``."""
        h, w = self.height, self.width
        xs = (np.arange(w) + 0.5) / w
        ys = (np.arange(h) + 0.5) / h
        x, y = np.meshgrid(xs, ys)
        return np.hstack([self.image.reshape(-1, 3), x.reshape(-1, 1), y.reshape(-1, 1)])

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height,
                "background": list(self.background),
                "objects": [{"id": o.id, "shape": o.shape, "color": o.color,
                             "box": list(o.box.as_tuple()), "track": o.track}
                            for o in self.objects]}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        objs = tuple(SceneObject(o["id"], BoxN(*o["box"]), o["shape"], o["color"], o["track"])
                     for o in d["objects"])
        return cls(d["width"], d["height"], objs, tuple(d["background"]))


@dataclass(frozen=True)
class TaskRule:
    family: str
    param: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown rule family {self.family!r}")
        allowed = FAMILY_PARAMS.get(self.family)
        if allowed is None and self.param is not None:
            raise ValueError(f"{self.family} takes no parameter")
        if allowed is not None and self.param not in allowed:
            raise ValueError(f"{self.family} parameter must be one of {allowed}")

    @property
    def level(self) -> str:
        return self.family[:2]

    def __str__(self):
        return self.family if self.param is None else f"{self.family}:{self.param}"


def family_rules(family: str) -> list[TaskRule]:
    params = FAMILY_PARAMS.get(family)
    if params is None:
        return [TaskRule(family)]
    return [TaskRule(family, p) for p in params]


# ---- oracles ----------------------------------------------------------------


def _argbest(objs: Sequence[SceneObject], key, reverse: bool) -> int:
    # ties go to the lowest id
    best = sorted(objs, key=lambda o: ((-key(o) if reverse else key(o)), o.id))
    return best[0].id


def rule_oracle(rule: TaskRule, scenes: Sequence[Scene], index: int) -> int:
    """Target object id in ``scenes[index]``; ``scenes`` is the whole episode context
    (reference tiles in order, then the query)."""
    scene = scenes[index]
    objs = scene.objects
    fam = rule.family
    if fam == "CI_attribute":
        hits = [o.id for o in objs if o.color == rule.param]
        if not hits:
            raise ConstructionError(f"no {rule.param} object in scene")
        return min(hits)
    if fam == "CD_saliency":
        return _argbest(objs, scene.contrast, reverse=True)
    if fam == "CD_camouflage":
        return _argbest(objs, scene.contrast, reverse=False)
    if fam == "CD_anomaly":
        if len(objs) < 3:
            raise ConstructionError("anomaly needs at least three objects")
        counts = {c: sum(o.cls == c for o in objs) for c in {o.cls for o in objs}}
        return _argbest(objs, lambda o: counts[o.cls], reverse=False)
    if fam == "CR_logical":
        return _argbest(objs, lambda o: o.area, reverse=(rule.param == "largest"))
    if len(scenes) < 2:
        raise ConstructionError(f"{fam} needs at least two scenes")
    others = [s for i, s in enumerate(scenes) if i != index]
    if fam == "CR_consistency":
        common = set.intersection(*({o.cls for o in s.objects} for s in scenes))
        hits = [o.id for o in objs if o.cls in common]
        if not hits:
            raise ConstructionError("no class shared by every scene")
        return min(hits)
    if fam == "CR_difference":
        seen = set().union(*({o.cls for o in s.objects} for s in others))
        hits = [o.id for o in objs if o.cls not in seen]
        if not hits:
            raise ConstructionError("no class absent from the other scenes")
        return min(hits)
    if fam == "CR_moved":
        ref = scenes[index - 1] if index > 0 else scenes[1]
        return _argbest(objs, lambda o: _displacement(o, ref), reverse=True)
    raise ConstructionError(f"unhandled family {fam}")


def _displacement(o: SceneObject, ref: Scene) -> float:
    for r in ref.objects:
        if r.track == o.track:
            (ax, ay), (bx, by) = o.box.center, r.box.center
            return float(np.hypot(ax - bx, ay - by))
    return 0.0


def displacement(o: SceneObject, scenes: Sequence[Scene], index: int) -> float:
    if len(scenes) < 2 or o.track < 0:
        return 0.0
    ref = scenes[index - 1] if index > 0 else scenes[1]
    return _displacement(o, ref)


# ---- scene generation -------------------------------------------------------


def _place_boxes(rng: np.random.Generator, spec: SceneSpec, sizes_px: list[tuple[int, int]],
                 fixed: Sequence[tuple[int, int, int, int]] = (),
                 restarts: int = 1000) -> list[tuple[int, int, int, int]]:
    """Pixel-aligned, pairwise separated boxes ``(x, y, w, h)``.

    Objects are placed greedily; a dead end restarts the whole layout.
    """
    g = spec.min_gap_px
    # padded boxes must fit inside the usable canvas at all
    room = (spec.width - 1 + g) * (spec.height - 1 + g)
    need = sum((w + g) * (h + g) for w, h in sizes_px) + sum((w + g) * (h + g) for *_, w, h in fixed)
    if need > room or any(w >= spec.width - 1 or h >= spec.height - 1 for w, h in sizes_px):
        raise GenerationError("objects cannot fit on the canvas")
    for _ in range(restarts):
        placed = list(fixed)
        out = []
        for w, h in sizes_px:
            for _ in range(1000):
                x = int(rng.integers(1, spec.width - w))
                y = int(rng.integers(1, spec.height - h))
                if all(x + w + g <= px or px + pw + g <= x or y + h + g <= py or py + ph + g <= y
                       for px, py, pw, ph in placed):
                    placed.append((x, y, w, h))
                    out.append((x, y, w, h))
                    break
            else:
                break
        if len(out) == len(sizes_px):
            return out
    raise GenerationError(f"could not place objects after {restarts} attempts")


def _sizes(rng, spec: SceneSpec, shapes: Sequence[str]) -> list[tuple[int, int]]:
    out = []
    for s in shapes:
        a = int(rng.integers(spec.min_size_px, spec.max_size_px + 1))
        b = a if s == "disc" else int(rng.integers(spec.min_size_px, spec.max_size_px + 1))
        out.append((a, b))
    return out


def _background(rng) -> tuple[float, float, float]:
    g = float(np.round(rng.uniform(0.3, 0.7), 4))
    return (g, g, g)


def _assemble(spec: SceneSpec, classes: Sequence[tuple[str, str]], boxes_px, bg,
              tracks: Sequence[int] | None = None) -> Scene:
    objs = []
    for i, ((shape, color), (x, y, w, h)) in enumerate(zip(classes, boxes_px)):
        box = BoxN(x / spec.width, y / spec.height, (x + w) / spec.width, (y + h) / spec.height)
        objs.append(SceneObject(i, box, shape, color, -1 if tracks is None else tracks[i]))
    return Scene(spec.width, spec.height, tuple(objs), bg)


def gen_scene(spec: SceneSpec, seed, classes: Sequence[tuple[str, str]] | None = None) -> Scene:
    """Random scene; ``classes`` fixes the (shape, color) of each object."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if classes is None:
        classes = [CLASSES[int(rng.integers(len(CLASSES)))] for _ in range(spec.n_objects)]
    bg = _background(rng)
    boxes = _place_boxes(rng, spec, _sizes(rng, spec, [c[0] for c in classes]))
    return _assemble(spec, classes, boxes, bg)


def _shuffled(rng, scene: Scene) -> Scene:
    """Random object order, ids reassigned 0..n-1 (removes slot position cues)."""
    perm = rng.permutation(len(scene.objects))
    objs = tuple(SceneObject(i, scene.objects[p].box, scene.objects[p].shape,
                             scene.objects[p].color, scene.objects[p].track)
                 for i, p in enumerate(perm))
    return Scene(scene.width, scene.height, objs, scene.background)


def _rand_class(rng, exclude=()) -> tuple[str, str]:
    pool = [c for c in CLASSES if c not in exclude]
    return pool[int(rng.integers(len(pool)))]


def _rand_color(rng, exclude=()) -> str:
    pool = [c for c in COLORS if c not in exclude]
    return pool[int(rng.integers(len(pool)))]


def _contrast_margin_ok(scene: Scene, lowest: bool, margin: float = 0.06) -> bool:
    cs = sorted(scene.contrast(o) for o in scene.objects)
    return (cs[1] - cs[0] >= margin) if lowest else (cs[-1] - cs[-2] >= margin)


def _gen_family_scenes(rule: TaskRule, n_scenes: int, spec: SceneSpec, rng) -> list[Scene]:
    n = spec.n_objects
    fam = rule.family
    shapes = lambda: [SHAPES[int(rng.integers(2))] for _ in range(n)]  # noqa: E731
    scenes: list[Scene] = []
    if fam == "CI_attribute":
        for _ in range(n_scenes):
            cls = [(SHAPES[int(rng.integers(2))], rule.param)]
            cls += [(SHAPES[int(rng.integers(2))], _rand_color(rng, (rule.param,)))
                    for _ in range(n - 1)]
            scenes.append(gen_scene(spec, rng, cls))
    elif fam in ("CD_saliency", "CD_camouflage"):
        for _ in range(n_scenes):
            for _ in range(1000):
                cls = [_rand_class(rng) for _ in range(n)]
                s = gen_scene(spec, rng, cls)
                if _contrast_margin_ok(s, lowest=(fam == "CD_camouflage")):
                    break
            else:
                raise GenerationError("contrast margin unattainable")
            scenes.append(s)
    elif fam == "CD_anomaly":
        if n < 3:
            raise ConstructionError("anomaly needs at least three objects")
        for _ in range(n_scenes):
            base = _rand_class(rng)
            if rng.random() < 0.5:
                odd = ("disc" if base[0] == "rect" else "rect", base[1])
            else:
                odd = (base[0], _rand_color(rng, (base[1],)))
            scenes.append(gen_scene(spec, rng, [odd] + [base] * (n - 1)))
    elif fam == "CR_logical":
        for _ in range(n_scenes):
            for _ in range(1000):
                s = gen_scene(spec, rng, [_rand_class(rng) for _ in range(n)])
                areas = sorted(o.area for o in s.objects)
                ok = (areas[-1] >= 1.3 * areas[-2]) if rule.param == "largest" \
                    else (areas[1] >= 1.3 * areas[0])
                if ok:
                    break
            else:
                raise GenerationError("area margin unattainable")
            scenes.append(s)
    elif fam == "CR_consistency":
        kappa = _rand_class(rng)
        for _ in range(1000):
            scenes = [gen_scene(spec, rng, [kappa] + [_rand_class(rng, (kappa,))
                                                      for _ in range(n - 1)])
                      for _ in range(n_scenes)]
            common = set.intersection(*({o.cls for o in s.objects} for s in scenes))
            if common == {kappa}:
                break
        else:
            raise GenerationError("could not isolate a single shared class")
    elif fam == "CR_difference":
        for _ in range(1000):
            order = rng.permutation(len(CLASSES))
            uniques = [CLASSES[i] for i in order[:n_scenes]]
            pool = [CLASSES[i] for i in order[n_scenes:n_scenes + 3]]
            scenes = []
            for u in uniques:
                cls = [u] + [pool[int(rng.integers(len(pool)))] for _ in range(n - 1)]
                scenes.append(gen_scene(spec, rng, cls))
            if all(_difference_unique(scenes, i) for i in range(n_scenes)):
                break
        else:
            raise GenerationError("difference episode infeasible")
    elif fam == "CR_moved":
        cls = [_rand_class(rng) for _ in range(n)]
        bg = _background(rng)
        sizes = _sizes(rng, spec, [c[0] for c in cls])
        boxes = _place_boxes(rng, spec, sizes)
        mover = 0
        tracks = list(range(n))
        scenes = [_assemble(spec, cls, boxes, bg, tracks)]
        for _ in range(n_scenes - 1):
            prev = scenes[-1]
            fixed = [(round(o.box.x1 * spec.width), round(o.box.y1 * spec.height),
                      sizes[i][0], sizes[i][1]) for i, o in enumerate(prev.objects) if i != mover]
            old = prev.objects[mover].box
            for _ in range(1000):
                (nb,) = _place_boxes(rng, spec, [sizes[mover]], fixed)
                nx_, ny_ = (nb[0] + nb[2] / 2) / spec.width, (nb[1] + nb[3] / 2) / spec.height
                if np.hypot(nx_ - old.center[0], ny_ - old.center[1]) >= 0.12:
                    break
            else:
                raise GenerationError("mover could not be displaced")
            new_boxes = [(round(o.box.x1 * spec.width), round(o.box.y1 * spec.height),
                          sizes[i][0], sizes[i][1]) for i, o in enumerate(prev.objects)]
            new_boxes[mover] = nb
            scenes.append(_assemble(spec, cls, new_boxes, bg, tracks))
    else:
        raise ConstructionError(f"unknown family {fam}")
    return [_shuffled(rng, s) for s in scenes]


def _difference_unique(scenes: Sequence[Scene], i: int) -> bool:
    others = set().union(*({o.cls for o in s.objects} for j, s in enumerate(scenes) if j != i))
    return sum(o.cls not in others for o in scenes[i].objects) == 1


# ---- episodes ---------------------------------------------------------------


@dataclass(frozen=True)
class Episode:
    episode_id: str
    rule: TaskRule
    layout: MosaicLayout
    tiles: tuple[Scene, ...]
    query: Scene
    tile_targets: tuple[int, ...]
    target_id: int
    instruction: str

    @property
    def scenes(self) -> tuple[Scene, ...]:
        return self.tiles + (self.query,)

    @property
    def k(self) -> int:
        return self.layout.k

    @property
    def proxy_tile(self) -> int | None:
        return self.layout.proxy_indices[0] if self.layout.proxy_indices else None

    @property
    def support_boxes(self) -> list[BoxN]:
        """Annotated support targets in global mosaic coordinates."""
        return [to_global(self.layout, t, self.tiles[t].obj(self.tile_targets[t]).box)
                for t in self.layout.support_indices]

    @property
    def gt_check(self) -> BoxN | None:
        p = self.proxy_tile
        if p is None:
            return None
        return to_global(self.layout, p, self.tiles[p].obj(self.tile_targets[p]).box)

    @property
    def gt_box(self) -> BoxN:
        return self.query.obj(self.target_id).box

    @cached_property
    def gt_mask(self) -> np.ndarray:
        return self.query.object_mask(self.target_id)

    @property
    def answer(self) -> str:
        o = self.query.obj(self.target_id)
        return f"{o.color} {o.shape}"

    def to_json(self) -> dict:
        return {"episode_id": self.episode_id, "family": self.rule.family,
                "param": self.rule.param, "k": self.k,
                "proxy_indices": list(self.layout.proxy_indices),
                "instruction": self.instruction,
                "tiles": [s.to_json() for s in self.tiles], "query": self.query.to_json(),
                "tile_targets": list(self.tile_targets), "target_id": self.target_id,
                "gt_check": None if self.gt_check is None else list(self.gt_check.as_tuple()),
                "gt_box": list(self.gt_box.as_tuple())}

    @classmethod
    def from_json(cls, d: dict) -> "Episode":
        return cls(d["episode_id"], TaskRule(d["family"], d["param"]),
                   MosaicLayout(d["k"], tuple(d["proxy_indices"])),
                   tuple(Scene.from_json(s) for s in d["tiles"]), Scene.from_json(d["query"]),
                   tuple(d["tile_targets"]), d["target_id"], d["instruction"])


def consistent_rules(ep: Episode) -> list[TaskRule]:
    """Rules of the episode's family that reproduce every support annotation."""
    out = []
    scenes = ep.scenes
    for r in family_rules(ep.rule.family):
        try:
            if all(rule_oracle(r, scenes, t) == ep.tile_targets[t]
                   for t in ep.layout.support_indices):
                out.append(r)
        except ConstructionError:
            continue
    return out


def make_instruction(rule: TaskRule, rng) -> str:
    bank = PHRASES[rule.family]
    return bank[int(rng.integers(len(bank)))].format(c=rule.param)


def build_episode(rule: TaskRule, k: int, seed, spec: SceneSpec = SceneSpec(),
                  episode_id: str | None = None) -> Episode:
    if k not in (1, 2, 3):
        raise ValueError(f"mosaic order k must be one of (1, 2, 3), got {k}")
    rng = np.random.default_rng(seed)
    n_tiles = k * k
    scenes = _gen_family_scenes(rule, n_tiles + 1, spec, rng)
    proxy = (int(rng.integers(n_tiles)),) if k > 1 else ()
    layout = MosaicLayout(k, proxy)
    targets = tuple(rule_oracle(rule, scenes, i) for i in range(n_tiles + 1))
    ep = Episode(episode_id or f"{rule.family}-{seed}", rule, layout, tuple(scenes[:-1]),
                 scenes[-1], targets[:-1], targets[-1], make_instruction(rule, rng))
    assert consistent_rules(ep) == [rule], f"ambiguous episode {ep.episode_id}"
    return ep


def recompose(ep: Episode, rng) -> Episode:
    """The same episode with its reference tiles moved to new mosaic positions.

    The proxy scene stays the proxy, so the annotated support set (and hence
    the unique consistent rule) is unchanged.  Frames of a motion episode form
    a time sequence and keep their order.
    """
    n = ep.layout.n_tiles
    perm = list(range(n)) if ep.rule.family == "CR_moved" else [int(i) for i in rng.permutation(n)]
    proxy = () if ep.proxy_tile is None else (perm.index(ep.proxy_tile),)
    return replace(ep, layout=MosaicLayout(ep.k, proxy),
                   tiles=tuple(ep.tiles[i] for i in perm),
                   tile_targets=tuple(ep.tile_targets[i] for i in perm))


def random_rule(family: str, rng) -> TaskRule:
    rules = family_rules(family)
    return rules[int(rng.integers(len(rules)))]


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def gen_dataset(n: int, seed: int, k: int = 2, families: Sequence[str] = FAMILIES,
                spec: SceneSpec = SceneSpec(), offset: int = 0) -> list[Episode]:
    """``n`` episodes cycling through ``families``; episode ``i`` uses seed ``(seed, offset+i)``."""
    families = list(families)
    for f in families:
        if f not in FAMILIES:
            raise ValueError(f"unknown family {f!r}; choose from {FAMILIES}")
    out = []
    for i in range(n):
        idx = offset + i
        s = episode_seed(seed, idx)
        rule = random_rule(families[idx % len(families)], np.random.default_rng(s))
        out.append(build_episode(rule, k, s, spec, episode_id=f"ep{idx:05d}-{rule.family}"))
    return out


def write_dataset(episodes: Sequence[Episode], out_dir: Path, meta: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    counts: dict[str, int] = {}
    for ep in episodes:
        name = f"{ep.episode_id}.json"
        (out_dir / name).write_text(json.dumps(ep.to_json(), sort_keys=True) + "\n")
        names.append(name)
        counts[ep.rule.family] = counts.get(ep.rule.family, 0) + 1
    manifest = {"version": 1, "count": len(episodes), "families": counts, "episodes": names}
    manifest.update(meta or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path: Path) -> list[Episode]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    return [Episode.from_json(json.loads((path / n).read_text())) for n in manifest["episodes"]]

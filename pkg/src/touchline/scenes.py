"""Synthetic pointing scenes: sampling, conditions, rasterization and JSONL I/O.

Each scene holds a handful of boxed objects, a person pointing at exactly one
of them, and a short utterance naming it. The construction makes both cues
necessary: a same-category distractor sits off the eye-fingertip ray, and an
object of another category sits on it.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import BoxCXYWH, GestureKind, MissingKeypoint, Point2, cosine_colinearity, make_gesture_line

CATEGORIES = ("cup", "chair", "book", "bottle", "frame", "bowl", "lamp", "plant")
COLORS = ("red", "blue", "green", "yellow", "white", "black")
KEYPOINTS = ("eye", "fingertip", "elbow", "wrist", "shoulder")
SPECIAL_TOKENS = ("[pad]", "the", "near")
VOCAB = SPECIAL_TOKENS + COLORS + CATEGORIES
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = TOKEN_ID["[pad]"]
MAX_TEXT_LEN = 8
NUM_CHANNELS = len(CATEGORIES) + len(COLORS) + len(KEYPOINTS)

# E[cos N(0, s)] = exp(-s^2 / 2); checked by Monte-Carlo in calibrate_sigma
SIGMA_VTL = 0.1411
SIGMA_EWL = 0.2929
BUMP_FLOOR = 1e-2      # keypoint bumps are cut to zero below this (about 3 sigma)


class PlacementFailure(RuntimeError):
    """Rejection sampling ran out of attempts; the config is over-constrained."""


class MalformedRecord(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class Condition(str, enum.Enum):
    FULL = "full"
    NO_POSE = "nopose"
    INPAINTED = "inpainted"


@dataclass(frozen=True)
class SceneObject:
    box: BoxCXYWH
    category: str
    color: str
    is_referent: bool = False


@dataclass(frozen=True)
class HumanPose:
    eye: Point2 | None
    fingertip: Point2 | None
    elbow: Point2 | None
    wrist: Point2 | None
    shoulder: Point2 | None

    def keypoints(self) -> dict[str, Point2 | None]:
        return {k: getattr(self, k) for k in KEYPOINTS}


@dataclass(frozen=True)
class Scene:
    id: str
    objects: tuple[SceneObject, ...]
    pose: HumanPose | None
    utterance: tuple[int, ...]
    utterance_text: str
    referent_span: tuple[int, int]
    condition: Condition = Condition.FULL

    def __post_init__(self):
        if sum(o.is_referent for o in self.objects) != 1:
            raise ValueError(f"scene {self.id}: exactly one referent required")
        s, e = self.referent_span
        if not 0 <= s < e <= len(self.utterance):
            raise ValueError(f"scene {self.id}: bad referent span {self.referent_span}")

    @property
    def referent(self) -> SceneObject:
        return next(o for o in self.objects if o.is_referent)

    @property
    def pose_visible(self) -> bool:
        return self.pose is not None and self.condition is Condition.FULL

    def gesture_line(self, kind: GestureKind | str):
        """Ground-truth gesture line, or None if unavailable under this condition."""
        if not self.pose_visible:
            return None
        try:
            return make_gesture_line(self.pose, kind)
        except MissingKeypoint:
            return None


@dataclass
class GeneratorConfig:
    seed: int = 0
    scenes: int = 1000
    grid_size: int = 16
    sigma_vtl: float = SIGMA_VTL
    sigma_ewl: float = SIGMA_EWL
    same_category_distractors: tuple[int, int] = (1, 2)
    on_ray_distractors: int = 1
    extra_objects: tuple[int, int] = (0, 2)
    same_color_prob: float = 0.6
    min_area: float = 0.006
    max_area: float = 0.12
    off_ray_min_angle: float = 0.3
    on_ray_max_angle: float = 0.05
    missing_head_rate: float = 0.02
    template_probs: tuple[float, float, float] = (0.5, 0.35, 0.15)
    max_attempts: int = 200

    def __post_init__(self):
        if not self.sigma_vtl < self.sigma_ewl:
            raise ValueError("sigma_vtl must be smaller than sigma_ewl")


# ---------------------------------------------------------------------------
# sampling

def _rot(v, a):
    c, s = math.cos(a), math.sin(a)
    return (c * v[0] - s * v[1], s * v[0] + c * v[1])


def _unit(v):
    n = math.hypot(*v)
    return (v[0] / n, v[1] / n)


def _inside(p, margin=0.0):
    return margin <= p[0] <= 1 - margin and margin <= p[1] <= 1 - margin


def _sample_size(rng, cfg):
    area = math.exp(rng.uniform(math.log(cfg.min_area), math.log(cfg.max_area)))
    aspect = math.exp(rng.uniform(-0.4, 0.4))
    return math.sqrt(area * aspect), math.sqrt(area / aspect)


def _fits(box: BoxCXYWH, region, others, gap=0.01):
    x0, y0, x1, y1 = box.corners()
    if x0 < region[0] or x1 > region[2] or y0 < region[1] or y1 > region[3]:
        return False
    for o in others:
        a0, b0, a1, b1 = o.corners()
        if x0 < a1 + gap and a0 < x1 + gap and y0 < b1 + gap and b0 < y1 + gap:
            return False
    return True


def _angle_from(eye, direction, p):
    v = (p[0] - eye[0], p[1] - eye[1])
    return math.acos(max(-1.0, min(1.0, (v[0] * direction[0] + v[1] * direction[1]) / math.hypot(*v))))


def _try_scene(rng, cfg: GeneratorConfig, scene_id: str) -> Scene | None:
    left = rng.random() < 0.5
    flip = (lambda x: x) if left else (lambda x: 1.0 - x)
    eye = (flip(rng.uniform(0.06, 0.2)), rng.uniform(0.15, 0.45))
    region = (0.3, 0.02, 0.98, 0.98) if left else (0.02, 0.02, 0.7, 0.98)

    w, h = _sample_size(rng, cfg)
    if w >= region[2] - region[0] or h >= region[3] - region[1]:
        return None
    ref_box = BoxCXYWH(rng.uniform(region[0] + w / 2, region[2] - w / 2),
                       rng.uniform(region[1] + h / 2, region[3] - h / 2), w, h)
    center = (ref_box.cx, ref_box.cy)
    to_ref = (center[0] - eye[0], center[1] - eye[1])
    dist = math.hypot(*to_ref)

    # eye -> fingertip ray, rotated off the referent by the VTL noise
    vtl_dir = _rot(_unit(to_ref), rng.normal(0.0, cfg.sigma_vtl))
    reach = rng.uniform(0.1, 0.18)
    if reach > dist - 0.05:
        return None
    fingertip = (eye[0] + reach * vtl_dir[0], eye[1] + reach * vtl_dir[1])
    wrist = (fingertip[0] - 0.03 * vtl_dir[0], fingertip[1] - 0.03 * vtl_dir[1])

    # elbow placed so elbow->wrist misses the referent by exactly the EWL noise angle
    forearm = rng.uniform(0.08, 0.12)
    alpha = rng.normal(0.0, cfg.sigma_ewl)
    c = (center[0] - wrist[0], center[1] - wrist[1])
    nc = math.hypot(*c)
    s = forearm * math.sin(alpha) / nc
    if abs(s) >= 1:
        return None
    phi = alpha + math.asin(s)
    arm_dir = _rot(_unit(c), -phi)
    elbow = (wrist[0] - forearm * arm_dir[0], wrist[1] - forearm * arm_dir[1])
    shoulder = (eye[0] + rng.uniform(-0.03, 0.03), eye[1] + rng.uniform(0.08, 0.12))
    if not all(_inside(p) for p in (eye, fingertip, wrist, elbow, shoulder)):
        return None

    category = CATEGORIES[rng.integers(len(CATEGORIES))]
    color = COLORS[rng.integers(len(COLORS))]
    objects = [SceneObject(ref_box, category, color, True)]
    boxes = [ref_box]

    def place(sampler, tries=60):
        for _ in range(tries):
            box = sampler()
            if box is not None and _fits(box, region, boxes):
                boxes.append(box)
                return box
        return None

    def off_ray():
        b = _free_box(rng, cfg, region)
        if b is None or _angle_from(eye, vtl_dir, (b.cx, b.cy)) < cfg.off_ray_min_angle:
            return None
        return b

    def on_ray():
        bw, bh = _sample_size(rng, cfg)
        t = rng.uniform(reach + 0.08, 1.4)
        d = _rot(vtl_dir, rng.uniform(-cfg.on_ray_max_angle, cfg.on_ray_max_angle))
        return BoxCXYWH(eye[0] + t * d[0], eye[1] + t * d[1], bw, bh)

    others = [c for c in CATEGORIES if c != category]
    for _ in range(rng.integers(cfg.same_category_distractors[0], cfg.same_category_distractors[1] + 1)):
        b = place(off_ray)
        if b is None:
            return None
        col = color if rng.random() < cfg.same_color_prob else COLORS[rng.integers(len(COLORS))]
        objects.append(SceneObject(b, category, col))
    for _ in range(cfg.on_ray_distractors):
        b = place(on_ray)
        if b is None:
            return None
        objects.append(SceneObject(b, others[rng.integers(len(others))], COLORS[rng.integers(len(COLORS))]))
    for _ in range(rng.integers(cfg.extra_objects[0], cfg.extra_objects[1] + 1)):
        b = place(lambda: _free_box(rng, cfg, region))
        if b is not None:
            objects.append(SceneObject(b, others[rng.integers(len(others))], COLORS[rng.integers(len(COLORS))]))

    order = rng.permutation(len(objects))
    objects = [objects[i] for i in order]

    missing_head = rng.random() < cfg.missing_head_rate
    pose = HumanPose(
        eye=None if missing_head else Point2(*eye),
        fingertip=Point2(*fingertip), elbow=Point2(*elbow),
        wrist=Point2(*wrist), shoulder=None if missing_head else Point2(*shoulder),
    )
    words, span = _utterance(rng, cfg, objects)
    return Scene(scene_id, tuple(objects), pose, tuple(TOKEN_ID[w] for w in words),
                 " ".join(words), span)


def _free_box(rng, cfg, region):
    bw, bh = _sample_size(rng, cfg)
    if bw >= region[2] - region[0] or bh >= region[3] - region[1]:
        return None
    return BoxCXYWH(rng.uniform(region[0] + bw / 2, region[2] - bw / 2),
                    rng.uniform(region[1] + bh / 2, region[3] - bh / 2), bw, bh)


def _utterance(rng, cfg, objects):
    ref = next(o for o in objects if o.is_referent)
    template = rng.choice(3, p=np.asarray(cfg.template_probs) / sum(cfg.template_probs))
    if template == 1:
        return ["the", ref.category], (1, 2)
    words = ["the", ref.color, ref.category]
    if template == 2:
        landmark = min((o for o in objects if not o.is_referent),
                       key=lambda o: math.hypot(o.box.cx - ref.box.cx, o.box.cy - ref.box.cy))
        words += ["near", "the", landmark.color, landmark.category]
    return words, (1, 3)


def sample_scene(rng: np.random.Generator, cfg: GeneratorConfig, scene_id: str = "0") -> Scene:
    for _ in range(cfg.max_attempts):
        scene = _try_scene(rng, cfg, scene_id)
        if scene is not None:
            return scene
    raise PlacementFailure(f"no valid scene after {cfg.max_attempts} attempts")


def generate(cfg: GeneratorConfig, n: int | None = None, prefix: str = "s") -> list[Scene]:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.scenes if n is None else n
    return [sample_scene(rng, cfg, f"{prefix}{i:06d}") for i in range(n)]


def colinearity_stats(scenes) -> dict[str, float]:
    """Mean ground-truth colinearity of the referent center with each line kind."""
    out = {}
    for kind in GestureKind:
        vals = []
        for s in scenes:
            if s.pose is None:
                continue
            try:
                line = make_gesture_line(s.pose, kind)
            except MissingKeypoint:
                continue
            ref = s.referent.box
            vals.append(cosine_colinearity(line, Point2(ref.cx, ref.cy)))
        out[kind.value] = float(np.mean(vals)) if vals else 0.0
        out[f"{kind.value}_count"] = len(vals)
    return out


def calibrate_sigma(target_cos: float, kind: GestureKind | str, n: int = 4000, seed: int = 0,
                    lo: float = 0.01, hi: float = 0.6, iters: int = 20) -> float:
    """Bisect the angular noise so the generator's mean colinearity hits ``target_cos``."""
    kind = GestureKind(kind)
    for _ in range(iters):
        mid = (lo + hi) / 2
        if kind is GestureKind.VTL:
            cfg = GeneratorConfig(seed=seed, sigma_vtl=mid, sigma_ewl=max(mid * 2, SIGMA_EWL), missing_head_rate=0.0)
        else:
            cfg = GeneratorConfig(seed=seed, sigma_vtl=min(mid / 2, SIGMA_VTL), sigma_ewl=mid, missing_head_rate=0.0)
        got = colinearity_stats(generate(cfg, n))[kind.value]
        if got > target_cos:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


# ---------------------------------------------------------------------------
# conditions and rasterization

def apply_condition(scene: Scene, condition: Condition | str) -> Scene:
    return replace(scene, condition=Condition(condition))


def _coverage(lo: float, hi: float, g: int) -> np.ndarray:
    edges = np.arange(g + 1) / g
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None) * g


def rasterize(scene: Scene, grid_size: int = 16, bump_sigma: float = 0.75) -> np.ndarray:
    """Render a scene to a (G, G, C) grid; rows index y, columns index x.

    Channels are category one-hots and color one-hots weighted by each cell's
    occupancy fraction, then one Gaussian bump per visible keypoint.
    """
    g = grid_size
    out = np.zeros((g, g, NUM_CHANNELS))
    nc = len(CATEGORIES)
    for o in scene.objects:
        x0, y0, x1, y1 = o.box.corners()
        occ = np.outer(_coverage(y0, y1, g), _coverage(x0, x1, g))
        out[:, :, CATEGORIES.index(o.category)] += occ
        out[:, :, nc + COLORS.index(o.color)] += occ
    if scene.pose_visible:
        centers = (np.arange(g) + 0.5) / g
        s2 = 2 * (bump_sigma / g) ** 2
        base = nc + len(COLORS)
        for k, name in enumerate(KEYPOINTS):
            p = getattr(scene.pose, name)
            if p is None:
                continue
            bump = np.outer(np.exp(-(centers - p.y) ** 2 / s2), np.exp(-(centers - p.x) ** 2 / s2))
            out[:, :, base + k] = np.where(bump >= BUMP_FLOOR, bump, 0.0)
    return out


def pad_tokens(tokens, max_len: int = MAX_TEXT_LEN) -> np.ndarray:
    if len(tokens) > max_len:
        raise ValueError(f"utterance of {len(tokens)} tokens exceeds {max_len}")
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[:len(tokens)] = tokens
    return out


# ---------------------------------------------------------------------------
# line-delimited JSON records

def _pt(p):
    return None if p is None else [p.x, p.y]


def scene_to_record(s: Scene) -> dict:
    return {
        "id": s.id,
        "objects": [{"cx": o.box.cx, "cy": o.box.cy, "w": o.box.w, "h": o.box.h,
                     "category": o.category, "color": o.color, "is_referent": o.is_referent}
                    for o in s.objects],
        "pose": None if s.pose is None else {k: _pt(getattr(s.pose, k)) for k in KEYPOINTS},
        "utterance": list(s.utterance),
        "utterance_text": s.utterance_text,
        "referent_span": list(s.referent_span),
        "condition": s.condition.value,
    }


def scene_from_record(r: dict) -> Scene:
    pose = r["pose"]
    if pose is not None:
        pose = HumanPose(**{k: None if pose[k] is None else Point2(*map(float, pose[k])) for k in KEYPOINTS})
    objects = []
    for o in r["objects"]:
        if o["category"] not in CATEGORIES or o["color"] not in COLORS:
            raise ValueError(f"unknown category/color {o['category']!r}/{o['color']!r}")
        objects.append(SceneObject(BoxCXYWH(float(o["cx"]), float(o["cy"]), float(o["w"]), float(o["h"])),
                                   o["category"], o["color"], bool(o["is_referent"])))
    utt = tuple(int(t) for t in r["utterance"])
    if any(not 0 <= t < len(VOCAB) for t in utt):
        raise ValueError("token id outside vocabulary")
    return Scene(str(r["id"]), tuple(objects), pose, utt, str(r["utterance_text"]),
                 tuple(int(i) for i in r["referent_span"]), Condition(r["condition"]))


def write_scenes(path, scenes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s), separators=(",", ":")))
            fh.write("\n")


def read_scenes(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise MalformedRecord(no, f"{type(e).__name__}: {e}") from e
    return scenes


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    grids: np.ndarray       # (B, G, G, C)
    tokens: np.ndarray      # (B, M)
    text_mask: np.ndarray   # (B, M) True on real tokens
    boxes: np.ndarray       # (B, 4) referent CXYWH
    spans: np.ndarray       # (B, 2) referent span [start, end)
    lines: np.ndarray       # (B, 4) gt gesture line (proximal xy, distal xy); zeros if absent
    line_mask: np.ndarray   # (B,) True where a gt line exists for the requested kind

    def __len__(self):
        return len(self.boxes)


def collate(scenes, gesture_kind: GestureKind | str | None = None, grid_size: int = 16,
            max_len: int = MAX_TEXT_LEN, grids: np.ndarray | None = None) -> Batch:
    """Stack scenes into model inputs and targets.

    Lines are filled only for ``gesture_kind`` and only where the pose is visible
    under the scene's condition and has the needed keypoints.
    """
    n = len(scenes)
    if grids is None:
        grids = np.stack([rasterize(s, grid_size) for s in scenes]) if n else np.zeros((0, grid_size, grid_size, NUM_CHANNELS))
    tokens = np.stack([pad_tokens(s.utterance, max_len) for s in scenes]) if n else np.zeros((0, max_len), np.int64)
    lines = np.zeros((n, 4))
    mask = np.zeros(n, dtype=bool)
    if gesture_kind is not None:
        for i, s in enumerate(scenes):
            line = s.gesture_line(gesture_kind)
            if line is not None:
                lines[i] = (*line.proximal.as_tuple(), *line.distal.as_tuple())
                mask[i] = True
    return Batch(
        grids=grids,
        tokens=tokens,
        text_mask=tokens != PAD_ID,
        boxes=np.array([s.referent.box.as_tuple() for s in scenes]).reshape(n, 4),
        spans=np.array([s.referent_span for s in scenes], dtype=np.int64).reshape(n, 2),
        lines=lines,
        line_mask=mask,
    )

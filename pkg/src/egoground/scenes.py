"""Synthetic desk-scale scenes with analytic RGB-D rendering.

A scene is a handful of non-overlapping oriented boxes inside a room, viewed
by pinhole cameras on a ring looking inward.  Depth is rendered by exact
ray / box slab intersection, so the generator needs no mesh machinery and
the depth maps are reproducible bit for bit from the seed.

Language supervision is template based.  A referring expression is either
"the <class>" when the class is unique, or "the <class> <relation> the
<reference-class>" where the relation disambiguates the target from its
same-class distractors.  Relations: nearest-to (view independent), left-of,
right-of and above (all three marked view dependent; left/right are taken in
camera 0's frame).  An instruction is hard when at least one same-class
distractor exists.

Stub embeddings stand in for pretrained text and image backbones: fixed
seeded tables keyed by word id and by the class id visible at a pixel, the
latter shifted along a fixed direction by normalized depth.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .boxes import Box9DoF, box_corners, box_iou_exact
from .geometry import CameraIntrinsics, CameraPose, DepthMap, ViewFeatureMap

Array = np.ndarray

CLASS_NAMES = ("chair", "table", "sofa", "lamp", "cabinet", "plant")
VOCABULARY = ("the",) + CLASS_NAMES + ("nearest", "to", "left", "of", "right", "above")
WORD_IDS = {word: i for i, word in enumerate(VOCABULARY)}

DEFAULT_STUB_SEED = 701

SCENE_FORMAT = "egoground-scene-v1"

_RELATION_MARGIN = 0.05
_HIT_EPS = 1e-9


class SceneFormatError(ValueError):
    """A scene file is missing or misusing a required field."""


class InstructionError(RuntimeError):
    """No unambiguous referring expression exists for the requested target."""


@dataclass
class SceneConfig:
    n_objects_min: int = 3
    n_objects_max: int = 6
    room_size: float = 4.0
    room_height: float = 2.4
    n_cameras: int = 3
    image_width: int = 32
    image_height: int = 24
    focal: float = 24.0
    max_attempts: int = 400
    force_distractors: bool = False

    def __post_init__(self):
        if self.n_objects_min < 1 or self.n_objects_max < self.n_objects_min:
            raise ValueError("object count range must satisfy 1 <= min <= max")
        if self.n_cameras < 1:
            raise ValueError("at least one camera required")


@dataclass
class SceneObject:
    box: Box9DoF
    class_id: int


@dataclass
class Scene:
    objects: list[SceneObject]
    cameras: list[tuple[CameraIntrinsics, CameraPose]]
    room_lo: Array
    room_hi: Array
    seed_words: tuple[int, ...]

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for obj in self.objects:
            counts[obj.class_id] = counts.get(obj.class_id, 0) + 1
        return counts


@dataclass
class Instruction:
    tokens: list[int]
    target: int
    difficulty: str  # "easy" | "hard"
    view_dep: bool

    def words(self) -> list[str]:
        return [VOCABULARY[t] for t in self.tokens]


def look_at(eye: Array, target: Array) -> CameraPose:
    """Pose for a camera at ``eye`` looking toward ``target`` (x right, y down, z forward)."""
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValueError("camera eye and target coincide")
    forward = forward / norm
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("camera looking straight along the up axis")
    right = right / rnorm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return CameraPose(rotation=rotation, translation=np.asarray(eye, dtype=np.float64))


def _inflate(box: Box9DoF, margin: float) -> Box9DoF:
    return Box9DoF(box.x, box.y, box.z, box.l + margin, box.w + margin, box.h + margin,
                   box.alpha, box.beta, box.gamma)


def generate_scene(cfg: SceneConfig, seed_words: tuple[int, ...]) -> Scene:
    """Rejection-sample non-overlapping boxes and place the camera ring.

    Raises RuntimeError naming the object index if placement keeps failing.
    """
    rng = make_rng(*seed_words)
    half = cfg.room_size / 2.0
    room_lo = np.array([-half, -half, 0.0])
    room_hi = np.array([half, half, cfg.room_height])
    n = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
    objects: list[SceneObject] = []
    for i in range(n):
        if cfg.force_distractors and i == 1:
            class_id = objects[0].class_id
        else:
            class_id = int(rng.integers(0, len(CLASS_NAMES)))
        placed = False
        for _ in range(cfg.max_attempts):
            l, w = rng.uniform(0.35, 0.9, size=2)
            h = rng.uniform(0.3, 0.8)
            cx, cy = rng.uniform(-half + 0.7, half - 0.7, size=2)
            cz = rng.uniform(h / 2.0 + 0.02, cfg.room_height - h / 2.0 - 0.8)
            alpha = rng.uniform(-np.pi, np.pi)
            beta, gamma = rng.uniform(-0.2, 0.2, size=2)
            box = Box9DoF(cx, cy, cz, l, w, h, alpha, beta, gamma)
            corners = box_corners(box)
            if (corners < room_lo).any() or (corners > room_hi).any():
                continue
            # keep a small clearance so voxel labels never straddle objects
            grown = _inflate(box, 0.1)
            if any(box_iou_exact(grown, _inflate(o.box, 0.1)) > 0.0 for o in objects):
                continue
            objects.append(SceneObject(box=box, class_id=class_id))
            placed = True
            break
        if not placed:
            raise RuntimeError(f"could not place object {i} after {cfg.max_attempts} attempts")

    cameras = []
    ring = half + 0.6
    phase = rng.uniform(0.0, 2.0 * np.pi)
    focus = np.array([0.0, 0.0, 0.5])
    cam = CameraIntrinsics(fx=cfg.focal, fy=cfg.focal,
                           cx=(cfg.image_width - 1) / 2.0, cy=(cfg.image_height - 1) / 2.0,
                           width=cfg.image_width, height=cfg.image_height)
    for c in range(cfg.n_cameras):
        ang = phase + 2.0 * np.pi * c / cfg.n_cameras
        eye = np.array([ring * np.cos(ang), ring * np.sin(ang), rng.uniform(1.5, 1.9)])
        cameras.append((cam, look_at(eye, focus)))
    return Scene(objects=objects, cameras=cameras, room_lo=room_lo, room_hi=room_hi,
                 seed_words=tuple(int(s) for s in seed_words))


def render_depth_and_classes(scene: Scene, view_idx: int) -> tuple[DepthMap, Array]:
    """Analytic depth and per-pixel class id (-1 where no box is hit).

    Depth is the camera-frame z of the nearest slab-test hit; rays through
    integer pixel coordinates.
    """
    if not 0 <= view_idx < len(scene.cameras):
        raise IndexError(f"view {view_idx} out of range (scene has {len(scene.cameras)})")
    cam, pose = scene.cameras[view_idx]
    vs, us = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    dirs_cam = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1)
    dirs_world = dirs_cam.reshape(-1, 3) @ pose.rotation.T
    origin = pose.translation

    best_t = np.full(dirs_world.shape[0], np.inf)
    best_cls = np.full(dirs_world.shape[0], -1, dtype=np.int64)
    for obj in scene.objects:
        r = obj.box.rotation()
        o_local = (origin - obj.box.center) @ r
        d_local = dirs_world @ r
        half_ext = obj.box.extents / 2.0
        d_safe = np.where(np.abs(d_local) < 1e-300, 1e-300, d_local)
        t1 = (-half_ext - o_local) / d_safe
        t2 = (half_ext - o_local) / d_safe
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        hit = (t_near <= t_far) & (t_near > _HIT_EPS)
        closer = hit & (t_near < best_t)
        best_t[closer] = t_near[closer]
        best_cls[closer] = obj.class_id

    valid = np.isfinite(best_t)
    values = np.where(valid, best_t, 0.0).reshape(cam.height, cam.width)
    classes = best_cls.reshape(cam.height, cam.width)
    return DepthMap(values=values, valid=valid.reshape(cam.height, cam.width)), classes


def render_depth(scene: Scene, view_idx: int) -> DepthMap:
    depth, _ = render_depth_and_classes(scene, view_idx)
    return depth


def _camera_frame_x(scene: Scene, center: Array) -> float:
    cam, pose = scene.cameras[0]
    return float(pose.world_to_camera(center)[0, 0])


def choose_target(scene: Scene, rng: np.random.Generator) -> int:
    """Prefer an object that has same-class distractors, else any object."""
    counts = scene.class_counts()
    with_distractors = [i for i, o in enumerate(scene.objects) if counts[o.class_id] > 1]
    pool = with_distractors if with_distractors else list(range(len(scene.objects)))
    return int(pool[rng.integers(0, len(pool))])


def make_instruction(scene: Scene, target_idx: int, seed_words: tuple[int, ...]) -> Instruction:
    """Template referring expression that uniquely identifies the target.

    Raises InstructionError when no template disambiguates the target from
    its same-class distractors.
    """
    if not 0 <= target_idx < len(scene.objects):
        raise IndexError(f"target {target_idx} out of range")
    rng = make_rng(*seed_words)
    target = scene.objects[target_idx]
    cls_word = CLASS_NAMES[target.class_id]
    distractors = [o for i, o in enumerate(scene.objects)
                   if i != target_idx and o.class_id == target.class_id]
    if not distractors:
        return Instruction(tokens=[WORD_IDS["the"], WORD_IDS[cls_word]],
                           target=target_idx, difficulty="easy", view_dep=False)

    counts = scene.class_counts()
    references = [o for o in scene.objects
                  if counts[o.class_id] == 1 and o.class_id != target.class_id]
    relations = list(rng.permutation(["nearest", "left", "right", "above"]))
    ref_order = list(rng.permutation(len(references))) if references else []

    m = _RELATION_MARGIN
    for relation in relations:
        for ref_i in ref_order:
            ref = references[ref_i]
            t_c, r_c = target.box.center, ref.box.center
            d_c = [d.box.center for d in distractors]
            if relation == "nearest":
                t_dist = np.linalg.norm(t_c - r_c)
                ok = all(np.linalg.norm(dc - r_c) > t_dist + m for dc in d_c)
                view_dep = False
                words = ["the", cls_word, "nearest", "to", "the", CLASS_NAMES[ref.class_id]]
            elif relation in ("left", "right"):
                sign = -1.0 if relation == "left" else 1.0
                t_x = _camera_frame_x(scene, t_c)
                r_x = _camera_frame_x(scene, r_c)
                ok = sign * (t_x - r_x) > m and all(
                    sign * (_camera_frame_x(scene, dc) - r_x) < -m for dc in d_c)
                view_dep = True
                words = ["the", cls_word, relation, "of", "the", CLASS_NAMES[ref.class_id]]
            else:  # above
                ok = t_c[2] > r_c[2] + m and all(dc[2] < r_c[2] - m for dc in d_c)
                view_dep = True
                words = ["the", cls_word, "above", "the", CLASS_NAMES[ref.class_id]]
            if ok:
                return Instruction(tokens=[WORD_IDS[w] for w in words], target=target_idx,
                                   difficulty="hard", view_dep=view_dep)
    raise InstructionError(f"no unambiguous expression for object {target_idx}")


class StubEmbeddings:
    """Fixed seeded tables standing in for pretrained text / image backbones."""

    def __init__(self, seed: int = DEFAULT_STUB_SEED, text_dim: int = 16, feat2d_dim: int = 16):
        rng = make_rng(seed, 1)
        self.text_dim = text_dim
        self.feat2d_dim = feat2d_dim
        self.word_table = rng.normal(size=(len(VOCABULARY), text_dim)) / np.sqrt(text_dim)
        # row 0 is the background (no surface hit)
        self.class_table = rng.normal(size=(len(CLASS_NAMES) + 1, feat2d_dim)) / np.sqrt(feat2d_dim)
        self.depth_vector = rng.normal(size=(feat2d_dim,)) / np.sqrt(feat2d_dim)

    def token_vectors(self, tokens: list[int]) -> Array:
        if len(tokens) == 0:
            raise ValueError("empty token sequence")
        return self.word_table[np.asarray(tokens, dtype=np.intp)]

    def view_feature_map(self, scene: Scene, view_idx: int,
                         depth: DepthMap | None = None, classes: Array | None = None) -> ViewFeatureMap:
        """Per-pixel embedding of (visible class id, normalized depth)."""
        if depth is None or classes is None:
            depth, classes = render_depth_and_classes(scene, view_idx)
        cam, pose = scene.cameras[view_idx]
        max_depth = float(np.linalg.norm(scene.room_hi - scene.room_lo)) + 1.0
        dnorm = np.clip(depth.values / max_depth, 0.0, 1.0)
        grid = self.class_table[classes + 1] + dnorm[:, :, None] * self.depth_vector
        return ViewFeatureMap(grid=grid, cam=cam, pose=pose)


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------


def scene_to_dict(scene: Scene, instructions: list[Instruction]) -> dict:
    return {
        "format": SCENE_FORMAT,
        "seed_words": list(scene.seed_words),
        "room": {"lo": scene.room_lo.tolist(), "hi": scene.room_hi.tolist()},
        "objects": [
            {
                "class": obj.class_id,
                "center": [obj.box.x, obj.box.y, obj.box.z],
                "extents": [obj.box.l, obj.box.w, obj.box.h],
                "angles": [obj.box.alpha, obj.box.beta, obj.box.gamma],
            }
            for obj in scene.objects
        ],
        "cameras": [
            {
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "width": cam.width, "height": cam.height,
                "rotation": pose.rotation.tolist(),
                "translation": pose.translation.tolist(),
            }
            for cam, pose in scene.cameras
        ],
        "instructions": [
            {
                "tokens": list(ins.tokens),
                "target": ins.target,
                "difficulty": ins.difficulty,
                "view_dep": ins.view_dep,
            }
            for ins in instructions
        ],
    }


def save_scene(scene: Scene, instructions: list[Instruction], path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene, instructions), indent=2) + "\n")


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise SceneFormatError(f"missing field {where}.{key}")
    return mapping[key]


def _check_unknown(mapping: dict, known: set[str], where: str) -> None:
    unknown = set(mapping) - known
    if unknown:
        warnings.warn(f"ignoring unknown fields at {where}: {sorted(unknown)}")


def scene_from_dict(data: dict) -> tuple[Scene, list[Instruction]]:
    if data.get("format") != SCENE_FORMAT:
        raise SceneFormatError(f"unrecognized scene format {data.get('format')!r}")
    _check_unknown(data, {"format", "seed_words", "room", "objects", "cameras", "instructions"},
                   "scene")
    room = _require(data, "room", "scene")
    lo = np.asarray(_require(room, "lo", "scene.room"), dtype=np.float64)
    hi = np.asarray(_require(room, "hi", "scene.room"), dtype=np.float64)

    objects = []
    for i, entry in enumerate(_require(data, "objects", "scene")):
        where = f"scene.objects[{i}]"
        _check_unknown(entry, {"class", "center", "extents", "angles"}, where)
        class_id = int(_require(entry, "class", where))
        if not 0 <= class_id < len(CLASS_NAMES):
            raise SceneFormatError(f"{where}.class out of range")
        center = _require(entry, "center", where)
        extents = _require(entry, "extents", where)
        angles = _require(entry, "angles", where)
        objects.append(SceneObject(box=Box9DoF(*center, *extents, *angles), class_id=class_id))
    if not objects:
        raise SceneFormatError("scene.objects must not be empty")

    cameras = []
    for i, entry in enumerate(_require(data, "cameras", "scene")):
        where = f"scene.cameras[{i}]"
        _check_unknown(entry, {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"},
                       where)
        cam = CameraIntrinsics(
            fx=float(_require(entry, "fx", where)), fy=float(_require(entry, "fy", where)),
            cx=float(_require(entry, "cx", where)), cy=float(_require(entry, "cy", where)),
            width=int(_require(entry, "width", where)), height=int(_require(entry, "height", where)),
        )
        pose = CameraPose(rotation=np.asarray(_require(entry, "rotation", where), dtype=np.float64),
                          translation=np.asarray(_require(entry, "translation", where), dtype=np.float64))
        cameras.append((cam, pose))
    if not cameras:
        raise SceneFormatError("scene.cameras must not be empty")

    instructions = []
    for i, entry in enumerate(data.get("instructions", [])):
        where = f"scene.instructions[{i}]"
        _check_unknown(entry, {"tokens", "target", "difficulty", "view_dep"}, where)
        tokens = [int(t) for t in _require(entry, "tokens", where)]
        if any(not 0 <= t < len(VOCABULARY) for t in tokens):
            raise SceneFormatError(f"{where}.tokens out of vocabulary")
        target = int(_require(entry, "target", where))
        if not 0 <= target < len(objects):
            raise SceneFormatError(f"{where}.target out of range")
        difficulty = _require(entry, "difficulty", where)
        if difficulty not in ("easy", "hard"):
            raise SceneFormatError(f"{where}.difficulty must be easy or hard")
        instructions.append(Instruction(tokens=tokens, target=target, difficulty=difficulty,
                                        view_dep=bool(_require(entry, "view_dep", where))))

    scene = Scene(objects=objects, cameras=cameras, room_lo=lo, room_hi=hi,
                  seed_words=tuple(int(s) for s in data.get("seed_words", [])))
    return scene, instructions


def load_scene(path: str | Path) -> tuple[Scene, list[Instruction]]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"not valid JSON: {exc}") from exc
    return scene_from_dict(data)

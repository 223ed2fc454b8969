"""Synthetic scenes with a rule-based plausibility oracle and sparse annotations.

A scene is a stack of binary channels on a square grid: one occupancy
channel per object class, one support-surface channel (thin horizontal
shelves and a floor), and a free-space channel. A box of a given class is
plausible iff

* R1: the pixel row directly below the box is support across the box's full width,
* R2: the box does not overlap any occupied pixel,
* R3: its area, as a fraction of the image, is inside the class range,
* R4: its aspect ratio (w / h) is inside the class range.

Annotations imitate a human labelling regime: candidate placements are
proposed (most of them snapped onto a surface, the rest dropped anywhere),
judged by the oracle, and a small capped subset is kept.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BBox
from .rng import substream

POS, NEG = "pos", "neg"


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    name: str
    area_frac: tuple  # (min, max) fraction of image area
    aspect: tuple  # (min, max) of width / height


DEFAULT_CLASSES = (
    ClassSpec("bottle", (0.008, 0.03), (0.3, 0.6)),
    ClassSpec("box", (0.015, 0.06), (0.75, 1.33)),
    ClassSpec("laptop", (0.02, 0.07), (1.5, 2.5)),
    ClassSpec("plant", (0.03, 0.10), (0.6, 0.9)),
)


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    n_shelves: tuple = (1, 2)  # surfaces in addition to the floor
    n_objects: tuple = (1, 4)
    classes: tuple = DEFAULT_CLASSES
    shelf_len: tuple = (20, 44)
    min_surface_gap: int = 12
    max_retries: int = 200

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def n_channels(self) -> int:
        return self.num_classes + 2

    @property
    def support_channel(self) -> int:
        return self.num_classes

    @property
    def free_channel(self) -> int:
        return self.num_classes + 1


@dataclass(frozen=True)
class AnnotationConfig:
    max_pos: int = 20
    max_neg: int = 40
    num_candidates: int = 48
    p_snap: float = 0.7  # candidates dropped onto a surface
    p_jitter: float = 0.15  # snapped candidates whose bottom edge misses by 1-2 px
    size_slack: float = 0.15  # proposal sizes overshoot the class range by this fraction


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 2000
    n_test: int = 200
    scene: SceneConfig = field(default_factory=SceneConfig)
    annotations: AnnotationConfig = field(default_factory=AnnotationConfig)


@dataclass
class Scene:
    grid: np.ndarray  # (C, H, W) uint8
    image_size: int
    scene_id: str
    seed: int
    _occ_sat: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return self.grid.shape[0] - 2

    @property
    def support(self) -> np.ndarray:
        return self.grid[self.num_classes]

    @property
    def free(self) -> np.ndarray:
        return self.grid[self.num_classes + 1]

    def occupancy_sat(self) -> np.ndarray:
        """Summed-area table of the union of occupancy channels, (H+1, W+1)."""
        if self._occ_sat is None:
            occ = self.grid[: self.num_classes].any(axis=0).astype(np.int32)
            sat = np.zeros((self.image_size + 1, self.image_size + 1), dtype=np.int32)
            sat[1:, 1:] = occ.cumsum(0).cumsum(1)
            self._occ_sat = sat
        return self._occ_sat


@dataclass(frozen=True)
class ClassId:
    id: int
    name: str


@dataclass(frozen=True)
class Annotation:
    bbox: BBox
    label: str


@dataclass
class AnnotationSet:
    scene_id: str
    cls: ClassId
    annotations: list
    flagged: bool = False  # no positive found within the candidate budget

    @property
    def positives(self) -> list:
        return [a.bbox for a in self.annotations if a.label == POS]

    @property
    def negatives(self) -> list:
        return [a.bbox for a in self.annotations if a.label == NEG]


@dataclass
class Dataset:
    scenes: list
    samples: list
    split: str

    def scene(self, scene_id: str) -> Scene:
        if not hasattr(self, "_index"):
            self._index = {s.scene_id: s for s in self.scenes}
        return self._index[scene_id]


@dataclass(frozen=True)
class PreferencePair:
    scene_id: str
    cls: ClassId
    preferred: BBox
    rejected: BBox


def class_ids(config: SceneConfig) -> list:
    return [ClassId(i, c.name) for i, c in enumerate(config.classes)]


def _as_class(cls, config_or_n) -> ClassId:
    n = config_or_n if isinstance(config_or_n, int) else config_or_n.num_classes
    cid = cls.id if isinstance(cls, ClassId) else int(cls)
    if not 0 <= cid < n:
        raise SceneError(f"unknown class {cls!r}")
    return cls if isinstance(cls, ClassId) else ClassId(cid, str(cid))


# -- scenes -------------------------------------------------------------------

def _object_size(spec: ClassSpec, S: int, rs) -> tuple[int, int]:
    for _ in range(100):
        area = rs.uniform(*spec.area_frac) * S * S
        aspect = math.exp(rs.uniform(math.log(spec.aspect[0]), math.log(spec.aspect[1])))
        w = int(round(math.sqrt(area * aspect)))
        h = int(round(area / max(w, 1)))
        if w >= 1 and h >= 1 and _size_ok(spec, w, h, S):
            return w, h
    raise SceneError(f"cannot draw a valid size for class {spec.name}")


def _size_ok(spec: ClassSpec, w: float, h: float, S: int) -> bool:
    if w <= 0 or h <= 0:
        return False
    a = w * h / (S * S)
    r = w / h
    return spec.area_frac[0] <= a <= spec.area_frac[1] and spec.aspect[0] <= r <= spec.aspect[1]


def generate_scene(config: SceneConfig, seed: int, scene_id: str | None = None) -> Scene:
    """Deterministic scene for ``(config, seed)``.

    Always has a floor plus ``n_shelves`` shelves; existing objects stand on
    surfaces without overlapping each other.
    """
    S = config.image_size
    rs = substream(seed, "scene")
    for _ in range(config.max_retries):
        floor = S - 1 - int(rs.integers(0, 5))
        surfaces = [(floor, 0, S)]
        n_sh = int(rs.integers(config.n_shelves[0], config.n_shelves[1] + 1))
        ok = True
        for _ in range(n_sh):
            for _ in range(config.max_retries):
                row = int(rs.integers(S // 5, floor - config.min_surface_gap + 1))
                if all(abs(row - r) >= config.min_surface_gap for r, _, _ in surfaces):
                    break
            else:
                ok = False
                break
            length = int(rs.integers(config.shelf_len[0], min(config.shelf_len[1], S) + 1))
            x0 = int(rs.integers(0, S - length + 1))
            surfaces.append((row, x0, x0 + length))
        if ok:
            break
    else:
        raise SceneError("could not lay out support surfaces")

    grid = np.zeros((config.n_channels, S, S), dtype=np.uint8)
    for row, x0, x1 in surfaces:
        grid[config.support_channel, row, x0:x1] = 1

    n_obj = int(rs.integers(config.n_objects[0], config.n_objects[1] + 1))
    occupied = np.zeros((S, S), dtype=bool)
    for _ in range(n_obj):
        for _ in range(config.max_retries):
            c = int(rs.integers(0, config.num_classes))
            w, h = _object_size(config.classes[c], S, rs)
            row, sx0, sx1 = surfaces[int(rs.integers(0, len(surfaces)))]
            if sx1 - sx0 < w or row - h < 0:
                continue
            x = int(rs.integers(sx0, sx1 - w + 1))
            if occupied[row - h:row, x:x + w].any() or grid[config.support_channel, row - h:row, x:x + w].any():
                continue
            occupied[row - h:row, x:x + w] = True
            grid[c, row - h:row, x:x + w] = 1
            break
        else:
            raise SceneError(f"could not place {n_obj} objects after {config.max_retries} retries")

    grid[config.free_channel] = ~(occupied | grid[config.support_channel].astype(bool))
    sid = scene_id if scene_id is not None else f"scene-{seed}"
    return Scene(grid=grid, image_size=S, scene_id=sid, seed=seed)


def check_scene(scene: Scene) -> None:
    """Raise SceneError if any structural scene invariant fails."""
    g = scene.grid
    S = scene.image_size
    if g.ndim != 3 or g.shape[1:] != (S, S):
        raise SceneError(f"grid shape {g.shape} inconsistent with image_size {S}")
    if not np.isin(g, (0, 1)).all():
        raise SceneError("grid is not binary")
    occ = g[: scene.num_classes].any(axis=0)
    if (g[: scene.num_classes].sum(axis=0) > 1).any():
        raise SceneError("objects overlap")
    if (occ & scene.support.astype(bool)).any():
        raise SceneError("object intersects a support surface")
    if not np.array_equal(scene.free.astype(bool), ~(occ | scene.support.astype(bool))):
        raise SceneError("free-space channel is not the complement of occupancy and support")
    if not scene.support.any():
        raise SceneError("scene has no support surface")


# -- plausibility -------------------------------------------------------------

def plausibility(scene: Scene, cls, b: BBox, classes=DEFAULT_CLASSES) -> bool:
    cid = _as_class(cls, len(classes)).id
    if b.image_size != scene.image_size:
        raise SceneError("box and scene image sizes differ")
    S = scene.image_size
    x1, y1 = int(math.floor(b.x1)), int(math.floor(b.y1))
    x2, y2 = int(math.ceil(b.x2)), int(math.ceil(b.y2))
    if x2 <= x1 or y2 <= y1:
        return False
    # R1: supported along the whole bottom edge
    if y2 >= S or not scene.support[y2, x1:x2].all():
        return False
    # R2: no overlap with existing objects
    sat = scene.occupancy_sat()
    if sat[y2, x2] - sat[y1, x2] - sat[y2, x1] + sat[y1, x1] > 0:
        return False
    # R3, R4
    return _size_ok(classes[cid], b.width, b.height, S)


# -- annotations --------------------------------------------------------------

def _surfaces(scene: Scene) -> list:
    """(row, x_start, x_end) runs of the support channel."""
    out = []
    sup = scene.support
    for row in np.flatnonzero(sup.any(axis=1)):
        r = np.concatenate([[0], sup[row].astype(np.int8), [0]])
        d = np.diff(r)
        for s, e in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
            out.append((int(row), int(s), int(e)))
    return out


def propose_box(scene: Scene, spec: ClassSpec, config: AnnotationConfig, rs, surfaces) -> BBox:
    S = scene.image_size
    lo_a, hi_a = spec.area_frac[0] * (1 - config.size_slack), spec.area_frac[1] * (1 + config.size_slack)
    lo_r, hi_r = spec.aspect[0] * (1 - config.size_slack), spec.aspect[1] * (1 + config.size_slack)
    area = math.exp(rs.uniform(math.log(lo_a), math.log(hi_a))) * S * S
    aspect = math.exp(rs.uniform(math.log(lo_r), math.log(hi_r)))
    w = min(max(int(round(math.sqrt(area * aspect))), 1), S - 1)
    h = min(max(int(round(area / w)), 1), S - 1)
    if rs.random() < config.p_snap:
        row, sx0, sx1 = surfaces[int(rs.integers(0, len(surfaces)))]
        y2 = row
        if rs.random() < config.p_jitter:
            y2 += int(rs.choice([-2, -1, 1, 2]))
        y2 = min(max(y2, h), S)
        lo = min(max(0, sx0 - w // 4), S - w)
        hi = min(S - w, sx1 - w + w // 4)
        x1 = int(rs.integers(lo, max(lo, hi) + 1))
    else:
        x1 = int(rs.integers(0, S - w + 1))
        y2 = int(rs.integers(h, S + 1))
    return BBox(x1, y2 - h, x1 + w, y2, S)


def anchor_count(image_size: int, stride: int = 8) -> int:
    """Ordered corner pairs on a ``stride``-pixel lattice: (image_size / stride + 1) ** 4."""
    return (image_size // stride + 1) ** 4


def sample_annotations(scene: Scene, cls, config: AnnotationConfig, seed: int,
                       classes=DEFAULT_CLASSES) -> AnnotationSet:
    cid = _as_class(cls, len(classes))
    cid = ClassId(cid.id, classes[cid.id].name)
    rs = substream(seed, "annotations", scene.scene_id, cid.id)
    surfaces = _surfaces(scene)
    spec = classes[cid.id]
    pos, neg, seen = [], [], set()
    for _ in range(config.num_candidates):
        b = propose_box(scene, spec, config, rs, surfaces)
        key = tuple(b.as_list())
        if key in seen:
            continue
        seen.add(key)
        if plausibility(scene, cid, b, classes):
            if len(pos) < config.max_pos:
                pos.append(Annotation(b, POS))
        elif len(neg) < config.max_neg:
            neg.append(Annotation(b, NEG))
    anns = pos + neg
    if len(anns) >= 0.01 * anchor_count(scene.image_size):
        raise SceneError("annotation budget exceeds 1% of the anchor lattice")
    return AnnotationSet(scene.scene_id, cid, anns, flagged=not pos)


def build_dataset(config: DatasetConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Train and test splits; scene seeds are disjoint by construction."""
    out = []
    for split, n in (("train", config.n_train), ("test", config.n_test)):
        scenes, samples = [], []
        for i in range(n):
            sseed = int(substream(seed, "scene-seed", split, i).integers(0, 2**62))
            sc = generate_scene(config.scene, sseed, scene_id=f"{split}-{i:05d}")
            scenes.append(sc)
            for cid in class_ids(config.scene):
                a = sample_annotations(sc, cid, config.annotations, seed, config.scene.classes)
                if a.positives:
                    samples.append(a)
        out.append(Dataset(scenes, samples, split))
    return out[0], out[1]


def build_preference_dataset(d: Dataset, seed: int, epoch: int = 0) -> list:
    """One pair per positive, its rejected side a uniformly drawn negative of the same set."""
    pairs = []
    for a in d.samples:
        negs = a.negatives
        if not negs:
            continue
        rs = substream(seed, "pairs", epoch, a.scene_id, a.cls.id)
        for p in a.positives:
            pairs.append(PreferencePair(a.scene_id, a.cls, p, negs[int(rs.integers(0, len(negs)))]))
    return pairs


# -- JSONL I/O ----------------------------------------------------------------

def rle_encode(grid: np.ndarray) -> list:
    """Per channel, per row: alternating run lengths starting with a run of zeros."""
    out = []
    for ch in grid:
        rows = []
        for row in ch:
            d = np.flatnonzero(np.diff(np.concatenate([[0], row.astype(np.int8), [0]])))
            edges = np.concatenate([[0], d, [len(row)]])
            runs = np.diff(edges)
            if runs[-1] == 0:
                runs = runs[:-1]
            rows.append([int(r) for r in runs])
        out.append(rows)
    return out


def rle_decode(rle: list, image_size: int) -> np.ndarray:
    grid = np.zeros((len(rle), image_size, image_size), dtype=np.uint8)
    for c, rows in enumerate(rle):
        for y, runs in enumerate(rows):
            x, val = 0, 0
            for r in runs:
                if val:
                    grid[c, y, x:x + r] = 1
                x += r
                val ^= 1
    return grid


def _json_num(v):
    return int(v) if float(v).is_integer() else float(v)


def write_dataset(d: Dataset, directory, scene_file: str = "scenes.jsonl",
                  ann_file: str = "annotations.jsonl") -> None:
    """Scenes once per id in ``scenes.jsonl``; one record per AnnotationSet in ``annotations.jsonl``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scene_lines = [json.dumps({"scene_id": s.scene_id, "image_size": s.image_size, "seed": s.seed,
                               "grid_rle": rle_encode(s.grid)}, separators=(",", ":"))
                   for s in d.scenes]
    ann_lines = [json.dumps({"scene_id": a.scene_id, "image_size": d.scene(a.scene_id).image_size,
                             "class": a.cls.id, "class_name": a.cls.name, "split": d.split,
                             "flagged": a.flagged,
                             "annotations": [{"bbox": [_json_num(v) for v in x.bbox.as_list()],
                                              "label": x.label} for x in a.annotations]},
                            separators=(",", ":"))
                 for a in d.samples]
    for name, lines in ((scene_file, scene_lines), (ann_file, ann_lines)):
        tmp = directory / (name + ".tmp")
        tmp.write_text("".join(line + "\n" for line in lines))
        tmp.replace(directory / name)


def read_dataset(directory, split: str, scene_file: str = "scenes.jsonl",
                 ann_file: str = "annotations.jsonl") -> Dataset:
    """Inverse of :func:`write_dataset`. An inline ``grid_rle`` on an annotation record is honoured."""
    directory = Path(directory)
    scenes = {}
    with open(directory / scene_file) as f:
        for line in f:
            r = json.loads(line)
            scenes[r["scene_id"]] = Scene(rle_decode(r["grid_rle"], r["image_size"]),
                                          r["image_size"], r["scene_id"], r.get("seed", 0))
    samples = []
    with open(directory / ann_file) as f:
        for line in f:
            r = json.loads(line)
            if "grid_rle" in r and r["scene_id"] not in scenes:
                scenes[r["scene_id"]] = Scene(rle_decode(r["grid_rle"], r["image_size"]),
                                              r["image_size"], r["scene_id"], 0)
            S = r["image_size"]
            anns = [Annotation(BBox.from_list(x["bbox"], S), x["label"]) for x in r["annotations"]]
            samples.append(AnnotationSet(r["scene_id"], ClassId(r["class"], r.get("class_name", str(r["class"]))),
                                         anns, flagged=r.get("flagged", False)))
    return Dataset(list(scenes.values()), samples, split)


def dataset_stats(d: Dataset) -> dict:
    n = len(d.samples)
    counts = [len(a.annotations) for a in d.samples]
    S = d.scenes[0].image_size if d.scenes else 0
    return {
        "split": d.split,
        "scenes": len(d.scenes),
        "samples": n,
        "mean_annotations": float(np.mean(counts)) if n else 0.0,
        "mean_positives": float(np.mean([len(a.positives) for a in d.samples])) if n else 0.0,
        "mean_negatives": float(np.mean([len(a.negatives) for a in d.samples])) if n else 0.0,
        "max_sparsity_ratio": (max(counts) / anchor_count(S)) if n else 0.0,
    }


def config_to_dict(config: DatasetConfig) -> dict:
    return asdict(config)

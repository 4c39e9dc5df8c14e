"""Instruction-dataset construction from standard annotation sources.

Answer grammar
--------------

Every answer is a block of mark lines, optionally followed by a coordinate
tail. Region-level tasks use "<Region k>" and a box tail, point-level tasks
use "<Mark k>" and a point tail, and image-level tasks are a single mark
line with no tail:

    <Region 1>: airplane\n<Region 2>: vehicle\n'bbox':[10,10,50,50],[60,60,90,90]
    <Mark 1>: ship\n'points':[5,9]
    <Region 1>: airport

Coordinates appear in mark order and must equal the record's prompt
coordinates, so parse_answer(render_answer(content), task) is an exact
round trip. Records are stored one per line as JSON with image paths
relative to the JSONL file that holds them.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .images import paint_rect, write_ppm
from .prompts import Level, PromptKind, PromptSpec, level_of, validate_prompts
from .vocab import MAX_MARKS


class RecordError(ValueError):
    pass


class AnswerParseError(ValueError):
    """Raised when an answer string does not match the grammar.

    Carries the character offset of the first offending position so CLI
    diagnostics can point at it.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class AugmentError(ValueError):
    pass


class Task(str, enum.Enum):
    SCENE_CLASSIFICATION = "scene_classification"
    IMAGE_CAPTION = "image_caption"
    REGION_CAPTION = "region_caption"
    REFERRING_BOX = "referring_classification_box"
    REFERRING_POINT = "referring_classification_point"
    RELATIONSHIP = "relationship"
    GROUNDED_CAPTION = "grounded_caption"


TASK_LEVEL = {
    Task.SCENE_CLASSIFICATION: Level.IMAGE,
    Task.IMAGE_CAPTION: Level.IMAGE,
    Task.REGION_CAPTION: Level.REGION,
    Task.REFERRING_BOX: Level.REGION,
    Task.REFERRING_POINT: Level.POINT,
    Task.RELATIONSHIP: Level.REGION,
    Task.GROUNDED_CAPTION: Level.REGION,
}

INSTRUCTIONS = {
    Task.SCENE_CLASSIFICATION: "Please identify the object category of each marked region in the image",
    Task.IMAGE_CAPTION: "Please provide a detailed description of the <Region 1> in the image",
    Task.REGION_CAPTION: "Please provide the brief caption of each marked region in the image",
    Task.REFERRING_BOX: "Please identify the category of each marked region in the image",
    Task.REFERRING_POINT: "Please identify the category of each marked point in the image",
    Task.RELATIONSHIP: "Please analyze the relationship between all marked regions in the image",
    Task.GROUNDED_CAPTION: "Please provide a grounded caption covering all marked regions in the image",
}

_LEVEL_WORD = {Level.IMAGE: "Region", Level.REGION: "Region", Level.POINT: "Mark"}
_LEVEL_TAIL_KEY = {Level.IMAGE: None, Level.REGION: "bbox", Level.POINT: "points"}
_LEVEL_TAIL_ARITY = {Level.REGION: 4, Level.POINT: 2}

_MARK_LINE_RE = re.compile(r"<(Region|Mark) ([0-9]+)>: (.*)")
_TAIL_GROUP_RE = re.compile(r"\[(-?[0-9]+(?:\.[0-9]+)?(?:,-?[0-9]+(?:\.[0-9]+)?)*)\]")


def format_coord(value: float) -> str:
    """Integers print without a decimal point; 10 not 10.0."""
    f = float(value)
    if f.is_integer():
        return str(int(f))
    return repr(f)


@dataclass(frozen=True)
class AnswerContent:
    """Parsed form of an answer: mark texts plus optional coordinate tail."""

    task: Task
    marks: tuple[tuple[int, str], ...]
    coords: tuple[tuple[float, ...], ...] | None = None

    @property
    def level(self) -> Level:
        return TASK_LEVEL[self.task]


def render_answer(content: AnswerContent) -> str:
    level = content.level
    word = _LEVEL_WORD[level]
    tail_key = _LEVEL_TAIL_KEY[level]
    if not content.marks:
        raise RecordError("answer needs at least one mark line")
    lines = []
    for mark, text in content.marks:
        if mark < 1:
            raise RecordError(f"mark index {mark} must be >= 1")
        if not text or "\n" in text:
            raise RecordError(f"mark {mark} text must be non-empty and single-line")
        lines.append(f"<{word} {mark}>: {text}")
    if tail_key is None:
        if content.coords is not None:
            raise RecordError("image-level answers carry no coordinate tail")
        return "\n".join(lines)
    if content.coords is None or len(content.coords) != len(content.marks):
        raise RecordError("coordinate tail must list one group per mark")
    arity = _LEVEL_TAIL_ARITY[level]
    groups = []
    for coords in content.coords:
        if len(coords) != arity:
            raise RecordError(f"tail group {coords} must have {arity} numbers")
        groups.append("[" + ",".join(format_coord(v) for v in coords) + "]")
    tail = f"'{tail_key}':" + ",".join(groups)
    return "\n".join(lines) + "\n" + tail


def parse_answer(text: str, task: Task) -> AnswerContent:
    level = TASK_LEVEL[task]
    word = _LEVEL_WORD[level]
    tail_key = _LEVEL_TAIL_KEY[level]
    lines = text.split("\n")
    offsets = []
    pos = 0
    for line in lines:
        offsets.append(pos)
        pos += len(line) + 1

    tail_line = None
    tail_offset = 0
    if tail_key is not None:
        if len(lines) < 2:
            raise AnswerParseError(f"{task.value} answer needs a '{tail_key}' tail line", len(text))
        tail_line = lines[-1]
        tail_offset = offsets[-1]
        lines = lines[:-1]
        offsets = offsets[:-1]

    marks: list[tuple[int, str]] = []
    seen: set[int] = set()
    for line, off in zip(lines, offsets):
        m = _MARK_LINE_RE.fullmatch(line)
        if m is None:
            raise AnswerParseError(f"expected a mark line like '<{word} 1>: ...'", off)
        if m.group(1) != word:
            raise AnswerParseError(f"{task.value} answers use '<{word} k>' marks", off)
        mark = int(m.group(2))
        if mark < 1:
            raise AnswerParseError("mark indices start at 1", off)
        if mark in seen:
            raise AnswerParseError(f"duplicate mark {mark}", off)
        seen.add(mark)
        body = m.group(3)
        if not body:
            raise AnswerParseError(f"mark {mark} has empty text", off + len(line))
        marks.append((mark, body))
    if not marks:
        raise AnswerParseError("answer has no mark lines", 0)

    if tail_key is None:
        return AnswerContent(task=task, marks=tuple(marks))

    assert tail_line is not None
    prefix = f"'{tail_key}':"
    if not tail_line.startswith(prefix):
        raise AnswerParseError(f"tail line must start with \"{prefix}\"", tail_offset)
    arity = _LEVEL_TAIL_ARITY[level]
    groups: list[tuple[float, ...]] = []
    scan = len(prefix)
    while True:
        m = _TAIL_GROUP_RE.match(tail_line, scan)
        if m is None:
            raise AnswerParseError("expected a [n,...] coordinate group", tail_offset + scan)
        values = tuple(float(v) for v in m.group(1).split(","))
        if len(values) != arity:
            raise AnswerParseError(
                f"coordinate group has {len(values)} numbers, expected {arity}",
                tail_offset + scan,
            )
        groups.append(values)
        scan = m.end()
        if scan == len(tail_line):
            break
        if tail_line[scan] != ",":
            raise AnswerParseError("coordinate groups are comma-separated", tail_offset + scan)
        scan += 1
    if len(groups) != len(marks):
        raise AnswerParseError(
            f"tail lists {len(groups)} groups for {len(marks)} marks", tail_offset
        )
    return AnswerContent(task=task, marks=tuple(marks), coords=tuple(groups))


@dataclass
class InstructionRecord:
    """One training example: an image, a visual prompt set, and a QA pair."""

    image: str
    width: int
    height: int
    task: Task
    prompts: tuple[PromptSpec, ...]
    instruction: str
    answer: str

    @property
    def level(self) -> Level:
        return TASK_LEVEL[self.task]

    def prompt_specs(self) -> list[PromptSpec]:
        return list(self.prompts)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise RecordError(f"bad image size {self.width}x{self.height}")
        if not self.instruction:
            raise RecordError("instruction must be non-empty")
        if not self.prompts:
            raise RecordError("record needs at least one prompt")
        validate_prompts(list(self.prompts), self.width, self.height)
        if level_of(list(self.prompts)) != self.level:
            raise RecordError(
                f"prompt kinds disagree with task level {self.level.value}"
            )
        content = parse_answer(self.answer, self.task)
        prompt_marks = sorted(p.mark for p in self.prompts)
        answer_marks = sorted(m for m, _ in content.marks)
        if prompt_marks != answer_marks:
            raise RecordError(
                f"answer marks {answer_marks} do not match prompt marks {prompt_marks}"
            )
        if content.coords is not None:
            by_mark = {p.mark: p.coords for p in self.prompts}
            for (mark, _), coords in zip(content.marks, content.coords):
                expected = tuple(float(v) for v in by_mark[mark])
                if tuple(float(v) for v in coords) != expected:
                    raise RecordError(
                        f"tail coords {coords} for mark {mark} differ from prompt {expected}"
                    )

    def to_json_dict(self) -> dict:
        return {
            "image": self.image,
            "width": self.width,
            "height": self.height,
            "task": self.task.value,
            "level": self.level.value,
            "prompts": [
                {
                    "kind": p.kind.value,
                    "coords": [int(v) if float(v).is_integer() else float(v) for v in p.coords],
                    "mark": p.mark,
                }
                for p in self.prompts
            ],
            "instruction": self.instruction,
            "answer": self.answer,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "InstructionRecord":
        try:
            task = Task(obj["task"])
            prompts = tuple(
                PromptSpec(PromptKind(p["kind"]), tuple(p["coords"]), int(p["mark"]))
                for p in obj["prompts"]
            )
            rec = cls(
                image=obj["image"],
                width=int(obj["width"]),
                height=int(obj["height"]),
                task=task,
                prompts=prompts,
                instruction=obj["instruction"],
                answer=obj["answer"],
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise RecordError(f"malformed record object: {exc}") from exc
        if obj.get("level") != rec.level.value:
            raise RecordError(
                f"stored level {obj.get('level')!r} disagrees with task {task.value}"
            )
        return rec


def write_records(path: Path | str, records: Sequence[InstructionRecord]) -> None:
    path = Path(path)
    for rec in records:
        rec.validate()
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), separators=(",", ":")) + "\n")


def read_records(path: Path | str) -> list[InstructionRecord]:
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = InstructionRecord.from_json_dict(json.loads(line))
                rec.validate()
            except (json.JSONDecodeError, ValueError) as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# Annotation sources and converters


@dataclass
class AnnotationSource:
    """Normalized view of one image's annotations from an upstream dataset.

    kind selects which fields are meaningful:
      classification: label
      caption:        captions
      detection:      boxes + labels
      instance_seg:   masks + labels
      semantic_seg:   label_map + label_names (+ ignore_ids)
    """

    kind: str
    image: str
    width: int
    height: int
    label: str | None = None
    captions: tuple[str, ...] = ()
    boxes: tuple[tuple[float, float, float, float], ...] = ()
    labels: tuple[str, ...] = ()
    masks: tuple[np.ndarray, ...] = ()
    label_map: np.ndarray | None = None
    label_names: dict[int, str] = field(default_factory=dict)
    ignore_ids: frozenset[int] = frozenset()

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise RecordError(f"{self.image}: bad image size")
        if self.kind == "classification":
            if not self.label:
                raise RecordError(f"{self.image}: classification source needs a label")
        elif self.kind == "caption":
            if not self.captions:
                raise RecordError(f"{self.image}: caption source needs captions")
        elif self.kind == "detection":
            if not self.boxes:
                raise RecordError(f"{self.image}: detection source needs boxes")
            if len(self.boxes) != len(self.labels):
                raise RecordError(f"{self.image}: {len(self.boxes)} boxes vs {len(self.labels)} labels")
        elif self.kind == "instance_seg":
            if not self.masks:
                raise RecordError(f"{self.image}: instance source needs masks")
            if len(self.masks) != len(self.labels):
                raise RecordError(f"{self.image}: {len(self.masks)} masks vs {len(self.labels)} labels")
            for i, mask in enumerate(self.masks):
                if mask.shape != (self.height, self.width) or mask.dtype != np.bool_:
                    raise RecordError(f"{self.image}: mask {i} is not a {self.height}x{self.width} bool array")
        elif self.kind == "semantic_seg":
            if self.label_map is None:
                raise RecordError(f"{self.image}: semantic source needs a label map")
            if self.label_map.shape != (self.height, self.width):
                raise RecordError(f"{self.image}: label map shape {self.label_map.shape} mismatch")
        else:
            raise RecordError(f"{self.image}: unknown source kind {self.kind!r}")


def _whole_image_prompt(width: int, height: int) -> tuple[PromptSpec, ...]:
    return (PromptSpec(PromptKind.IMAGE, (0, 0, width, height), 1),)


def from_classification_or_caption(src: AnnotationSource) -> list[InstructionRecord]:
    """Image-level records: one per label or caption string."""
    src.validate()
    if src.kind not in ("classification", "caption"):
        raise RecordError(f"{src.image}: expected a classification or caption source")
    prompts = _whole_image_prompt(src.width, src.height)
    if src.kind == "classification":
        task = Task.SCENE_CLASSIFICATION
        texts = [src.label]
    else:
        task = Task.IMAGE_CAPTION
        texts = list(src.captions)
    records = []
    for text in texts:
        answer = render_answer(AnswerContent(task=task, marks=((1, text),)))
        records.append(
            InstructionRecord(
                image=src.image,
                width=src.width,
                height=src.height,
                task=task,
                prompts=prompts,
                instruction=INSTRUCTIONS[task],
                answer=answer,
            )
        )
    for rec in records:
        rec.validate()
    return records


def from_detection(src: AnnotationSource) -> InstructionRecord:
    """Region-level referring classification over the annotated boxes."""
    src.validate()
    if src.kind != "detection":
        raise RecordError(f"{src.image}: expected a detection source")
    if len(src.boxes) > MAX_MARKS:
        raise RecordError(
            f"{src.image}: {len(src.boxes)} boxes exceed the {MAX_MARKS} reserved mark tokens"
        )
    prompts = tuple(
        PromptSpec(PromptKind.BOX, box, i + 1) for i, box in enumerate(src.boxes)
    )
    content = AnswerContent(
        task=Task.REFERRING_BOX,
        marks=tuple((i + 1, label) for i, label in enumerate(src.labels)),
        coords=tuple(src.boxes),
    )
    rec = InstructionRecord(
        image=src.image,
        width=src.width,
        height=src.height,
        task=Task.REFERRING_BOX,
        prompts=prompts,
        instruction=INSTRUCTIONS[Task.REFERRING_BOX],
        answer=render_answer(content),
    )
    rec.validate()
    return rec


def representative_point(mask: np.ndarray) -> tuple[int, int]:
    """Interior point of a mask: farthest from the background.

    The image border counts as background (a one-pixel virtual ring), the
    distance is exact squared Euclidean, and ties break toward the smallest
    (y, x) in row-major order. Returns (x, y).
    """
    if mask.ndim != 2 or mask.dtype != np.bool_:
        raise RecordError("mask must be a 2-d bool array")
    if not mask.any():
        raise RecordError("mask has no foreground pixels")
    padded = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    # Nearest-background indices give exact integer squared distances.
    idx = ndimage.distance_transform_edt(padded, return_distances=False, return_indices=True)
    yy, xx = np.indices(padded.shape)
    d2 = (idx[0].astype(np.int64) - yy) ** 2 + (idx[1].astype(np.int64) - xx) ** 2
    d2 = d2[1:-1, 1:-1].copy()
    d2[~mask] = -1
    flat = int(np.argmax(d2))
    y, x = divmod(flat, mask.shape[1])
    return (x, y)


def from_instance_seg(src: AnnotationSource) -> InstructionRecord:
    """Point-level referring classification: one representative point per mask."""
    src.validate()
    if src.kind != "instance_seg":
        raise RecordError(f"{src.image}: expected an instance segmentation source")
    if len(src.masks) > MAX_MARKS:
        raise RecordError(
            f"{src.image}: {len(src.masks)} masks exceed the {MAX_MARKS} reserved mark tokens"
        )
    points = [representative_point(mask) for mask in src.masks]
    prompts = tuple(
        PromptSpec(PromptKind.POINT, (float(x), float(y)), i + 1)
        for i, (x, y) in enumerate(points)
    )
    content = AnswerContent(
        task=Task.REFERRING_POINT,
        marks=tuple((i + 1, label) for i, label in enumerate(src.labels)),
        coords=tuple((float(x), float(y)) for x, y in points),
    )
    rec = InstructionRecord(
        image=src.image,
        width=src.width,
        height=src.height,
        task=Task.REFERRING_POINT,
        prompts=prompts,
        instruction=INSTRUCTIONS[Task.REFERRING_POINT],
        answer=render_answer(content),
    )
    rec.validate()
    return rec


def from_semantic_seg(
    src: AnnotationSource,
    grid: int = 32,
    samples_per_patch: int = 1,
    seed: int = 0,
) -> InstructionRecord:
    """Point-level record sampled from a dense label map.

    The image is tiled into a grid x grid patch lattice (shrunk per axis for
    small images) and samples_per_patch pixels are drawn per patch with a
    seeded generator. Samples that land on an ignore label are dropped.
    Unlike object enumerations, the sampled point count may exceed the
    reserved mark vocabulary; downstream consumers see plain numbered marks.
    """
    src.validate()
    if src.kind != "semantic_seg":
        raise RecordError(f"{src.image}: expected a semantic segmentation source")
    if grid < 1 or samples_per_patch < 1:
        raise RecordError("grid and samples_per_patch must be positive")
    label_map = src.label_map
    assert label_map is not None
    h, w = label_map.shape
    gy = min(grid, h)
    gx = min(grid, w)
    rng = np.random.default_rng([seed])
    points: list[tuple[int, int]] = []
    names: list[str] = []
    for i in range(gy):
        y0 = (i * h) // gy
        y1 = ((i + 1) * h) // gy
        for j in range(gx):
            x0 = (j * w) // gx
            x1 = ((j + 1) * w) // gx
            for _ in range(samples_per_patch):
                y = int(rng.integers(y0, y1))
                x = int(rng.integers(x0, x1))
                label_id = int(label_map[y, x])
                if label_id in src.ignore_ids:
                    continue
                if label_id not in src.label_names:
                    raise RecordError(
                        f"{src.image}: label id {label_id} at ({x}, {y}) has no name"
                    )
                points.append((x, y))
                names.append(src.label_names[label_id])
    if not points:
        raise RecordError(f"{src.image}: every sampled point hit an ignore label")
    prompts = tuple(
        PromptSpec(PromptKind.POINT, (float(x), float(y)), i + 1)
        for i, (x, y) in enumerate(points)
    )
    content = AnswerContent(
        task=Task.REFERRING_POINT,
        marks=tuple((i + 1, name) for i, name in enumerate(names)),
        coords=tuple((float(x), float(y)) for x, y in points),
    )
    rec = InstructionRecord(
        image=src.image,
        width=src.width,
        height=src.height,
        task=Task.REFERRING_POINT,
        prompts=prompts,
        instruction=INSTRUCTIONS[Task.REFERRING_POINT],
        answer=render_answer(content),
    )
    rec.validate()
    return rec


# ---------------------------------------------------------------------------
# Polygon rasterization (exact arithmetic)


def rasterize_polygons(
    polygons: Sequence[Sequence[float]], width: int, height: int
) -> np.ndarray:
    """Union of even-odd filled polygons as a bool mask.

    A pixel belongs to a polygon when its center (x + 1/2, y + 1/2) lies
    strictly inside; centers exactly on an edge are excluded. All tests run
    in exact rational arithmetic, so the result is independent of vertex
    float noise below the rational level.
    """
    mask = np.zeros((height, width), dtype=bool)
    for flat in polygons:
        if len(flat) < 6 or len(flat) % 2 != 0:
            raise RecordError(f"polygon needs >= 3 (x, y) pairs, got {len(flat)} numbers")
        verts = [
            (Fraction(flat[i]), Fraction(flat[i + 1])) for i in range(0, len(flat), 2)
        ]
        _fill_polygon(mask, verts)
    return mask


def _fill_polygon(mask: np.ndarray, verts: list[tuple[Fraction, Fraction]]) -> None:
    height, width = mask.shape
    n = len(verts)
    edges = [(verts[i], verts[(i + 1) % n]) for i in range(n)]
    for py in range(height):
        cy = Fraction(2 * py + 1, 2)
        crossings: list[Fraction] = []
        boundary_x: list[tuple[Fraction, Fraction]] = []
        for (x1, y1), (x2, y2) in edges:
            if y1 == y2:
                if y1 == cy:
                    lo, hi = (x1, x2) if x1 <= x2 else (x2, x1)
                    boundary_x.append((lo, hi))
                continue
            lo, hi = (y1, y2) if y1 < y2 else (y2, y1)
            # Half-open [lo, hi) so a vertex shared by two edges counts once.
            if lo <= cy < hi:
                x_at = x1 + (cy - y1) * (x2 - x1) / (y2 - y1)
                crossings.append(x_at)
        if not crossings and not boundary_x:
            continue
        crossings.sort()
        for px in range(width):
            cx = Fraction(2 * px + 1, 2)
            on_edge = cx in crossings or any(lo <= cx <= hi for lo, hi in boundary_x)
            if on_edge:
                continue
            inside = sum(1 for x_at in crossings if x_at < cx) % 2 == 1
            if inside:
                mask[py, px] = True


# ---------------------------------------------------------------------------
# COCO-style ingestion


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise RecordError(f"{where}: missing key {key!r}")
    return obj[key]


def ingest_coco_style(
    path: Path | str,
    kind: str,
    read_label_map: Callable[[Path], np.ndarray] | None = None,
) -> list[AnnotationSource]:
    """Load a COCO-style JSON manifest into AnnotationSource values.

    The manifest holds "images" (id, file_name, width, height), "categories"
    (id, name), and "annotations" keyed by image_id. Detection boxes use the
    [x, y, w, h] convention and are converted to corner form. Instance
    segmentations are flat polygon lists, rasterized here. Semantic manifests
    list a label_map path per image instead of annotations and may carry a
    top-level "ignore_ids" list. Errors name the JSON path that failed.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if not isinstance(manifest, dict):
        raise RecordError(f"{path}: manifest must be a JSON object")

    images = {}
    for i, entry in enumerate(_require(manifest, "images", str(path))):
        where = f"{path}: images[{i}]"
        image_id = _require(entry, "id", where)
        images[image_id] = entry
        for key in ("file_name", "width", "height"):
            _require(entry, key, where)

    categories = {}
    for i, entry in enumerate(manifest.get("categories", [])):
        where = f"{path}: categories[{i}]"
        categories[_require(entry, "id", where)] = _require(entry, "name", where)

    def category_name(cat_id, where: str) -> str:
        if cat_id not in categories:
            raise RecordError(f"{where}: unknown category id {cat_id}")
        return categories[cat_id]

    if kind == "semantic_seg":
        if read_label_map is None:
            from .images import read_label_map as read_label_map_default

            read_label_map = lambda p: read_label_map_default(p)
        ignore_ids = frozenset(int(v) for v in manifest.get("ignore_ids", []))
        label_names = {int(k): v for k, v in categories.items()}
        sources = []
        for image_id, entry in images.items():
            where = f"{path}: images[id={image_id}]"
            map_ref = _require(entry, "label_map", where)
            label_map = read_label_map(path.parent / map_ref)
            sources.append(
                AnnotationSource(
                    kind="semantic_seg",
                    image=entry["file_name"],
                    width=int(entry["width"]),
                    height=int(entry["height"]),
                    label_map=label_map,
                    label_names=label_names,
                    ignore_ids=ignore_ids,
                )
            )
        for src in sources:
            src.validate()
        return sources

    grouped: dict[object, list[tuple[int, dict]]] = {}
    for i, ann in enumerate(_require(manifest, "annotations", str(path))):
        where = f"{path}: annotations[{i}]"
        image_id = _require(ann, "image_id", where)
        if image_id not in images:
            raise RecordError(f"{where}: unknown image id {image_id}")
        grouped.setdefault(image_id, []).append((i, ann))

    sources = []
    for image_id, entry in images.items():
        anns = grouped.get(image_id, [])
        if not anns:
            continue
        file_name = entry["file_name"]
        width = int(entry["width"])
        height = int(entry["height"])
        if kind == "classification":
            if len(anns) > 1:
                raise RecordError(
                    f"{path}: image id {image_id} has {len(anns)} labels, expected one"
                )
            i, ann = anns[0]
            where = f"{path}: annotations[{i}]"
            label = category_name(_require(ann, "category_id", where), where)
            sources.append(
                AnnotationSource(
                    kind="classification", image=file_name, width=width, height=height, label=label
                )
            )
        elif kind == "caption":
            captions = []
            for i, ann in anns:
                where = f"{path}: annotations[{i}]"
                captions.append(str(_require(ann, "caption", where)))
            sources.append(
                AnnotationSource(
                    kind="caption",
                    image=file_name,
                    width=width,
                    height=height,
                    captions=tuple(captions),
                )
            )
        elif kind == "detection":
            boxes = []
            labels = []
            for i, ann in anns:
                where = f"{path}: annotations[{i}]"
                bbox = _require(ann, "bbox", where)
                if len(bbox) != 4:
                    raise RecordError(f"{where}: bbox must be [x, y, w, h]")
                x, y, w, h = (float(v) for v in bbox)
                if w <= 0 or h <= 0:
                    raise RecordError(f"{where}: bbox has non-positive size")
                boxes.append((x, y, x + w, y + h))
                labels.append(category_name(_require(ann, "category_id", where), where))
            sources.append(
                AnnotationSource(
                    kind="detection",
                    image=file_name,
                    width=width,
                    height=height,
                    boxes=tuple(boxes),
                    labels=tuple(labels),
                )
            )
        elif kind == "instance_seg":
            masks = []
            labels = []
            for i, ann in anns:
                where = f"{path}: annotations[{i}]"
                seg = _require(ann, "segmentation", where)
                if not isinstance(seg, list) or not seg:
                    raise RecordError(f"{where}: segmentation must be a non-empty polygon list")
                mask = rasterize_polygons(seg, width, height)
                if not mask.any():
                    raise RecordError(f"{where}: polygon covers no pixel centers")
                masks.append(mask)
                labels.append(category_name(_require(ann, "category_id", where), where))
            sources.append(
                AnnotationSource(
                    kind="instance_seg",
                    image=file_name,
                    width=width,
                    height=height,
                    masks=tuple(masks),
                    labels=tuple(labels),
                )
            )
        else:
            raise RecordError(f"{path}: unknown ingestion kind {kind!r}")
    for src in sources:
        src.validate()
    return sources


# ---------------------------------------------------------------------------
# Caption augmentation


def _box_position(box: Sequence[float], width: int, height: int) -> tuple[str, str]:
    cx = (box[0] + box[2]) / 2.0
    cy = (box[1] + box[3]) / 2.0
    horiz = "left" if 2.0 * cx < width else "right"
    vert = "top" if 2.0 * cy < height else "bottom"
    return vert, horiz


class OfflineCaptionStub:
    """Deterministic caption writer driven by labels and box geometry.

    Stands in for a captioning service: given a region-level referring
    record it emits a region-caption record and a relationship record over
    the same prompts, phrased from each box's position in the frame.
    """

    def __call__(self, record: InstructionRecord) -> list[InstructionRecord]:
        if record.task != Task.REFERRING_BOX:
            raise AugmentError(
                f"can only augment {Task.REFERRING_BOX.value} records, got {record.task.value}"
            )
        content = parse_answer(record.answer, record.task)
        by_mark = {p.mark: p.coords for p in record.prompts}
        marks = [m for m, _ in content.marks]
        labels = {m: text for m, text in content.marks}
        coords = tuple(by_mark[m] for m in marks)

        caption_lines = []
        for m in marks:
            vert, horiz = _box_position(by_mark[m], record.width, record.height)
            caption_lines.append((m, f"a {labels[m]} at the {vert} {horiz} of the image"))
        caption_rec = InstructionRecord(
            image=record.image,
            width=record.width,
            height=record.height,
            task=Task.REGION_CAPTION,
            prompts=record.prompts,
            instruction=INSTRUCTIONS[Task.REGION_CAPTION],
            answer=render_answer(
                AnswerContent(task=Task.REGION_CAPTION, marks=tuple(caption_lines), coords=coords)
            ),
        )

        relation_lines = []
        for m in marks:
            _, horiz = _box_position(by_mark[m], record.width, record.height)
            others = [o for o in marks if o != m]
            if others:
                other = min(others)
                side = "left of" if horiz == "left" else "right of"
                text = f"the {labels[m]} sits on the {horiz} side, {side} <Region {other}>"
            else:
                text = f"the {labels[m]} sits on the {horiz} side alone"
            relation_lines.append((m, text))
        relation_rec = InstructionRecord(
            image=record.image,
            width=record.width,
            height=record.height,
            task=Task.RELATIONSHIP,
            prompts=record.prompts,
            instruction=INSTRUCTIONS[Task.RELATIONSHIP],
            answer=render_answer(
                AnswerContent(task=Task.RELATIONSHIP, marks=tuple(relation_lines), coords=coords)
            ),
        )
        out = [caption_rec, relation_rec]
        for rec in out:
            rec.validate()
        return out


def augment_captions(
    records: Sequence[InstructionRecord],
    augmenter: Callable[[InstructionRecord], list[InstructionRecord]] | None = None,
) -> tuple[list[InstructionRecord], list[tuple[int, Exception]]]:
    """Run an augmenter over records, collecting per-record failures.

    A failure on one record never aborts the batch; callers get the new
    records plus (index, exception) pairs for whatever was skipped.
    """
    if augmenter is None:
        augmenter = OfflineCaptionStub()
    produced: list[InstructionRecord] = []
    failures: list[tuple[int, Exception]] = []
    for i, rec in enumerate(records):
        try:
            produced.extend(augmenter(rec))
        except Exception as exc:  # noqa: BLE001 - failures are data here
            failures.append((i, exc))
    return produced, failures


# ---------------------------------------------------------------------------
# Synthetic corpus


_PALETTE = {
    "airplane": (0.85, 0.15, 0.15),
    "vehicle": (0.15, 0.25, 0.85),
    "ship": (0.10, 0.75, 0.75),
    "storage tank": (0.90, 0.75, 0.10),
    "runway": (0.45, 0.45, 0.50),
}


def _blank_image(rng: np.random.Generator, tint: tuple[float, float, float]) -> np.ndarray:
    base = np.empty((64, 64, 3), dtype=np.float64)
    base[:] = tint
    noise = rng.uniform(-0.03, 0.03, size=base.shape)
    return np.clip(base + noise, 0.0, 1.0)


def _rect_mask(box: tuple[int, int, int, int]) -> np.ndarray:
    mask = np.zeros((64, 64), dtype=bool)
    x1, y1, x2, y2 = box
    mask[y1:y2, x1:x2] = True
    return mask


def make_synthetic_corpus(out_dir: Path | str, seed: int = 0) -> Path:
    """Write a small mixed-level corpus under out_dir and return the JSONL path.

    Eight records over eight 64 x 64 images: two scene classifications, two
    captions, two box-referring records, and two point-referring records
    built from rectangle masks. Output bytes depend only on the seed.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 17])
    records: list[InstructionRecord] = []

    def save(name: str, image: np.ndarray) -> str:
        rel = f"images/{name}.ppm"
        write_ppm(out_dir / rel, image)
        return rel

    # 1-2: scene classification
    img = _blank_image(rng, (0.55, 0.55, 0.55))
    paint_rect(img, (8, 24, 56, 40), _PALETTE["runway"])
    paint_rect(img, (20, 28, 36, 36), _PALETTE["airplane"])
    src = AnnotationSource(kind="classification", image=save("scene_airport", img),
                           width=64, height=64, label="airport")
    records.extend(from_classification_or_caption(src))

    img = _blank_image(rng, (0.20, 0.35, 0.60))
    paint_rect(img, (10, 40, 30, 52), _PALETTE["ship"])
    paint_rect(img, (36, 12, 54, 24), _PALETTE["ship"])
    src = AnnotationSource(kind="classification", image=save("scene_harbor", img),
                           width=64, height=64, label="harbor")
    records.extend(from_classification_or_caption(src))

    # 3-4: image captions
    img = _blank_image(rng, (0.25, 0.40, 0.65))
    paint_rect(img, (6, 10, 26, 22), _PALETTE["ship"])
    paint_rect(img, (38, 36, 58, 50), _PALETTE["ship"])
    src = AnnotationSource(kind="caption", image=save("caption_ships", img),
                           width=64, height=64,
                           captions=("two ships anchored near the harbor",))
    records.extend(from_classification_or_caption(src))

    img = _blank_image(rng, (0.52, 0.53, 0.50))
    paint_rect(img, (14, 20, 50, 44), _PALETTE["storage tank"])
    src = AnnotationSource(kind="caption", image=save("caption_tank", img),
                           width=64, height=64,
                           captions=("a large storage tank beside the road",))
    records.extend(from_classification_or_caption(src))

    # 5-6: detection pairs
    detection_layouts = [
        ("boxes_a", (0.50, 0.52, 0.48),
         [((10, 10, 30, 26), "airplane"), ((38, 36, 58, 54), "vehicle")]),
        ("boxes_b", (0.22, 0.38, 0.58),
         [((6, 30, 28, 46), "ship"), ((40, 8, 56, 24), "storage tank")]),
    ]
    for name, tint, layout in detection_layouts:
        img = _blank_image(rng, tint)
        for box, label in layout:
            paint_rect(img, box, _PALETTE[label])
        src = AnnotationSource(
            kind="detection",
            image=save(name, img),
            width=64,
            height=64,
            boxes=tuple(tuple(float(v) for v in box) for box, _ in layout),
            labels=tuple(label for _, label in layout),
        )
        records.append(from_detection(src))

    # 7-8: instance masks -> representative points
    mask_layouts = [
        ("points_a", (0.24, 0.40, 0.62), [((12, 16, 34, 34), "ship")]),
        ("points_b", (0.52, 0.50, 0.47),
         [((6, 6, 22, 20), "airplane"), ((36, 34, 58, 52), "vehicle")]),
    ]
    for name, tint, layout in mask_layouts:
        img = _blank_image(rng, tint)
        for box, label in layout:
            paint_rect(img, box, _PALETTE[label])
        src = AnnotationSource(
            kind="instance_seg",
            image=save(name, img),
            width=64,
            height=64,
            masks=tuple(_rect_mask(box) for box, _ in layout),
            labels=tuple(label for _, label in layout),
        )
        records.append(from_instance_seg(src))

    jsonl = out_dir / "corpus.jsonl"
    write_records(jsonl, records)
    return jsonl


__all__ = [
    "AnnotationSource",
    "AnswerContent",
    "AnswerParseError",
    "AugmentError",
    "INSTRUCTIONS",
    "InstructionRecord",
    "OfflineCaptionStub",
    "RecordError",
    "TASK_LEVEL",
    "Task",
    "augment_captions",
    "format_coord",
    "from_classification_or_caption",
    "from_detection",
    "from_instance_seg",
    "from_semantic_seg",
    "ingest_coco_style",
    "make_synthetic_corpus",
    "parse_answer",
    "rasterize_polygons",
    "read_records",
    "render_answer",
    "representative_point",
    "write_records",
]

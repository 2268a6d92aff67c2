"""Dataset manifest: the plan and ledger for every image to be made.

One JSON-Lines record per image carries the shape id, camera, prompt,
demographic cell, occlusion tag, per-image generation seed, split, file
paths, and a pipeline status that only moves forward through
planned -> rendered -> generated -> embedded.

Balance rules: (race, gender) cells differ by at most one record across
the whole manifest, the occluded subset is itself balanced the same way,
the occluded total is round(rate * total) split across the three
occlusion types within one, and the train/validation split is assigned
at shape granularity so no 3D shape leaks across splits.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .seeds import substream_rng, substream_seed

RACES = (
    "White", "Black", "Indian", "East Asian",
    "Southeast Asian", "Middle Eastern", "Latino",
)
GENDERS = ("woman", "man")
OCCLUSIONS = ("glasses", "sunglasses", "mask")
OCCLUSION_NONE = "none"
OCCLUSION_PROMPT_TEXT = {
    "glasses": "glasses",
    "sunglasses": "sunglasses",
    "mask": "surgical mask covering face",
}
PROMPT_SUFFIX = "studio portrait, profile picture, dslr"
NEGATIVE_PROMPT = "artefacts, low resolution"

STATUS_PLANNED = "planned"
STATUS_RENDERED = "rendered"
STATUS_GENERATED = "generated"
STATUS_EMBEDDED = "embedded"
STATUS_ORDER = (STATUS_PLANNED, STATUS_RENDERED, STATUS_GENERATED, STATUS_EMBEDDED)

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"


class ManifestError(ValueError):
    pass


@dataclass
class DatasetPlan:
    n_shapes: int = 10000
    views_per_shape: int = 5
    images_per_view: int = 5
    occlusion_rate: float = 0.30
    races: tuple[str, ...] = RACES
    genders: tuple[str, ...] = GENDERS
    occlusions: tuple[str, ...] = OCCLUSIONS
    split_fraction: float = 0.85
    master_seed: int = 0
    camera_distance_min: float = 150.0
    camera_distance_max: float = 400.0
    fov_degrees: float = 72.4
    resolution: int = 512
    inference_steps: int = 15

    def validate(self) -> None:
        if self.n_shapes < 1 or self.views_per_shape < 1 or self.images_per_view < 1:
            raise ManifestError("shape/view/image counts must be >= 1")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ManifestError("occlusion_rate outside [0, 1]")
        if not (self.races and self.genders):
            raise ManifestError("race and gender lists must be non-empty")
        if self.occlusion_rate > 0.0 and not self.occlusions:
            raise ManifestError("occlusion types required when occlusion_rate > 0")
        if not 0.0 < self.split_fraction < 1.0:
            raise ManifestError("split_fraction outside (0, 1)")
        if not 0.0 < self.camera_distance_min <= self.camera_distance_max:
            raise ManifestError("need 0 < camera_distance_min <= camera_distance_max")

    @property
    def total_images(self) -> int:
        return self.n_shapes * self.views_per_shape * self.images_per_view


# Serialized field order is fixed; save/load round-trips bit for bit.
_RECORD_FIELDS = (
    "image_id", "shape_id", "view_index", "image_index", "beta_ref",
    "camera", "depth_image_path", "prompt_positive", "prompt_negative",
    "race", "gender", "occlusion", "generation_seed", "inference_steps",
    "images_per_prompt", "split", "image_path", "embedding_path",
    "status", "error_note",
)


@dataclass
class ImageRecord:
    image_id: str
    shape_id: str
    view_index: int
    image_index: int
    beta_ref: str
    camera: dict  # {"distance", "fov_degrees", "resolution"}
    depth_image_path: str
    prompt_positive: str
    prompt_negative: str
    race: str
    gender: str
    occlusion: str
    generation_seed: int
    inference_steps: int
    images_per_prompt: int
    split: str
    image_path: str = ""
    embedding_path: str = ""
    status: str = STATUS_PLANNED
    error_note: str = ""

    def to_json(self) -> str:
        d = {name: getattr(self, name) for name in _RECORD_FIELDS}
        return json.dumps(d, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        missing = [k for k in _RECORD_FIELDS if k not in d]
        if missing:
            raise ManifestError(f"record missing fields: {missing}")
        return cls(**{k: d[k] for k in _RECORD_FIELDS})


def shape_id_name(index: int) -> str:
    return f"s{index:06d}"


def build_prompt(occlusion: str, race: str, gender: str,
                 plan: DatasetPlan | None = None) -> tuple[str, str]:
    """Positive/negative prompt pair for one demographic/occlusion cell."""
    plan = plan or DatasetPlan()
    if race not in plan.races:
        raise ManifestError(f"unknown race {race!r}")
    if gender not in plan.genders:
        raise ManifestError(f"unknown gender {gender!r}")
    if occlusion == OCCLUSION_NONE:
        positive = f"{race} {gender}, {PROMPT_SUFFIX}"
    else:
        if occlusion not in plan.occlusions:
            raise ManifestError(f"unknown occlusion {occlusion!r}")
        text = OCCLUSION_PROMPT_TEXT.get(occlusion, occlusion)
        positive = f"{text}, {race} {gender}, {PROMPT_SUFFIX}"
    return positive, NEGATIVE_PROMPT


def _occlusion_assignment(plan: DatasetPlan) -> list[str]:
    """Per-record occlusion tags: round(rate*total) occluded, types within one."""
    total = plan.total_images
    occluded = int(np.floor(plan.occlusion_rate * total + 0.5))
    tags = [OCCLUSION_NONE] * (total - occluded)
    if occluded:
        types = list(plan.occlusions)
        rng = substream_rng(plan.master_seed, "occlusion-types")
        rng.shuffle(types)
        base, rem = divmod(occluded, len(types))
        for i, t in enumerate(types):
            tags.extend([t] * (base + (1 if i < rem else 0)))
    order = substream_rng(plan.master_seed, "occlusion-order").permutation(total)
    shuffled = [""] * total
    for pos, tag_idx in enumerate(order):
        shuffled[pos] = tags[tag_idx]
    return shuffled


def _cell_assignment(plan: DatasetPlan, occlusion: list[str]) -> list[tuple[str, str]]:
    """(race, gender) per record via one round-robin walk over a seeded
    shuffle, visiting all occluded slots first so that both the whole
    manifest and the occluded subset are balanced within one."""
    cells = [(r, g) for r in plan.races for g in plan.genders]
    rng = substream_rng(plan.master_seed, "cells")
    rng.shuffle(cells)

    occ_slots = [i for i, tag in enumerate(occlusion) if tag != OCCLUSION_NONE]
    non_slots = [i for i, tag in enumerate(occlusion) if tag == OCCLUSION_NONE]
    rng_walk = substream_rng(plan.master_seed, "cell-walk")
    occ_slots = [occ_slots[j] for j in rng_walk.permutation(len(occ_slots))]
    non_slots = [non_slots[j] for j in rng_walk.permutation(len(non_slots))]

    assignment: list[tuple[str, str]] = [("", "")] * len(occlusion)
    for step, slot in enumerate(occ_slots + non_slots):
        assignment[slot] = cells[step % len(cells)]
    return assignment


def plan_dataset(plan: DatasetPlan) -> list[ImageRecord]:
    """Materialize the full manifest, deterministic in master_seed."""
    plan.validate()
    total = plan.total_images
    occlusion = _occlusion_assignment(plan)
    cells = _cell_assignment(plan, occlusion)

    n_train = int(np.floor(plan.split_fraction * plan.n_shapes + 0.5))
    shape_order = substream_rng(plan.master_seed, "split").permutation(plan.n_shapes)
    train_shapes = set(int(s) for s in shape_order[:n_train])

    records: list[ImageRecord] = []
    seeds_seen: set[int] = set()
    t = 0
    for s in range(plan.n_shapes):
        shape_id = shape_id_name(s)
        split = SPLIT_TRAIN if s in train_shapes else SPLIT_VAL
        for v in range(plan.views_per_shape):
            cam_rng = substream_rng(plan.master_seed, "camera", shape_id, v)
            distance = float(cam_rng.uniform(plan.camera_distance_min,
                                             plan.camera_distance_max))
            camera = {
                "distance": distance,
                "fov_degrees": plan.fov_degrees,
                "resolution": plan.resolution,
            }
            depth_path = f"depth/{shape_id}_v{v}.png"
            for k in range(plan.images_per_view):
                image_id = f"{shape_id}_v{v}_i{k}"
                race, gender = cells[t]
                occ = occlusion[t]
                positive, negative = build_prompt(occ, race, gender, plan)
                gen_seed = substream_seed(plan.master_seed, "generation", image_id)
                if gen_seed in seeds_seen:  # pragma: no cover - 2^-63 event
                    raise ManifestError(f"generation seed collision at {image_id}")
                seeds_seen.add(gen_seed)
                records.append(ImageRecord(
                    image_id=image_id,
                    shape_id=shape_id,
                    view_index=v,
                    image_index=k,
                    beta_ref=f"shapes/{shape_id}.beta",
                    camera=camera,
                    depth_image_path=depth_path,
                    prompt_positive=positive,
                    prompt_negative=negative,
                    race=race,
                    gender=gender,
                    occlusion=occ,
                    generation_seed=gen_seed,
                    inference_steps=plan.inference_steps,
                    images_per_prompt=plan.images_per_view,
                    split=split,
                ))
                t += 1
    return records


# ---------------------------------------------------------------------------
# Balance reporting

@dataclass
class BalanceCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class BalanceReport:
    counts: dict[tuple[str, str, str, str], int]  # (race, gender, occlusion, split)
    checks: list[BalanceCheck]
    max_cell_deviation: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def rows(self) -> list[tuple[str, str, str, str, int]]:
        return [(*key, n) for key, n in sorted(self.counts.items())]


def _spread_check(name: str, counts: dict, limit: int = 1) -> BalanceCheck:
    if not counts:
        return BalanceCheck(name, True, "no cells")
    lo_key = min(counts, key=lambda k: (counts[k], k))
    hi_key = max(counts, key=lambda k: (counts[k], k))
    spread = counts[hi_key] - counts[lo_key]
    if spread <= limit:
        return BalanceCheck(name, True, f"max deviation {spread}")
    return BalanceCheck(
        name, False,
        f"cell {hi_key} has {counts[hi_key]} vs cell {lo_key} with {counts[lo_key]}",
    )


def balance_report(records: list[ImageRecord]) -> BalanceReport:
    """Recount every cell from scratch and check the ±1 balance rules."""
    if not records:
        raise ManifestError("manifest is empty")
    counts: dict[tuple[str, str, str, str], int] = {}
    cell_totals: dict[tuple[str, str], int] = {}
    occ_cell_totals: dict[tuple[str, str], int] = {}
    type_totals: dict[str, int] = {}
    for rec in records:
        key = (rec.race, rec.gender, rec.occlusion, rec.split)
        counts[key] = counts.get(key, 0) + 1
        cell = (rec.race, rec.gender)
        cell_totals[cell] = cell_totals.get(cell, 0) + 1
        if rec.occlusion != OCCLUSION_NONE:
            occ_cell_totals[cell] = occ_cell_totals.get(cell, 0) + 1
            type_totals[rec.occlusion] = type_totals.get(rec.occlusion, 0) + 1

    checks = [
        _spread_check("race_gender_balance", cell_totals),
        _spread_check("occluded_race_gender_balance", occ_cell_totals),
        _spread_check("occlusion_type_balance", type_totals),
    ]
    spread = 0
    if cell_totals:
        spread = max(cell_totals.values()) - min(cell_totals.values())
    return BalanceReport(counts=counts, checks=checks, max_cell_deviation=spread)


def validate_manifest(records: list[ImageRecord]) -> None:
    """Structural invariants: unique ids/seeds, known enums, path/status tie."""
    seen_ids: set[str] = set()
    seen_seeds: set[int] = set()
    splits_by_shape: dict[str, str] = {}
    for rec in records:
        if rec.image_id in seen_ids:
            raise ManifestError(f"duplicate image_id {rec.image_id}")
        seen_ids.add(rec.image_id)
        if rec.generation_seed in seen_seeds:
            raise ManifestError(f"duplicate generation_seed on {rec.image_id}")
        seen_seeds.add(rec.generation_seed)
        if rec.status not in STATUS_ORDER:
            raise ManifestError(f"{rec.image_id}: unknown status {rec.status!r}")
        if rec.split not in (SPLIT_TRAIN, SPLIT_VAL):
            raise ManifestError(f"{rec.image_id}: unknown split {rec.split!r}")
        prev = splits_by_shape.setdefault(rec.shape_id, rec.split)
        if prev != rec.split:
            raise ManifestError(f"shape {rec.shape_id} appears in both splits")
        if rec.status == STATUS_GENERATED and not rec.image_path:
            raise ManifestError(f"{rec.image_id}: generated but image_path empty")
        if rec.image_path and STATUS_ORDER.index(rec.status) < STATUS_ORDER.index(STATUS_GENERATED):
            raise ManifestError(f"{rec.image_id}: image_path set before generation")
        if rec.status == STATUS_EMBEDDED and not rec.embedding_path:
            raise ManifestError(f"{rec.image_id}: embedded but embedding_path empty")


def advance_status(record: ImageRecord, new_status: str) -> ImageRecord:
    """Copy of record with status moved forward; refuses to move backward."""
    if STATUS_ORDER.index(new_status) < STATUS_ORDER.index(record.status):
        raise ManifestError(
            f"{record.image_id}: cannot move status {record.status} -> {new_status}"
        )
    return replace(record, status=new_status)


# ---------------------------------------------------------------------------
# JSON-Lines I/O with an advisory lock file

class ManifestLock:
    """Advisory lock: exclusive-create of <path>.lock with retry."""

    def __init__(self, path: str, timeout: float = 10.0):
        self.lock_path = path + ".lock"
        self.timeout = timeout
        self._fd: int | None = None

    def __enter__(self) -> "ManifestLock":
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                self._fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(self._fd, str(os.getpid()).encode())
                return self
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise ManifestError(f"timed out waiting for lock {self.lock_path}")
                time.sleep(0.05)

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            os.remove(self.lock_path)
        except FileNotFoundError:
            pass


def save_manifest(records: list[ImageRecord], path: str) -> None:
    """Atomic write (temp file + rename) under the advisory lock."""
    validate_manifest(records)
    tmp = path + ".tmp"
    with ManifestLock(path):
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            for rec in records:
                f.write(rec.to_json())
                f.write("\n")
        os.replace(tmp, path)


def load_manifest(path: str) -> list[ImageRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {lineno}: invalid JSON ({e.msg})") from e
            try:
                records.append(ImageRecord.from_dict(d))
            except (ManifestError, TypeError) as e:
                raise ManifestError(f"line {lineno}: {e}") from e
    validate_manifest(records)
    return records


# ---------------------------------------------------------------------------
# Shape store: one little-endian float32 vector per shape plus an index.

class ShapeStore:
    """Directory of per-shape beta files referenced by manifest beta_refs."""

    INDEX_NAME = "index.json"

    def __init__(self, root: str):
        self.root = root

    def _beta_path(self, shape_id: str) -> str:
        return os.path.join(self.root, f"{shape_id}.beta")

    def exists(self) -> bool:
        return os.path.exists(os.path.join(self.root, self.INDEX_NAME))

    def write(self, betas: dict[str, np.ndarray]) -> None:
        os.makedirs(self.root, exist_ok=True)
        dims = {len(b) for b in betas.values()}
        if len(dims) > 1:
            raise ManifestError(f"inconsistent beta lengths: {sorted(dims)}")
        for shape_id, beta in sorted(betas.items()):
            with open(self._beta_path(shape_id), "wb") as f:
                f.write(np.asarray(beta, dtype="<f4").tobytes())
        index = {
            "n_shapes": len(betas),
            "n_coefficients": dims.pop() if dims else 0,
            "shape_ids": sorted(betas),
        }
        tmp = os.path.join(self.root, self.INDEX_NAME + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(index, f, sort_keys=True)
            f.write("\n")
        os.replace(tmp, os.path.join(self.root, self.INDEX_NAME))

    def index(self) -> dict:
        with open(os.path.join(self.root, self.INDEX_NAME), "r", encoding="utf-8") as f:
            return json.load(f)

    def load_beta(self, shape_id: str) -> np.ndarray:
        path = self._beta_path(shape_id)
        if not os.path.exists(path):
            raise ManifestError(f"shape store has no beta for {shape_id}")
        with open(path, "rb") as f:
            return np.frombuffer(f.read(), dtype="<f4").astype(np.float64)

    def load_all(self) -> dict[str, np.ndarray]:
        return {sid: self.load_beta(sid) for sid in self.index()["shape_ids"]}

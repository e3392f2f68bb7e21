"""Synthetic dataset pipeline.

Generates grayscale images with one labeled object each, then runs a
caption -> describe -> evaluate -> transform chain behind a pluggable
oracle interface to attach question/answer pairs, and finally splits and
serializes everything as JSONL. The bundled mock oracle is deterministic
and derives its text from record geometry, so the whole pipeline is
reproducible byte-for-byte.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import zlib
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .decoders import BBox
from .metrics import mask2box

log = logging.getLogger(__name__)

CATEGORIES = (
    "lung", "heart", "liver", "kidney", "tumor",
    "cyst", "vertebra", "aorta", "spleen", "nodule",
)
MODALITIES = ("ct", "mri", "xray", "ultrasound")
PERSPECTIVES = ("attribute", "location")
LENGTHS = ("long", "short")
TEMPLATES = ("P_des", "P_des_alt")


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


class OracleError(RuntimeError):
    """An oracle call failed or produced unusable output."""


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    perspective: str
    length: str


@dataclass
class ImageRecord:
    id: str
    image: np.ndarray  # H×W float grid in [0, 1]
    mask: np.ndarray  # H×W bool
    box: BBox
    label: str
    modality: str
    qa: list[QAPair] = field(default_factory=list)


@dataclass(frozen=True)
class Description:
    text: str
    perspective: str
    length: str


@dataclass(frozen=True)
class Verdict:
    action: str  # keep | revise | drop
    text: str | None = None


def candidate_placeholders(n: int = 2) -> str:
    return " ".join(f"<c{k}>" for k in range(1, n + 1))


class OracleInterface(ABC):
    """The external-LLM roles of the pipeline, stateless per call."""

    @abstractmethod
    def caption(self, record: ImageRecord) -> str: ...

    @abstractmethod
    def describe(self, caption: str, info: dict, template: str) -> list[Description]: ...

    @abstractmethod
    def evaluate(self, description: Description) -> Verdict: ...

    @abstractmethod
    def transform(self, description: Description, label: str) -> QAPair: ...


def _position_phrase(box: BBox) -> str:
    x1, y1, x2, y2 = box.as_floats()
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    horiz = "left" if cx < 1 / 3 else ("right" if cx > 2 / 3 else "center")
    vert = "upper" if cy < 1 / 3 else ("lower" if cy > 2 / 3 else "middle")
    if vert == "middle" and horiz == "center":
        return "center"
    return f"{vert}-{horiz}"


def _polarity(record: ImageRecord) -> str:
    inside = record.image[record.mask].mean()
    outside = record.image[~record.mask].mean()
    return "brighter" if inside >= outside else "darker"


class MockOracle(OracleInterface):
    """Deterministic stand-in: text is a pure function of record geometry.

    ``policy`` decides the evaluate() verdict per description:
    "keep_all" (default), "drop_location", "revise_long", a callable
    Description -> Verdict, or "fail" (raises, for skip-path tests).
    """

    def __init__(self, seed: int = 0, policy="keep_all", n_candidates: int = 2):
        self.seed = seed
        self.policy = policy
        self.n_candidates = n_candidates

    def caption(self, record: ImageRecord) -> str:
        pos = _position_phrase(record.box)
        return (
            f"a {record.modality} image with a {record.label} appearing "
            f"{_polarity(record)} than its surroundings in the {pos} region"
        )

    def describe(self, caption: str, info: dict, template: str) -> list[Description]:
        if template not in TEMPLATES:
            raise OracleError(f"unknown description template {template!r}")
        polarity = "brighter" if "brighter" in caption else "darker"
        pos = _position_phrase(info["box"])
        label = info["label"]
        if template == "P_des":
            texts = {
                ("attribute", "long"):
                    f"the region that appears {polarity} than its surroundings, "
                    f"with the rounded outline typical of a {label}",
                ("attribute", "short"): f"the {polarity} {label}",
                ("location", "long"):
                    f"the object situated in the {pos} of the image, "
                    f"where the {label} is expected",
                ("location", "short"): f"the {label} in the {pos}",
            }
        else:
            texts = {
                ("attribute", "long"):
                    f"an area standing out as {polarity} than nearby tissue, "
                    f"consistent with the appearance of a {label}",
                ("attribute", "short"): f"that {polarity} structure, a {label}",
                ("location", "long"):
                    f"the structure occupying the {pos} portion of the scan, "
                    f"which corresponds to the {label}",
                ("location", "short"): f"the {pos} {label}",
            }
        return [
            Description(texts[(p, ln)], p, ln) for p in PERSPECTIVES for ln in LENGTHS
        ]

    def evaluate(self, description: Description) -> Verdict:
        if callable(self.policy):
            return self.policy(description)
        if self.policy == "keep_all":
            return Verdict("keep")
        if self.policy == "drop_location":
            if description.perspective == "location":
                return Verdict("drop")
            return Verdict("keep")
        if self.policy == "revise_long":
            if description.length == "long":
                return Verdict("revise", description.text + ", clearly delineated")
            return Verdict("keep")
        if self.policy == "fail":
            raise OracleError("mock oracle configured to fail")
        raise OracleError(f"unknown evaluation policy {self.policy!r}")

    def transform(self, description: Description, label: str) -> QAPair:
        variant = zlib.crc32(f"{self.seed}:{description.text}".encode()) % 2
        if description.perspective == "attribute":
            question = f"Identify and segment {description.text}."
        else:
            question = f"Segment {description.text}."
        suffix = candidate_placeholders(self.n_candidates)
        if description.length == "long":
            lead = "The structure in question" if variant else "The highlighted region"
            answer = f"{lead} is the {label}. {suffix}"
        else:
            answer = f"The {label}. {suffix}"
        return QAPair(question, answer, description.perspective, description.length)


# -- synthetic images ----------------------------------------------------------

def _object_mask(kind: str, H: int, W: int, cx, cy, a, b, wobble, phase) -> np.ndarray:
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    dx, dy = X - cx, Y - cy
    if kind == "rect":
        return (np.abs(dx) <= a) & (np.abs(dy) <= b)
    r2 = (dx / a) ** 2 + (dy / b) ** 2
    if kind == "ellipse":
        return r2 <= 1.0
    theta = np.arctan2(dy, dx)
    bound = 1.0 + wobble * np.sin(3 * theta + phase)
    return r2 <= bound**2


def synth_records(count: int, seed: int, hw: tuple[int, int] = (64, 64)) -> list[ImageRecord]:
    """Deterministic one-object-per-image corpus, categories round-robin."""
    if count < 1:
        raise ValueError("count must be >= 1")
    H, W = hw
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        label = CATEGORIES[i % len(CATEGORIES)]
        modality = MODALITIES[int(rng.integers(len(MODALITIES)))]
        kind = ("ellipse", "rect", "blob")[int(rng.integers(3))]
        cx, cy = rng.uniform(0.3, 0.7, 2)
        a, b = rng.uniform(0.1, 0.28, 2)
        wobble = rng.uniform(0.1, 0.25)
        phase = rng.uniform(0, 2 * np.pi)
        mask = _object_mask(kind, H, W, cx, cy, a, b, wobble, phase)
        if not mask.any():  # geometry bounds keep this unreachable; belt and braces
            mask[H // 2, W // 2] = True
        ys = (np.arange(H) + 0.5) / H
        xs = (np.arange(W) + 0.5) / W
        Y, X = np.meshgrid(ys, xs, indexing="ij")
        background = 0.45 + 0.15 * (X + Y - 1.0) + 0.03 * rng.normal(size=(H, W))
        shift = rng.uniform(0.25, 0.45) * (1 if rng.uniform() < 0.5 else -1)
        image = np.clip(background + shift * mask, 0.0, 1.0)
        records.append(
            ImageRecord(
                id=f"rec{i:05d}",
                image=image,
                mask=mask,
                box=mask2box(mask),
                label=label,
                modality=modality,
            )
        )
    return records


# -- QA pipeline -----------------------------------------------------------------

def _check_pair(pair: QAPair, label: str, n_candidates: int) -> None:
    if label not in pair.answer:
        raise OracleError(f"answer lacks the label {label!r}: {pair.answer!r}")
    for k in range(1, n_candidates + 1):
        if pair.answer.count(f"<c{k}>") != 1:
            raise OracleError(f"answer must contain <c{k}> exactly once: {pair.answer!r}")


def _pairs_for_record(record: ImageRecord, oracle: OracleInterface, n_candidates: int) -> list[QAPair]:
    caption = oracle.caption(record)
    info = {"label": record.label, "box": record.box, "modality": record.modality}
    pairs = []
    for template in TEMPLATES:
        descriptions = oracle.describe(caption, info, template)
        if len(descriptions) != 4:
            raise OracleError(
                f"describe returned {len(descriptions)} descriptions, expected 4"
            )
        for desc in descriptions:
            verdict = oracle.evaluate(desc)
            if verdict.action == "drop":
                continue
            if verdict.action == "revise":
                desc = replace(desc, text=verdict.text)
            elif verdict.action != "keep":
                raise OracleError(f"unknown verdict action {verdict.action!r}")
            pair = oracle.transform(desc, record.label)
            _check_pair(pair, record.label, n_candidates)
            pairs.append(pair)
    return pairs


def thread_count() -> int:
    """Worker cap from the MEDISEE_THREADS environment variable."""
    raw = os.environ.get("MEDISEE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    n = int(raw)
    if n < 1:
        raise ValueError("MEDISEE_THREADS must be >= 1")
    return n


def generate_pipeline(
    records: list[ImageRecord],
    oracle: OracleInterface,
    n_candidates: int = 2,
    threads: int | None = None,
) -> list[ImageRecord]:
    """Attach QA pairs to every record; failing records are skipped with a log line."""
    if not records:
        raise ValueError("generate_pipeline: no records")
    workers = threads if threads is not None else thread_count()

    def job(record):
        try:
            return replace(record, qa=_pairs_for_record(record, oracle, n_candidates))
        except OracleError as exc:
            log.warning("skipping record %s: %s", record.id, exc)
            return None

    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, records))
    else:
        results = [job(r) for r in records]
    kept = [r for r in results if r is not None]
    return sorted(kept, key=lambda r: r.id)


def training_ready(records: list[ImageRecord]) -> list[ImageRecord]:
    """Records that still carry at least one QA pair."""
    return [r for r in records if r.qa]


# -- splits and statistics ---------------------------------------------------------

def split_dataset(
    records: list[ImageRecord],
    ratios: tuple[float, float, float] = (0.80, 0.10, 0.10),
    seed: int = 0,
) -> tuple[list[ImageRecord], list[ImageRecord], list[ImageRecord]]:
    """Shuffled partition with largest-remainder sizing (within +/-1 of exact)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios {ratios} do not sum to 1")
    if len(records) < 3:
        raise ValueError("need at least 3 records to split")
    order = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[i] for i in order]
    n = len(records)
    exact = [r * n for r in ratios]
    sizes = [int(e) for e in exact]
    # hand out leftover slots by largest fractional remainder, earliest first on ties
    remainders = sorted(
        range(3), key=lambda i: (-(exact[i] - sizes[i]), i)
    )
    for i in range(n - sum(sizes)):
        sizes[remainders[i]] += 1
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def dataset_stats(records: list[ImageRecord]) -> dict:
    """Per-category image and QA frequency tables plus totals."""
    images: dict[str, int] = {}
    qa: dict[str, int] = {}
    for r in records:
        images[r.label] = images.get(r.label, 0) + 1
        if r.qa:
            qa[r.label] = qa.get(r.label, 0) + len(r.qa)
    return {
        "images": dict(sorted(images.items())),
        "qa": dict(sorted(qa.items())),
        "total_images": len(records),
        "total_qa": sum(qa.values()),
    }


# -- serialization -------------------------------------------------------------------

def record_to_json(record: ImageRecord) -> dict:
    H, W = record.image.shape
    return {
        "id": record.id,
        "width": W,
        "height": H,
        "image_b64": base64.b64encode(record.image.astype("<f4").tobytes()).decode(),
        "mask_b64": base64.b64encode(
            np.packbits(record.mask.astype(np.uint8), axis=1).tobytes()
        ).decode(),
        "box": list(record.box.as_floats()),
        "label": record.label,
        "modality": record.modality,
        "qa": [vars(p) for p in record.qa],
    }


def record_from_json(obj: dict) -> ImageRecord:
    try:
        H, W = int(obj["height"]), int(obj["width"])
        image = np.frombuffer(base64.b64decode(obj["image_b64"]), dtype="<f4")
        if image.size != H * W:
            raise DataError(f"image payload holds {image.size} values, expected {H * W}")
        image = image.reshape(H, W).astype(np.float64)
        row_bytes = (W + 7) // 8
        packed = np.frombuffer(base64.b64decode(obj["mask_b64"]), dtype=np.uint8)
        if packed.size != H * row_bytes:
            raise DataError(f"mask payload holds {packed.size} bytes, expected {H * row_bytes}")
        mask = np.unpackbits(packed.reshape(H, row_bytes), axis=1)[:, :W].astype(bool)
        box = BBox(*[float(v) for v in obj["box"]])
        box.validate()
        qa = [QAPair(**p) for p in obj["qa"]]
        record = ImageRecord(
            id=str(obj["id"]),
            image=image,
            mask=mask,
            box=box,
            label=str(obj["label"]),
            modality=str(obj["modality"]),
            qa=qa,
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed record: {exc}") from exc
    if not record.mask.any():
        raise DataError(f"record {record.id} has an empty mask")
    derived = mask2box(record.mask).as_floats()
    if any(abs(x - y) > 1e-9 for x, y in zip(derived, record.box.as_floats())):
        raise DataError(f"record {record.id} box does not match its mask")
    return record


def write_jsonl(records: list[ImageRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record)) + "\n")


def read_jsonl(path) -> list[ImageRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            records.append(record_from_json(obj))
    return records

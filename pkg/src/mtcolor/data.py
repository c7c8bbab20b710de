"""Annotation schema, synthetic shape dataset, and the annotation pipeline
with pluggable detector/captioner clients (deterministic stubs included)."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .denoiser import ConditioningBundle
from .masks import CorruptMaskError, InstanceMask, MaskSet, rle_decode, rle_encode

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (230, 30, 30),
    "green": (30, 200, 60),
    "blue": (40, 80, 230),
    "yellow": (235, 220, 40),
    "purple": (150, 60, 200),
    "orange": (240, 140, 30),
    "cyan": (40, 200, 210),
    "brown": (140, 90, 40),
}
SHAPES = ("circle", "square", "triangle")
CROP_FILL = 128
DEFAULT_REFUSAL_PATTERNS = ("unable to provide", "too blurred")
LUMA = np.array([0.299, 0.587, 0.114])


class SchemaError(ValueError):
    def __init__(self, message: str, record_index: int | None = None,
                 field_path: str | None = None):
        self.record_index = record_index
        self.field_path = field_path
        where = "" if record_index is None else f"record {record_index}: "
        super().__init__(f"{where}{message}")


class DetectorError(RuntimeError):
    pass


class CaptionerError(RuntimeError):
    pass


@dataclass
class InstanceAnnotation:
    index: int
    text: str
    mask: InstanceMask
    bbox: tuple[int, int, int, int]
    source: str | None = None        # primary | fallback | none
    reason: str | None = None


@dataclass
class AnnotatedImage:
    image_id: str
    width: int
    height: int
    global_text: str
    instances: list[InstanceAnnotation] = field(default_factory=list)
    global_source: str | None = None     # pipeline provenance; not serialized
    global_reason: str | None = None

    def mask_set(self) -> MaskSet:
        return MaskSet(self.width, self.height, tuple(i.mask for i in self.instances))

    def texts(self) -> list[str]:
        return [i.text for i in self.instances]


def annotation_to_dict(ann: AnnotatedImage) -> dict:
    instances = []
    for inst in ann.instances:
        entry = {
            "index": inst.index,
            "text": inst.text,
            "mask": {"h": inst.mask.height, "w": inst.mask.width,
                     "runs": rle_encode(inst.mask)},
            "bbox": list(inst.bbox),
        }
        if inst.source is not None:
            entry["source"] = inst.source
        if inst.reason is not None:
            entry["reason"] = inst.reason
        instances.append(entry)
    return {"image_id": ann.image_id, "width": ann.width, "height": ann.height,
            "global_text": ann.global_text, "instances": instances}


def annotation_from_dict(payload: dict, record_index: int | None = None) -> AnnotatedImage:
    def need(container, key, path):
        if key not in container:
            raise SchemaError(f"missing field {path}", record_index, path)
        return container[key]

    image_id = need(payload, "image_id", "image_id")
    width = need(payload, "width", "width")
    height = need(payload, "height", "height")
    global_text = need(payload, "global_text", "global_text")
    if not isinstance(width, int) or not isinstance(height, int) or width < 1 or height < 1:
        raise SchemaError("width/height must be positive integers", record_index, "width")
    instances = []
    for i, raw in enumerate(need(payload, "instances", "instances")):
        base = f"instances[{i}]"
        index = need(raw, "index", f"{base}.index")
        text = need(raw, "text", f"{base}.text")
        mask_obj = need(raw, "mask", f"{base}.mask")
        h = need(mask_obj, "h", f"{base}.mask.h")
        w = need(mask_obj, "w", f"{base}.mask.w")
        runs = need(mask_obj, "runs", f"{base}.mask.runs")
        if (h, w) != (height, width):
            raise SchemaError(f"mask dims {h}x{w} do not fit image", record_index,
                              f"{base}.mask")
        try:
            mask = rle_decode(runs, h, w)
        except CorruptMaskError as exc:
            raise SchemaError(str(exc), record_index, f"{base}.mask.runs") from exc
        bbox = need(raw, "bbox", f"{base}.bbox")
        if len(bbox) != 4:
            raise SchemaError("bbox must be [x, y, w, h]", record_index, f"{base}.bbox")
        instances.append(InstanceAnnotation(
            index=index, text=text, mask=mask, bbox=tuple(int(v) for v in bbox),
            source=raw.get("source"), reason=raw.get("reason")))
    return AnnotatedImage(image_id=image_id, width=width, height=height,
                          global_text=global_text, instances=instances)


def write_annotations(annotations, path) -> None:
    """One JSON record per line; written atomically (temp + rename)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for ann in annotations:
                fh.write(json.dumps(annotation_to_dict(ann), ensure_ascii=False))
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_annotations(path) -> list[AnnotatedImage]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", record_index=i) from exc
            out.append(annotation_from_dict(payload, record_index=i))
    return out


# -- synthetic dataset --------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    count: int = 100
    size: int = 32
    min_shapes: int = 1
    max_shapes: int = 4
    background_range: tuple[float, float] = (0.25, 0.85)
    seed: int = 0

    def __post_init__(self):
        if self.count < 0 or self.size < 8:
            raise ValueError("invalid count or size")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")


@dataclass
class SynthSample:
    image: np.ndarray          # (H, W, 3) uint8
    annotation: AnnotatedImage


def _circle(size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r)


def _square(size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)


def _triangle(size, cy, cx, r):
    # apex-up isoceles triangle inscribed in a (2r+1)-tall box
    out = np.zeros((size, size), dtype=bool)
    height = 2 * r + 1
    for k in range(height):
        span = int(round(r * (k + 1) / height))
        y = cy - r + k
        if 0 <= y < size:
            out[y, max(0, cx - span):min(size, cx + span + 1)] = True
    return out

_RASTER = {"circle": _circle, "square": _square, "triangle": _triangle}


def _tone_word(level: float) -> str:
    if level < 0.45:
        return "dark"
    if level < 0.65:
        return "medium"
    return "light"


def generate_synthetic(cfg: SynthConfig) -> list[SynthSample]:
    """Non-overlapping colored shapes on a gray background; every instance
    text is "a {color} {shape}" and masks match the painted pixels exactly."""
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for idx in range(cfg.count):
        level = float(rng.uniform(*cfg.background_range))
        bg = int(round(level * 255))
        image = np.full((cfg.size, cfg.size, 3), bg, dtype=np.uint8)
        occupied = np.zeros((cfg.size, cfg.size), dtype=bool)
        wanted = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        instances = []
        phrases = []
        for k in range(wanted):
            placed = None
            for _ in range(60):
                shape = SHAPES[int(rng.integers(len(SHAPES)))]
                color = list(PALETTE)[int(rng.integers(len(PALETTE)))]
                r = int(rng.integers(3, max(4, cfg.size // 5)))
                cy = int(rng.integers(r + 1, cfg.size - r - 1))
                cx = int(rng.integers(r + 1, cfg.size - r - 1))
                mask = _RASTER[shape](cfg.size, cy, cx, r)
                if mask.sum() and not (mask & occupied).any():
                    placed = (shape, color, mask)
                    break
            if placed is None:
                continue
            shape, color, mask = placed
            occupied |= mask
            image[mask] = PALETTE[color]
            inst_mask = InstanceMask(mask.astype(np.uint8))
            text = f"a {color} {shape}"
            instances.append(InstanceAnnotation(
                index=len(instances), text=text, mask=inst_mask,
                bbox=inst_mask.bbox()))
            phrases.append(text)
        global_text = f"a {_tone_word(level)} gray background with " + ", ".join(phrases) \
            if phrases else f"a {_tone_word(level)} gray background"
        ann = AnnotatedImage(image_id=f"synth-{idx:05d}", width=cfg.size,
                             height=cfg.size, global_text=global_text,
                             instances=instances)
        samples.append(SynthSample(image=image, annotation=ann))
    return samples


def luminance(image: np.ndarray) -> np.ndarray:
    """(H, W) luminance in [0, 1] from an 8-bit RGB image."""
    return (image.astype(np.float64) / 255.0) @ LUMA


def sample_to_bundle(sample: SynthSample) -> ConditioningBundle:
    ann = sample.annotation
    return ConditioningBundle(
        gray=torch.tensor(luminance(sample.image), dtype=torch.get_default_dtype()),
        global_text=ann.global_text, masks=ann.mask_set(), texts=ann.texts())


def to_training_tensors(samples) -> tuple[torch.Tensor, list[ConditioningBundle]]:
    """Images scaled to [-1, 1] plus one conditioning bundle per sample."""
    images = torch.stack([
        torch.tensor(s.image.astype(np.float32) / 255.0 * 2.0 - 1.0).permute(2, 0, 1)
        for s in samples])
    return images, [sample_to_bundle(s) for s in samples]


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(image, mode="RGB").save(str(path), format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(str(path)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_dataset(samples, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_png(s.image, out_dir / "images" / f"{s.annotation.image_id}.png")
    write_annotations([s.annotation for s in samples], out_dir / "annotations.jsonl")
    return out_dir


def load_dataset(root) -> list[SynthSample]:
    root = Path(root)
    annotations = read_annotations(root / "annotations.jsonl")
    samples = []
    for ann in annotations:
        image = load_png(root / "images" / f"{ann.image_id}.png")
        samples.append(SynthSample(image=image, annotation=ann))
    return samples


# -- pipeline operations ------------------------------------------------------

def crop_instance(image: np.ndarray, mask: InstanceMask) -> np.ndarray:
    """Tight bounding-box crop with mid-gray fill outside the mask."""
    if mask.is_empty():
        raise ValueError("cannot crop an empty mask")
    x, y, w, h = mask.bbox()
    crop = image[y:y + h, x:x + w].copy()
    inside = mask.bits[y:y + h, x:x + w].astype(bool)
    crop[~inside] = CROP_FILL
    return crop


@dataclass(frozen=True)
class CaptionCheck:
    valid: bool
    reason: str | None = None


def validate_caption(text: str, lexicon=None, refusal_patterns=None) -> CaptionCheck:
    lexicon = tuple(PALETTE) if lexicon is None else tuple(lexicon)
    refusal_patterns = (DEFAULT_REFUSAL_PATTERNS if refusal_patterns is None
                        else tuple(refusal_patterns))
    if not text or not text.strip():
        return CaptionCheck(False, "empty")
    low = text.lower()
    for pattern in refusal_patterns:
        if pattern in low:
            return CaptionCheck(False, "refusal")
    words = {w.strip(".,!?;:()\"'") for w in low.split()}
    if not words & set(lexicon):
        return CaptionCheck(False, "no color word")
    return CaptionCheck(True, None)


class SyntheticShapeDetector:
    """Exact palette-color connected components; recovers the generator's
    masks from a rendered image."""

    name = "synthetic"

    def detect(self, image: np.ndarray):
        from scipy import ndimage
        h, w = image.shape[:2]
        masks, labels = [], []
        for color, rgb in PALETTE.items():
            match = (image == np.array(rgb, dtype=np.uint8)).all(axis=2)
            if not match.any():
                continue
            components, count = ndimage.label(match)
            for c in range(1, count + 1):
                masks.append(InstanceMask((components == c).astype(np.uint8)))
                labels.append(color)
        return MaskSet(w, h, tuple(masks)), labels


class FailingDetector:
    name = "failing"

    def detect(self, image):
        raise DetectorError("detector backend unavailable")


class MeanColorCaptioner:
    """Names the palette color nearest to the mean of non-fill pixels."""

    name = "mean-color"

    def __init__(self):
        self.calls = 0

    def caption(self, crop: np.ndarray) -> str:
        self.calls += 1
        flat = crop.reshape(-1, 3).astype(np.float64)
        colored = flat[~(flat == CROP_FILL).all(axis=1)]
        if colored.size == 0:
            return "a gray patch"
        mean = colored.mean(axis=0)
        names = list(PALETTE)
        dists = [np.linalg.norm(mean - np.array(PALETTE[n], dtype=np.float64))
                 for n in names]
        return f"a {names[int(np.argmin(dists))]} object"


class StaticCaptioner:
    def __init__(self, text: str, name: str = "static"):
        self.text = text
        self.name = name
        self.calls = 0

    def caption(self, crop) -> str:
        self.calls += 1
        return self.text


class RefusalCaptioner(StaticCaptioner):
    """Mimics the VLM failure mode of refusing blurred inputs."""

    def __init__(self):
        super().__init__(
            "Unable to provide color description, image is too blurred and unclear.",
            name="refusal")


class SizeLimitedCaptioner:
    """Delegates to an inner captioner but fails on crops below a minimum."""

    def __init__(self, inner, min_side: int = 5):
        self.inner = inner
        self.min_side = min_side
        self.name = f"size-limited({inner.name})"
        self.calls = 0

    def caption(self, crop) -> str:
        self.calls += 1
        if min(crop.shape[:2]) < self.min_side:
            raise CaptionerError(f"crop {crop.shape[:2]} below {self.min_side}px")
        return self.inner.caption(crop)


def get_detector(name: str):
    registry = {"synthetic": SyntheticShapeDetector}
    if name not in registry:
        raise ValueError(f"unknown detector {name!r} (have {sorted(registry)})")
    return registry[name]()


def get_captioner(name: str):
    registry = {"mean-color": MeanColorCaptioner, "refusal": RefusalCaptioner}
    if name not in registry:
        raise ValueError(f"unknown captioner {name!r} (have {sorted(registry)})")
    return registry[name]()


def _caption_with_fallback(target, primary, fallback, lexicon):
    """primary -> validate -> fallback -> validate -> empty with reason."""
    reason = None
    for client, source in ((primary, "primary"), (fallback, "fallback")):
        try:
            text = client.caption(target)
        except Exception as exc:
            reason = f"{source} failed: {exc}"
            continue
        check = validate_caption(text, lexicon)
        if check.valid:
            return text, source, None
        reason = f"{source} invalid: {check.reason}"
    return "", "none", reason


def annotate_image(image: np.ndarray, image_id: str, detector, primary, fallback,
                   lexicon=None) -> AnnotatedImage:
    """Detect instances, caption the whole image and every crop through the
    primary/fallback cascade, and assemble the annotation record."""
    try:
        mask_set, _labels = detector.detect(image)
    except Exception as exc:
        raise DetectorError(f"detection failed for {image_id}: {exc}") from exc
    h, w = image.shape[:2]
    global_text, g_source, g_reason = _caption_with_fallback(image, primary,
                                                             fallback, lexicon)
    instances = []
    for k, mask in enumerate(mask_set):
        crop = crop_instance(image, mask)
        text, source, reason = _caption_with_fallback(crop, primary, fallback, lexicon)
        instances.append(InstanceAnnotation(index=k, text=text, mask=mask,
                                            bbox=mask.bbox(), source=source,
                                            reason=reason))
    return AnnotatedImage(image_id=image_id, width=w, height=h,
                          global_text=global_text, instances=instances,
                          global_source=g_source, global_reason=g_reason)

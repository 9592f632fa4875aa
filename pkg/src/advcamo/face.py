"""Face preparation and pattern blending.

``preprocess`` turns a raw photograph into an aligned, normalized
:class:`FaceSample` with a paintable-region mask.  Detection and parsing are
pluggable; the fixture providers here read everything from disk so that the
pipeline runs without any network model downloads.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np

log = logging.getLogger(__name__)

CANVAS = (112, 112)
DEFAULT_REGIONS = ("skin", "nose")
MANIFEST_SCHEMA = "advcamo.dataset/1"


class DetectionError(RuntimeError):
    pass


class SegmentationError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


@dataclasses.dataclass
class FaceSample:
    identity: str
    image: np.ndarray  # H x W x 3 float in [0, 1]
    mask: np.ndarray  # H x W float in [0, 1]
    source_path: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ContractError(
                f"image {self.image.shape[:2]} and mask {self.mask.shape} differ in size"
            )
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise ContractError("mask values must lie in [0, 1]")
        if not (self.mask > 0).any():
            raise ContractError("mask selects no pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclasses.dataclass(frozen=True)
class BlendConfig:
    overlay_threshold: float = 0.4
    force: bool = False

    def __post_init__(self):
        t = self.overlay_threshold
        if not 0.0 <= t <= 1.0:
            raise ContractError("overlay threshold must lie in [0, 1]")
        if not self.force and not 0.3 <= t <= 0.5:
            raise ContractError(
                f"overlay threshold {t} outside the realistic range [0.3, 0.5]; pass force=True"
            )


@dataclasses.dataclass
class Detection:
    box: tuple[float, float, float, float]  # x0, y0, x1, y1 in continuous pixel coords
    left_eye: tuple[float, float] | None = None
    right_eye: tuple[float, float] | None = None
    score: float = 1.0


class Detector(Protocol):
    thread_safe: bool

    def detect(self, image: np.ndarray, source_path: str = "") -> list[Detection]: ...


class Parser(Protocol):
    thread_safe: bool

    def region_mask(
        self, image: np.ndarray, regions: Sequence[str], source_path: str = ""
    ) -> np.ndarray: ...


class PassthroughDetector:
    """Treats the whole frame as one upright face; for pre-aligned inputs."""

    thread_safe = True

    def detect(self, image, source_path=""):
        h, w = image.shape[:2]
        return [Detection((0.0, 0.0, float(w), float(h)))]


class FixtureDetector:
    """Looks detections up by source path (e.g. from a JSON sidecar)."""

    thread_safe = True

    def __init__(self, detections: dict[str, list[Detection]]):
        self.detections = detections

    @classmethod
    def from_json(cls, path: str | Path) -> "FixtureDetector":
        raw = json.loads(Path(path).read_text())
        return cls({k: [Detection(**d) for d in v] for k, v in raw.items()})

    def detect(self, image, source_path=""):
        return list(self.detections.get(source_path, []))


class FullMaskParser:
    thread_safe = True

    def region_mask(self, image, regions, source_path=""):
        return np.ones(image.shape[:2], dtype=np.float64)


class FixtureParser:
    """Reads precomputed 8-bit grayscale masks (already in the canonical frame)."""

    thread_safe = True

    def __init__(self, mask_paths: dict[str, str | Path] | None = None):
        self.mask_paths = dict(mask_paths or {})

    def region_mask(self, image, regions, source_path=""):
        path = self.mask_paths.get(source_path)
        if path is None:
            raise SegmentationError(f"no precomputed mask for {source_path!r}")
        mask = read_mask(path)
        if mask.shape != image.shape[:2]:
            raise SegmentationError(f"mask {path} has shape {mask.shape}, expected {image.shape[:2]}")
        return mask


class LabelMapParser:
    """Adapter for parsers producing integer label maps (e.g. FaRL/LaPa style)."""

    thread_safe = False

    def __init__(self, predict, label_names: Sequence[str]):
        self.predict = predict
        self.label_names = list(label_names)

    def region_mask(self, image, regions, source_path=""):
        labels = self.predict(image)
        ids = [self.label_names.index(r) for r in regions if r in self.label_names]
        return np.isin(labels, ids).astype(np.float64)


class RetinaFaceDetector:
    """Adapter for the ``retina-face`` package; imported lazily."""

    thread_safe = False

    def __init__(self, threshold: float = 0.9):
        try:
            from retinaface import RetinaFace  # type: ignore
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise DetectionError("retina-face is not installed") from exc
        self._impl = RetinaFace
        self.threshold = threshold

    def detect(self, image, source_path=""):  # pragma: no cover - needs model weights
        faces = self._impl.detect_faces(np.ascontiguousarray(image[..., ::-1]), threshold=self.threshold)
        out = []
        for face in (faces or {}).values():
            lm = face["landmarks"]
            # RetinaFace names eyes from the subject's point of view
            out.append(
                Detection(
                    tuple(float(v) for v in face["facial_area"]),
                    left_eye=tuple(lm["right_eye"]),
                    right_eye=tuple(lm["left_eye"]),
                    score=float(face["score"]),
                )
            )
        return out


def alignment_matrix(det: Detection, canvas: tuple[int, int]) -> np.ndarray:
    """2x3 affine map (continuous coords) from the raw image to the canvas."""
    x0, y0, x1, y1 = det.box
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    h, w = canvas
    phi = 0.0
    if det.left_eye is not None and det.right_eye is not None:
        dx = det.right_eye[0] - det.left_eye[0]
        dy = det.right_eye[1] - det.left_eye[1]
        phi = math.atan2(dy, dx)
    c, s = math.cos(-phi), math.sin(-phi)
    rot = np.array([[c, -s], [s, c]])
    scale = np.diag([w / (x1 - x0), h / (y1 - y0)])
    a = scale @ rot
    t = np.array([w / 2.0, h / 2.0]) - a @ np.array([cx, cy])
    return np.hstack([a, t[:, None]])


def warp(image: np.ndarray, m: np.ndarray, canvas: tuple[int, int], nearest: bool = False) -> np.ndarray:
    # cv2 puts pixel centers at integer coordinates, ours at +0.5
    a, t = m[:, :2], m[:, 2]
    t_int = t + a @ np.array([0.5, 0.5]) - 0.5
    m_int = np.hstack([a, t_int[:, None]])
    flags = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.warpAffine(
        image, m_int, (canvas[1], canvas[0]), flags=flags, borderMode=cv2.BORDER_REPLICATE
    )


def preprocess(
    raw_image: np.ndarray,
    detector: Detector,
    parser: Parser,
    *,
    identity: str = "",
    source_path: str = "",
    canvas: tuple[int, int] = CANVAS,
    regions: Sequence[str] = DEFAULT_REGIONS,
) -> FaceSample:
    """Crop, rotate, resize, normalize and segment one face.

    ``raw_image`` is H x W x 3 RGB, either uint8 or float in [0, 255].
    """
    dets = detector.detect(raw_image, source_path)
    if not dets:
        raise DetectionError(f"no face found in {source_path or 'image'}")
    if len(dets) > 1:
        raise DetectionError(f"{len(dets)} faces found in {source_path or 'image'}; expected one")
    m = alignment_matrix(dets[0], canvas)
    aligned = warp(np.asarray(raw_image, dtype=np.float32), m, canvas).astype(np.float64)
    image = np.clip(aligned / 255.0, 0.0, 1.0)
    try:
        mask = parser.region_mask(image, regions, source_path)
    except SegmentationError:
        raise
    except Exception as exc:
        raise SegmentationError(f"parser failed on {source_path!r}: {exc}") from exc
    mask = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    if not (mask > 0).any():
        raise SegmentationError(f"empty region mask for {source_path!r}")
    return FaceSample(identity, image, mask, source_path)


def blend_arrays(image, mask, pattern, t: float):
    """out = (1 - t*mask) * image + t*mask * pattern/255; numpy or torch inputs."""
    alpha = t * mask[..., None]
    return (1 - alpha) * image + alpha * (pattern / 255.0)


def blend(sample: FaceSample, pattern, cfg: BlendConfig) -> np.ndarray:
    pixels = getattr(pattern, "pixels", pattern)
    if tuple(pixels.shape[:2]) != tuple(sample.shape):
        raise ContractError(f"pattern {pixels.shape[:2]} does not match face {sample.shape}")
    return blend_arrays(sample.image, sample.mask, pixels, cfg.overlay_threshold)


def read_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_mask(mask: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(np.clip(np.rint(mask * 255), 0, 255).astype(np.uint8)).save(path)


@dataclasses.dataclass
class ManifestRecord:
    path: str
    identity: str
    mask_path: str | None = None


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """Line-delimited JSON; relative paths resolve against the manifest's folder."""
    path = Path(path)
    root = path.parent
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "schema" in d and "path" not in d:
            continue  # header line
        rec = ManifestRecord(d["path"], str(d["identity"]), d.get("mask_path"))
        rec.path = str(root / rec.path)
        if rec.mask_path:
            rec.mask_path = str(root / rec.mask_path)
        records.append(rec)
    return records


def write_manifest(records: Sequence[ManifestRecord], path: str | Path) -> None:
    lines = [json.dumps({"schema": MANIFEST_SCHEMA})]
    for r in records:
        d = {"path": r.path, "identity": r.identity}
        if r.mask_path:
            d["mask_path"] = r.mask_path
        lines.append(json.dumps(d))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(
    manifest: str | Path,
    detector: Detector | None = None,
    parser: Parser | None = None,
    canvas: tuple[int, int] = CANVAS,
    regions: Sequence[str] = DEFAULT_REGIONS,
) -> list[FaceSample]:
    """Preprocess every manifest entry; unparseable samples are logged and skipped."""
    records = read_manifest(manifest)
    detector = detector or PassthroughDetector()
    parser = parser or FixtureParser({r.path: r.mask_path for r in records if r.mask_path})
    samples = []
    for rec in records:
        try:
            samples.append(
                preprocess(
                    read_image(rec.path),
                    detector,
                    parser,
                    identity=rec.identity,
                    source_path=rec.path,
                    canvas=canvas,
                    regions=regions,
                )
            )
        except SegmentationError as exc:
            log.warning("skipping %s: %s", rec.path, exc)
    return samples

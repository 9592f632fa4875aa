"""Procedurally generated face-like images for hermetic desk-scale runs.

Each identity fixes face shape, skin tone, eyes, brows, nose, mouth, hair
and a handful of skin marks; each photo of it varies pose, lighting,
expression, background and noise.  A label map is drawn alongside so the
paintable-region mask is exact.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import cv2
import numpy as np

from .face import CANVAS, ManifestRecord, write_manifest, write_mask

LABELS = ("background", "skin", "nose", "eye", "brow", "lips", "hair")
_ID = {name: i for i, name in enumerate(LABELS)}


@dataclasses.dataclass
class Identity:
    name: str
    face_axes: tuple[float, float]
    skin: np.ndarray
    hair: np.ndarray
    hairline: float
    hair_style: int
    eye_y: float
    eye_dx: float
    eye_r: float
    iris: np.ndarray
    brow_gap: float
    brow_tilt: float
    brow_w: int
    nose_len: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    lips: np.ndarray
    cheek: np.ndarray
    marks: np.ndarray  # (n, 3): x offset, y offset, radius


def random_identity(rng: np.random.Generator, name: str) -> Identity:
    skin = np.array([rng.uniform(90, 240), 0, 0])
    skin[1] = skin[0] * rng.uniform(0.62, 0.85)
    skin[2] = skin[1] * rng.uniform(0.7, 0.95)
    n_marks = rng.integers(2, 6)
    marks = np.column_stack(
        [rng.uniform(-22, 22, n_marks), rng.uniform(-18, 28, n_marks), rng.uniform(1.2, 3.0, n_marks)]
    )
    return Identity(
        name=name,
        face_axes=(rng.uniform(30, 40), rng.uniform(40, 50)),
        skin=skin,
        hair=rng.uniform(10, 200, 3),
        hairline=rng.uniform(0.55, 0.85),
        hair_style=int(rng.integers(0, 3)),
        eye_y=rng.uniform(-12, -4),
        eye_dx=rng.uniform(12, 19),
        eye_r=rng.uniform(3.0, 5.5),
        iris=rng.uniform(20, 160, 3),
        brow_gap=rng.uniform(6, 11),
        brow_tilt=rng.uniform(-0.35, 0.35),
        brow_w=int(rng.integers(1, 4)),
        nose_len=rng.uniform(10, 20),
        nose_w=rng.uniform(4, 9),
        mouth_y=rng.uniform(20, 30),
        mouth_w=rng.uniform(8, 16),
        lips=np.array([rng.uniform(120, 220), rng.uniform(30, 110), rng.uniform(40, 120)]),
        cheek=rng.uniform(-30, 30, 3),
        marks=marks,
    )


def _pt(x, y):
    return (int(round(x * 16)), int(round(y * 16)))


def render_face(
    ident: Identity, rng: np.random.Generator, canvas: tuple[int, int] = CANVAS, jitter: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (uint8 RGB image, integer label map)."""
    h, w = canvas
    s = min(h, w) / 112.0
    if jitter:
        dx, dy = rng.uniform(-3, 3, 2) * s
        zoom = rng.uniform(0.95, 1.05)
        roll = rng.uniform(-4, 4)
        light = rng.uniform(0.8, 1.15)
        smile = rng.uniform(-3, 3)
        bg = rng.uniform(0, 255, 3)
        noise = 4.0
    else:
        dx = dy = 0.0
        zoom, roll, light, smile, noise = 1.0, 0.0, 1.0, 0.0, 0.0
        bg = np.full(3, 128.0)
    # draw at 16x subpixel precision in a nominal 112 frame, then warp
    img = np.empty((112, 112, 3), np.float32)
    img[:] = bg
    lab = np.zeros((112, 112), np.uint8)
    cx, cy = 56.0, 60.0
    ax, ay = ident.face_axes
    sh = cv2.LINE_AA

    def ellipse(target, center, axes, color, angle=0.0, thickness=-1, aa=True):
        cv2.ellipse(target, _pt(*center), _pt(*axes), angle, 0, 360, color, thickness, sh if aa else 8, 4)

    # hair behind the head
    hair = tuple(float(c) for c in ident.hair)
    if ident.hair_style == 2:
        ellipse(img, (cx, cy + 6), (ax + 6, ay + 8), hair)
        ellipse(lab, (cx, cy + 6), (ax + 6, ay + 8), _ID["hair"], aa=False)
    ellipse(img, (cx, cy), (ax, ay), tuple(float(c) for c in ident.skin))
    ellipse(lab, (cx, cy), (ax, ay), _ID["skin"], aa=False)
    # cheeks
    cheek = tuple(float(c) for c in np.clip(ident.skin + ident.cheek, 0, 255))
    for side in (-1, 1):
        ellipse(img, (cx + side * ax * 0.55, cy + 10), (7, 5), cheek)
    for mx, my, mr in ident.marks:
        color = tuple(float(c) for c in ident.skin * 0.55)
        ellipse(img, (cx + mx, cy + my), (mr, mr), color)
    # hair cap
    top = cy - ay
    cap_h = ay * (1 - ident.hairline) + 10
    if ident.hair_style in (0, 2):
        ellipse(img, (cx, top + cap_h / 2), (ax + 2, cap_h), hair)
        ellipse(lab, (cx, top + cap_h / 2), (ax + 2, cap_h), _ID["hair"], aa=False)
    else:
        pts = np.array([_pt(cx - ax - 2, top + cap_h), _pt(cx, top - 4), _pt(cx + ax + 2, top + cap_h + 6)])
        cv2.fillConvexPoly(img, pts, hair, sh, 4)
        cv2.fillConvexPoly(lab, pts, _ID["hair"], 8, 4)
    # eyes and brows
    ey = cy + ident.eye_y
    for side in (-1, 1):
        ex = cx + side * ident.eye_dx
        ellipse(img, (ex, ey), (ident.eye_r * 1.6, ident.eye_r), (240.0, 240.0, 235.0))
        ellipse(lab, (ex, ey), (ident.eye_r * 1.6 + 1, ident.eye_r + 1), _ID["eye"], aa=False)
        ellipse(img, (ex, ey), (ident.eye_r * 0.8, ident.eye_r * 0.8), tuple(float(c) for c in ident.iris))
        ellipse(img, (ex, ey), (ident.eye_r * 0.35, ident.eye_r * 0.35), (10.0, 10.0, 10.0))
        by = ey - ident.eye_r - ident.brow_gap
        p0 = (ex - side * 8, by + ident.brow_tilt * 8)
        p1 = (ex + side * 8, by - ident.brow_tilt * 8)
        brow = tuple(float(c) for c in ident.hair * 0.8)
        cv2.line(img, _pt(*p0), _pt(*p1), brow, ident.brow_w + 1, sh, 4)
        cv2.line(lab, _pt(*p0), _pt(*p1), _ID["brow"], ident.brow_w + 3, 8, 4)
    # nose
    nose_top = ey + 2
    nose = np.array(
        [
            _pt(cx - 1.5, nose_top),
            _pt(cx + 1.5, nose_top),
            _pt(cx + ident.nose_w, nose_top + ident.nose_len),
            _pt(cx - ident.nose_w, nose_top + ident.nose_len),
        ]
    )
    cv2.fillConvexPoly(img, nose, tuple(float(c) for c in ident.skin * 0.85), sh, 4)
    cv2.fillConvexPoly(lab, nose, _ID["nose"], 8, 4)
    # mouth: a curved band
    my = cy + ident.mouth_y
    xs = np.linspace(-ident.mouth_w, ident.mouth_w, 24)
    curve = my - smile * (1 - (xs / ident.mouth_w) ** 2)
    upper = np.stack([cx + xs, curve - 2.2], 1)
    lower = np.stack([cx + xs[::-1], curve[::-1] + 2.2], 1)
    poly = np.array([_pt(x, y) for x, y in np.concatenate([upper, lower])])
    cv2.fillPoly(img, [poly], tuple(float(c) for c in ident.lips), sh, 4)
    cv2.fillPoly(lab, [poly], _ID["lips"], 8, 4)
    cv2.polylines(lab, [poly], True, _ID["lips"], 2, 8, 4)

    # pose and scale jitter, then resize to the canvas
    m = cv2.getRotationMatrix2D((55.5, 55.5), roll, zoom)
    m[:, 2] += (dx / s, dy / s)
    m = np.array([[s, 0, 0], [0, s, 0]]) @ np.vstack([m, [0, 0, 1]])
    img = cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    lab = cv2.warpAffine(lab, m, (w, h), flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_REPLICATE)
    img = img * light
    if noise:
        img = img + rng.normal(0, noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), lab


def region_mask(labels: np.ndarray, regions=("skin", "nose")) -> np.ndarray:
    return np.isin(labels, [_ID[r] for r in regions]).astype(np.float64)


def generate_dataset(
    out_dir: str | Path,
    n_identities: int = 48,
    images_per_identity: int = 6,
    seed: int = 0,
    canvas: tuple[int, int] = CANVAS,
) -> Path:
    """Writes PNG images, PNG masks and a ``manifest.jsonl``; returns the manifest path."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_identities):
        ident = random_identity(rng, f"id{i:03d}")
        for j in range(images_per_identity):
            img, lab = render_face(ident, rng, canvas)
            rel = f"images/{ident.name}_{j}.png"
            mrel = f"masks/{ident.name}_{j}.png"
            Image.fromarray(img).save(out / rel)
            write_mask(region_mask(lab), out / mrel)
            records.append(ManifestRecord(rel, ident.name, mrel))
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest


def roll_fixture(roll_deg: float, size: int = 160, eye_dist: float = 40.0):
    """Blank image with two dark eye dots on a line rolled by ``roll_deg``.

    Returns (uint8 image, Detection with the true eye centers).
    """
    from .face import Detection

    img = np.full((size, size, 3), 230, np.uint8)
    c = size / 2.0
    phi = math.radians(roll_deg)
    half = eye_dist / 2.0
    left = (c - half * math.cos(phi), c - half * math.sin(phi))
    right = (c + half * math.cos(phi), c + half * math.sin(phi))
    for x, y in (left, right):
        # continuous coords: pixel centers at +0.5
        cv2.circle(img, _pt(x - 0.5, y - 0.5), 5 * 16, (0, 0, 0), -1, cv2.LINE_AA, 4)
    det = Detection((c - 56.0, c - 56.0, c + 56.0, c + 56.0), left_eye=left, right_eye=right)
    return img, det

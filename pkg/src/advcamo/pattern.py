"""Pattern space: parameters, constraints, and a soft rasterizer.

Patterns are stripes or chevrons described by a handful of numbers
(period, angle, colors, phase).  The rasterizer blends neighbouring bands
through a sigmoid ramp so that every pixel is differentiable in those
numbers, which is what the white-box optimizer back-propagates through.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

FAMILIES = ("stripes", "chevrons")
MODES = ("constrained", "unconstrained")

WIDTH_MIN = 1.0 / 16.0
WIDTH_MAX = 1.0 / 2.0
ANGLE_MIN = 0.0
ANGLE_MAX = math.pi
CHANNEL_MIN = 0.0
CHANNEL_MAX = 255.0

DEFAULT_SOFTNESS = 1.5
PARAMS_SCHEMA = "advcamo.pattern/1"

Color = tuple[float, float, float]


class ConfigurationError(ValueError):
    """Invalid pattern or palette configuration."""


@dataclasses.dataclass(frozen=True)
class PatternParams:
    family: str
    width_frac: float
    angle: float
    colors: tuple[Color, ...]
    phase: float = 0.0
    mode: str = "unconstrained"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown pattern family {self.family!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown generator mode {self.mode!r}")
        colors = tuple(tuple(float(ch) for ch in c) for c in self.colors)
        if len(colors) < 2 or any(len(c) != 3 for c in colors):
            raise ConfigurationError("need at least two RGB colors")
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "width_frac", float(self.width_frac))
        object.__setattr__(self, "angle", float(self.angle))
        object.__setattr__(self, "phase", float(self.phase))

    @property
    def n_colors(self) -> int:
        return len(self.colors)

    def replace(self, **changes) -> "PatternParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "schema": PARAMS_SCHEMA,
            "family": self.family,
            "width_frac": self.width_frac,
            "angle": self.angle,
            "colors": [list(c) for c in self.colors],
            "phase": self.phase,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatternParams":
        schema = d.get("schema", PARAMS_SCHEMA)
        if schema != PARAMS_SCHEMA:
            raise ConfigurationError(f"unsupported pattern schema {schema!r}")
        return cls(
            family=d["family"],
            width_frac=d["width_frac"],
            angle=d["angle"],
            colors=tuple(tuple(c) for c in d["colors"]),
            phase=d.get("phase", 0.0),
            mode=d.get("mode", "unconstrained"),
        )


@dataclasses.dataclass(frozen=True)
class Palette:
    reference_colors: tuple[Color, ...]
    tolerance: float = 4.0

    def __post_init__(self):
        refs = tuple(tuple(float(ch) for ch in c) for c in self.reference_colors)
        if not refs:
            raise ConfigurationError("palette needs at least one reference color")
        for c in refs:
            if len(c) != 3 or not all(CHANNEL_MIN <= ch <= CHANNEL_MAX for ch in c):
                raise ConfigurationError(f"reference color out of range: {c}")
        if self.tolerance < 0:
            raise ConfigurationError("palette tolerance must be non-negative")
        object.__setattr__(self, "reference_colors", refs)
        object.__setattr__(self, "tolerance", float(self.tolerance))

    def to_dict(self) -> dict:
        return {
            "schema": "advcamo.palette/1",
            "reference_colors": [list(c) for c in self.reference_colors],
            "tolerance": self.tolerance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Palette":
        return cls(tuple(tuple(c) for c in d["reference_colors"]), d.get("tolerance", 4.0))


@dataclasses.dataclass
class PatternImage:
    pixels: np.ndarray  # H x W x 3, float64 in [0, 255]
    softness: float
    source_params: PatternParams

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


def _clip(x: float, lo: float, hi: float) -> float:
    return min(max(lo, x), hi)


def clip_params(p: PatternParams) -> PatternParams:
    """Project width, angle and color channels into their box bounds.

    Phase, family and mode pass through untouched.
    """
    colors = tuple(tuple(_clip(ch, CHANNEL_MIN, CHANNEL_MAX) for ch in c) for c in p.colors)
    return p.replace(
        width_frac=_clip(p.width_frac, WIDTH_MIN, WIDTH_MAX),
        angle=_clip(p.angle, ANGLE_MIN, ANGLE_MAX),
        colors=colors,
    )


def nearest_reference(color: Sequence[float], palette: Palette) -> int:
    refs = np.asarray(palette.reference_colors, dtype=np.float64)
    d = np.linalg.norm(refs - np.asarray(color, dtype=np.float64), axis=1)
    return int(np.argmin(d))  # first index wins ties


def project_to_palette(colors: Sequence[Sequence[float]], palette: Palette) -> list[Color]:
    """Clamp each color to within ``palette.tolerance`` of its nearest reference."""
    if palette is None or not palette.reference_colors:
        raise ConfigurationError("palette projection needs a non-empty palette")
    tol = palette.tolerance
    out = []
    for c in colors:
        ref = palette.reference_colors[nearest_reference(c, palette)]
        out.append(tuple(_clip(float(ch), r - tol, r + tol) for ch, r in zip(c, ref)))
    return out


def pattern_tensor(
    family: str,
    width_frac: torch.Tensor,
    angle: torch.Tensor,
    phase: torch.Tensor,
    colors: torch.Tensor,
    height: int,
    width: int,
    softness: float = DEFAULT_SOFTNESS,
) -> torch.Tensor:
    """Differentiable rasterization; returns an (H, W, 3) tensor in color units.

    ``width_frac * width`` is the repeat period in pixels: one full cycle
    through all K colors, so each band is ``period / K`` pixels wide.
    Stripe angle 0 gives vertical bands, pi/2 horizontal.  Chevrons fold
    the x coordinate about the vertical center line and tilt each arm by
    ``angle / 4`` from vertical, so the arms meet at ``angle / 2``.
    """
    if softness <= 0:
        raise ConfigurationError("softness must be positive")
    dtype = colors.dtype
    k = colors.shape[0]
    ys = torch.arange(height, dtype=dtype) + 0.5 - height / 2.0
    xs = torch.arange(width, dtype=dtype) + 0.5 - width / 2.0
    y, x = torch.meshgrid(ys, xs, indexing="ij")
    if family == "stripes":
        theta = angle
    elif family == "chevrons":
        x = x.abs()
        theta = angle / 4.0
    else:
        raise ConfigurationError(f"unknown pattern family {family!r}")
    s = x * torch.cos(theta) + y * torch.sin(theta)

    period = width_frac * width
    band = period / k
    pos = torch.remainder(s + phase * period, period)
    starts = torch.arange(k, dtype=dtype) * band
    # periodic copies so the wrap from the last band to the first stays smooth;
    # enough of them that the dropped sigmoid tails are below ~1e-9
    reach = 1 + int(np.ceil(20.0 * softness / float(period.detach())))
    offsets = torch.arange(-reach, reach + 1, dtype=dtype) * period
    shifted = pos[..., None, None] + offsets[None, None, :, None]
    lo = torch.sigmoid((shifted - starts) / softness)
    hi = torch.sigmoid((shifted - starts - band) / softness)
    weights = (lo - hi).sum(dim=-2)  # (H, W, K)
    weights = weights / weights.sum(dim=-1, keepdim=True)
    return weights @ colors


def params_to_tensors(p: PatternParams, dtype=torch.float64) -> dict[str, torch.Tensor]:
    return {
        "width_frac": torch.tensor(p.width_frac, dtype=dtype),
        "angle": torch.tensor(p.angle, dtype=dtype),
        "phase": torch.tensor(p.phase, dtype=dtype),
        "colors": torch.tensor(p.colors, dtype=dtype),
    }


def rasterize(
    p: PatternParams, height: int, width: int, softness: float = DEFAULT_SOFTNESS
) -> PatternImage:
    if height < 16 or width < 16:
        raise ConfigurationError("canvas must be at least 16x16")
    if softness <= 0:
        raise ConfigurationError("softness must be positive")
    t = params_to_tensors(p)
    with torch.no_grad():
        pix = pattern_tensor(p.family, height=height, width=width, softness=softness, **t)
    pixels = np.clip(pix.numpy(), CHANNEL_MIN, CHANNEL_MAX)
    return PatternImage(pixels=pixels, softness=softness, source_params=p)


def sample_random_params(
    rng: np.random.Generator,
    family: str,
    mode: str = "unconstrained",
    palette: Palette | None = None,
    n_colors: int = 2,
) -> PatternParams:
    if mode == "constrained" and palette is None:
        raise ConfigurationError("constrained mode requires a palette")
    width_frac = rng.uniform(WIDTH_MIN, WIDTH_MAX)
    angle = rng.uniform(ANGLE_MIN, ANGLE_MAX)
    colors = [tuple(rng.uniform(CHANNEL_MIN, CHANNEL_MAX, size=3)) for _ in range(n_colors)]
    if mode == "constrained":
        colors = project_to_palette(colors, palette)
    return PatternParams(family, width_frac, angle, tuple(colors), 0.0, mode)


def perturb_params(
    p: PatternParams,
    dc_max: float,
    dw_max: float,
    da_max: float,
    rng: np.random.Generator,
    canvas_width: int = 112,
) -> PatternParams:
    """Random neighbour of ``p``.

    ``dc_max`` is in channel units, ``dw_max`` in canvas pixels of the
    repeat period and ``da_max`` in degrees.
    """
    colors = tuple(
        tuple(ch + rng.uniform(-dc_max, dc_max) for ch in c) for c in p.colors
    )
    width_frac = p.width_frac + rng.uniform(-dw_max, dw_max) / canvas_width
    angle = p.angle + math.radians(rng.uniform(-da_max, da_max))
    return clip_params(p.replace(colors=colors, width_frac=width_frac, angle=angle))


def save_params(p: PatternParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(p.to_dict(), indent=2) + "\n")


def load_params(path: str | Path) -> PatternParams:
    return PatternParams.from_dict(json.loads(Path(path).read_text()))


def load_palette(path: str | Path) -> Palette:
    return Palette.from_dict(json.loads(Path(path).read_text()))


def save_png(image: PatternImage | np.ndarray, path: str | Path) -> None:
    from PIL import Image

    pixels = image.pixels if isinstance(image, PatternImage) else image
    arr = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)

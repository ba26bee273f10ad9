"""The eleven stochastic depth-image transformations and sequence application.

An augmentation sequence is an ordered list of (kind, magnitude, probability)
choices, each non-Identity kind occurring at most once. Applying a spec first
draws one activation uniform; if it activates, the kernel consumes further
draws in the fixed order documented on each kernel. Kernels take and return
float32 depth in [0, 1]; the mask passes through unchanged unless a kernel
says otherwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .depth_core import DepthFrame, SegClass
from .rng import Rng

__all__ = [
    "TransformKind",
    "Magnitude",
    "PROBABILITIES",
    "TransformSpec",
    "AugmentationSequence",
    "apply_spec",
    "apply_sequence",
    "enumerate_choices",
    "random_sequence",
    "render_sequence",
    "parse_sequence",
]


class TransformKind(enum.Enum):
    Identity = "Identity"
    Affine = "Affine"
    Cutout = "Cutout"
    Invert = "Invert"
    Posterize = "Posterize"
    Scale = "Scale"
    Sharpness = "Sharpness"
    WhiteNoise = "WhiteNoise"
    SaltNoise = "SaltNoise"
    BoundaryNoise = "BoundaryNoise"
    EraseObject = "EraseObject"


class Magnitude(enum.Enum):
    Low = "L"
    High = "H"


# Activation probabilities form a closed grid; 1/3 and 2/3 are the exact
# float64 quotients so membership checks can use equality.
PROBABILITIES = (1.0 / 3.0, 2.0 / 3.0, 1.0)

_PROB_TEXT = {PROBABILITIES[0]: "1/3", PROBABILITIES[1]: "2/3", PROBABILITIES[2]: "1"}
_TEXT_PROB = {v: k for k, v in _PROB_TEXT.items()}

# Identity and Invert carry no tunable parameter, so magnitude is ignored.
PARAMETERLESS = frozenset({TransformKind.Identity, TransformKind.Invert})


@dataclass(frozen=True)
class TransformSpec:
    kind: TransformKind
    magnitude: Magnitude
    probability: float

    def __post_init__(self):
        if self.probability not in _PROB_TEXT:
            raise ValueError(f"probability must be one of 1/3, 2/3, 1; got {self.probability!r}")

    def render(self) -> str:
        return f"{self.kind.value}({self.magnitude.value},{_PROB_TEXT[self.probability]})"


@dataclass(frozen=True)
class AugmentationSequence:
    """Ordered transform choices; each non-Identity kind at most once."""

    specs: tuple[TransformSpec, ...]
    max_len: int = 8

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if len(self.specs) > self.max_len:
            raise ValueError(f"sequence length {len(self.specs)} exceeds limit {self.max_len}")
        seen = set()
        for spec in self.specs:
            if spec.kind is TransformKind.Identity:
                continue
            if spec.kind in seen:
                raise ValueError(f"duplicate transform kind {spec.kind.value}")
            seen.add(spec.kind)

    def __len__(self) -> int:
        return len(self.specs)

    def used_kinds(self) -> set[TransformKind]:
        return {s.kind for s in self.specs if s.kind is not TransformKind.Identity}

    def render(self) -> str:
        return render_sequence(self)


def render_sequence(seq: AugmentationSequence) -> str:
    """Text form `Kind(mag,prob)&...`, empty string for the empty sequence."""
    return "&".join(spec.render() for spec in seq.specs)


def parse_sequence(text: str, max_len: int = 8) -> AugmentationSequence:
    """Inverse of render_sequence. Raises ValueError citing the bad token."""
    text = text.strip()
    if not text:
        return AugmentationSequence((), max_len=max_len)
    specs = []
    for pos, token in enumerate(text.split("&")):
        token = token.strip()
        try:
            name, rest = token.split("(", 1)
            mag_text, prob_text = rest.rstrip(")").split(",", 1)
            kind = TransformKind(name)
            magnitude = Magnitude(mag_text)
            probability = _TEXT_PROB[prob_text]
        except (ValueError, KeyError):
            raise ValueError(f"cannot parse transform token {token!r} at position {pos}") from None
        specs.append(TransformSpec(kind, magnitude, probability))
    return AugmentationSequence(tuple(specs), max_len=max_len)


_FULL_GRID: tuple[TransformSpec, ...] = tuple(
    TransformSpec(kind, magnitude, probability)
    for kind in TransformKind
    for magnitude in Magnitude
    for probability in PROBABILITIES
)


def enumerate_choices(used_kinds: set[TransformKind]) -> list[TransformSpec]:
    """All (kind, magnitude, probability) triples legal after `used_kinds`.

    Identity is always available; the uncollapsed grid over the full kind set
    has 11 * 2 * 3 = 66 triples.
    """
    if not used_kinds:
        return list(_FULL_GRID)
    return [
        s
        for s in _FULL_GRID
        if s.kind is TransformKind.Identity or s.kind not in used_kinds
    ]


def random_sequence(rng: Rng, length: int) -> AugmentationSequence:
    """Uniform random legal sequence: each slot drawn uniformly from the
    triples still allowed by the once-per-kind rule."""
    specs = []
    used: set[TransformKind] = set()
    for _ in range(length):
        choices = enumerate_choices(used)
        spec = choices[int(rng.integers(0, len(choices) - 1))]
        specs.append(spec)
        if spec.kind is not TransformKind.Identity:
            used.add(spec.kind)
    return AugmentationSequence(tuple(specs), max_len=length)


# ---------------------------------------------------------------------------
# Kernels. Each operates on (depth2d float32, mask2d uint8) and returns the
# new pair. Draw order is listed per kernel; an rng draw happens only when
# stated, so streams stay reproducible.

_F32_ONE = np.float32(1.0)


_GRID_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _pixel_grid(h: int, w: int):
    grid = _GRID_CACHE.get((h, w))
    if grid is None:
        grid = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        _GRID_CACHE[(h, w)] = grid
    return grid


def _affine(depth, mask, magnitude, rng):
    # Draws: dx, dy (integers), angle (uniform). Forward transform is rotate
    # about the image center then translate; implemented by inverse-mapping
    # output pixels with nearest-neighbor lookup. Vacated pixels get depth
    # 1.0 and Background.
    t, a = (9, 5.0) if magnitude is Magnitude.Low else (16, 10.0)
    dx = int(rng.integers(-t, t))
    dy = int(rng.integers(-t, t))
    angle = np.deg2rad(rng.uniform(-a, a))
    h, w = depth.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = _pixel_grid(h, w)
    # Invert: undo translation, then rotate by -angle about the center.
    yr = rows - (dy + cy)
    xr = cols - (dx + cx)
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    src_r = np.rint(cos_a * yr + sin_a * xr + cy).astype(np.int64)
    src_c = np.rint(-sin_a * yr + cos_a * xr + cx).astype(np.int64)
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    src_r_safe = np.clip(src_r, 0, h - 1)
    src_c_safe = np.clip(src_c, 0, w - 1)
    out_depth = np.where(inside, depth[src_r_safe, src_c_safe], _F32_ONE)
    out_mask = np.where(inside, mask[src_r_safe, src_c_safe], np.uint8(SegClass.Background))
    return out_depth.astype(np.float32, copy=False), out_mask.astype(np.uint8, copy=False)


def _cutout(depth, mask, magnitude, rng):
    # Per rectangle draws: width fraction, height fraction, x0, y0, fill value.
    # Sides are uniform in [10%, 30%] of the matching image dimension and the
    # rectangle always fits inside the image.
    count = 1 if magnitude is Magnitude.Low else 3
    h, w = depth.shape
    out_depth = depth.copy()
    out_mask = mask.copy()
    for _ in range(count):
        rw = max(1, int(round(rng.uniform(0.10, 0.30) * w)))
        rh = max(1, int(round(rng.uniform(0.10, 0.30) * h)))
        x0 = int(rng.integers(0, w - rw))
        y0 = int(rng.integers(0, h - rh))
        fill = np.float32(rng.random())
        out_depth[y0 : y0 + rh, x0 : x0 + rw] = fill
        out_mask[y0 : y0 + rh, x0 : x0 + rw] = np.uint8(SegClass.Background)
    return out_depth, out_mask


def _invert(depth, mask, magnitude, rng):
    return _F32_ONE - depth, mask


def _posterize(depth, mask, magnitude, rng):
    # Quantize x to 8-bit, zero the low (8 - b) bits, map back to [0, 1].
    b = 5 if magnitude is Magnitude.Low else 7
    q = np.floor(depth * np.float32(255.0)).astype(np.uint8)
    q &= np.uint8(0xFF & ~((1 << (8 - b)) - 1))
    return (q.astype(np.float32) / np.float32(255.0)), mask


def _scale(depth, mask, magnitude, rng):
    # Draws: one multiplier c.
    lo, hi = (0.95, 1.05) if magnitude is Magnitude.Low else (0.97, 1.03)
    c = np.float32(rng.uniform(lo, hi))
    return np.clip(depth * c, 0.0, 1.0).astype(np.float32), mask


_SHARP_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / np.float32(13.0)


def _smooth3x3(depth):
    padded = np.pad(depth, 1, mode="edge")
    acc = np.zeros_like(depth, dtype=np.float32)
    h, w = depth.shape
    for i in range(3):
        for j in range(3):
            acc += _SHARP_KERNEL[i, j] * padded[i : i + h, j : j + w]
    return acc


def _sharpness(depth, mask, magnitude, rng):
    # Draws: one factor f for Low; High is fixed f = 1.0 with no draw.
    f = np.float32(rng.uniform(0.5, 1.0)) if magnitude is Magnitude.Low else _F32_ONE
    smooth = _smooth3x3(depth)
    out = depth + f * (depth - smooth)
    return np.clip(out, 0.0, 1.0).astype(np.float32), mask


def _white_noise(depth, mask, magnitude, rng):
    # Draws: one H x W uniform array in [-m, m].
    m = 0.04 if magnitude is Magnitude.Low else 0.08
    noise = rng.uniform(-m, m, depth.shape).astype(np.float32)
    return np.clip(depth + noise, 0.0, 1.0).astype(np.float32), mask


def _salt_noise(depth, mask, magnitude, rng):
    # Draws: one H x W uniform array; pixels with u < rate are set to 1.0.
    rate = 0.01 if magnitude is Magnitude.Low else 0.03
    hits = rng.random(depth.shape) < rate
    out = depth.copy()
    out[hits] = _F32_ONE
    return out, mask


def _dilate_chebyshev(flags: np.ndarray, radius: int) -> np.ndarray:
    # A square structuring element is separable: dilate rows, then columns.
    out = flags.copy()
    h, w = flags.shape
    for dr in range(1, radius + 1):
        out[dr:, :] |= flags[: h - dr, :]
        out[: h - dr, :] |= flags[dr:, :]
    mid = out.copy()
    for dc in range(1, radius + 1):
        out[:, dc:] |= mid[:, : w - dc]
        out[:, : w - dc] |= mid[:, dc:]
    return out


def _boundary_noise(depth, mask, magnitude, rng):
    # No draws. A boundary pixel has any 4-neighbor with a different class;
    # everything within Chebyshev radius r of one is erased to far/Background.
    r = 2 if magnitude is Magnitude.Low else 4
    boundary = np.zeros(mask.shape, dtype=bool)
    boundary[:-1, :] |= mask[:-1, :] != mask[1:, :]
    boundary[1:, :] |= mask[1:, :] != mask[:-1, :]
    boundary[:, :-1] |= mask[:, :-1] != mask[:, 1:]
    boundary[:, 1:] |= mask[:, 1:] != mask[:, :-1]
    region = _dilate_chebyshev(boundary, r)
    out_depth = depth.copy()
    out_mask = mask.copy()
    out_depth[region] = _F32_ONE
    out_mask[region] = np.uint8(SegClass.Background)
    return out_depth, out_mask


def _erase_object(depth, mask, magnitude, rng):
    # Draws: one choice between Table and Wall.
    target = rng.choice([SegClass.Table, SegClass.Wall])
    hits = mask == np.uint8(target)
    out_depth = depth.copy()
    out_mask = mask.copy()
    out_depth[hits] = _F32_ONE
    out_mask[hits] = np.uint8(SegClass.Background)
    return out_depth, out_mask


_KERNELS = {
    TransformKind.Identity: lambda d, m, mag, rng: (d, m),
    TransformKind.Affine: _affine,
    TransformKind.Cutout: _cutout,
    TransformKind.Invert: _invert,
    TransformKind.Posterize: _posterize,
    TransformKind.Scale: _scale,
    TransformKind.Sharpness: _sharpness,
    TransformKind.WhiteNoise: _white_noise,
    TransformKind.SaltNoise: _salt_noise,
    TransformKind.BoundaryNoise: _boundary_noise,
    TransformKind.EraseObject: _erase_object,
}


def apply_spec(spec: TransformSpec, frame: DepthFrame, rng: Rng) -> DepthFrame:
    """Apply one transform choice; draws the activation uniform first."""
    u = rng.random()
    if u >= spec.probability:
        return frame
    depth = frame.depth2d()
    mask = frame.mask2d()
    out_depth, out_mask = _KERNELS[spec.kind](depth, mask, spec.magnitude, rng)
    return DepthFrame(frame.width, frame.height, out_depth, out_mask)


def apply_sequence(seq: AugmentationSequence, frame: DepthFrame, rng: Rng) -> DepthFrame:
    """Fold apply_spec left to right; each spec consumes draws in list order."""
    for spec in seq.specs:
        frame = apply_spec(spec, frame, rng)
    return frame

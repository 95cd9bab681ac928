"""Landmark-driven face alignment.

Six facial points (two corners per eye plus the mouth corners) are fitted to
a canonical template with a least-squares similarity transform (uniform
scale, rotation, translation; reflections are never produced), and the face
is warped into template space with an inverse-mapped bilinear warp.

Landmark coordinates are continuous pixel positions where integer
coordinates fall on pixel centers; ``x`` grows rightwards, ``y`` downwards.
A positive rotation turns from the +x axis towards +y (clockwise on screen).

Annotation file format (UTF-8 text, one record per line)::

    relative/image/path,x1,y1,x2,y2,x3,y3,x4,y4,x5,y5,x6,y6

with the points in the order left_eye_outer, left_eye_inner,
right_eye_inner, right_eye_outer, mouth_left, mouth_right. Lines starting
with ``#`` are comments; blank lines are ignored.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .imaging import require_image, sample_bilinear

logger = logging.getLogger(__name__)

POINT_NAMES = (
    "left_eye_outer",
    "left_eye_inner",
    "right_eye_inner",
    "right_eye_outer",
    "mouth_left",
    "mouth_right",
)

# Smallest-to-largest scatter eigenvalue ratio below which the landmark
# configuration is treated as collinear.
_SINGULAR_RATIO = 1e-9


class LandmarkParseError(ValueError):
    """Raised for malformed or duplicated annotation records."""


class SingularLandmarksError(ValueError):
    """Raised when landmarks are coincident or collinear."""


@dataclass(frozen=True)
class LandmarkSet:
    """Six named facial points, each an (x, y) pixel position."""

    left_eye_outer: tuple[float, float]
    left_eye_inner: tuple[float, float]
    right_eye_inner: tuple[float, float]
    right_eye_outer: tuple[float, float]
    mouth_left: tuple[float, float]
    mouth_right: tuple[float, float]

    def as_array(self) -> np.ndarray:
        """Points as a (6, 2) float array in canonical order."""
        return np.array([getattr(self, name) for name in POINT_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, points: np.ndarray) -> "LandmarkSet":
        arr = np.asarray(points, dtype=np.float64)
        if arr.shape != (6, 2):
            raise ValueError(f"expected (6, 2) points, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("landmark coordinates must be finite")
        return cls(*(tuple(p) for p in arr))

    def eye_line_above_mouth(self) -> bool:
        arr = self.as_array()
        return float(arr[:4, 1].max()) < float(arr[4:, 1].min())


# Canonical 224x224 alignment target: eye line at y=88 symmetric about
# x=112, mouth corners at y=168.
CANONICAL_TEMPLATE = LandmarkSet(
    left_eye_outer=(62.0, 88.0),
    left_eye_inner=(90.0, 88.0),
    right_eye_inner=(134.0, 88.0),
    right_eye_outer=(162.0, 88.0),
    mouth_left=(78.0, 168.0),
    mouth_right=(146.0, 168.0),
)


@dataclass(frozen=True)
class SimilarityTransform:
    """Uniform scale + rotation + translation in image coordinates."""

    scale: float
    rotation: float
    tx: float
    ty: float

    def __post_init__(self) -> None:
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        for v in (self.rotation, self.tx, self.ty):
            if not math.isfinite(v):
                raise ValueError("transform parameters must be finite")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(scale=1.0, rotation=0.0, tx=0.0, ty=0.0)

    def linear(self) -> np.ndarray:
        """The 2x2 rotation-scale part."""
        c = self.scale * math.cos(self.rotation)
        s = self.scale * math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """The 2x3 affine matrix mapping source to destination points."""
        m = np.empty((2, 3))
        m[:, :2] = self.linear()
        m[:, 2] = (self.tx, self.ty)
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) point array."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear().T + np.array([self.tx, self.ty])

    def inverse(self) -> "SimilarityTransform":
        inv_linear = self.linear().T / (self.scale * self.scale)
        t = -inv_linear @ np.array([self.tx, self.ty])
        return SimilarityTransform(
            scale=1.0 / self.scale, rotation=-self.rotation, tx=float(t[0]), ty=float(t[1])
        )


def _points_of(landmarks: LandmarkSet | np.ndarray) -> np.ndarray:
    if isinstance(landmarks, LandmarkSet):
        return landmarks.as_array()
    arr = np.asarray(landmarks, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ValueError(f"expected an (N>=2, 2) point array, got shape {arr.shape}")
    return arr


def _check_nondegenerate(centered: np.ndarray) -> None:
    scatter = centered.T @ centered
    eigvals = np.linalg.eigvalsh(scatter)
    if eigvals[1] <= 0 or eigvals[0] <= _SINGULAR_RATIO * eigvals[1]:
        raise SingularLandmarksError("landmarks are coincident or collinear; cannot fit a similarity")


def estimate_similarity(
    src: LandmarkSet | np.ndarray, dst: LandmarkSet | np.ndarray
) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``src`` points onto ``dst``.

    Closed-form solution of ``min sum |s R p_i + t - q_i|^2`` over uniform
    scale, rotation and translation (no reflection). Raises
    :class:`SingularLandmarksError` for coincident or collinear sources.
    """
    p = _points_of(src)
    q = _points_of(dst)
    if p.shape != q.shape:
        raise ValueError(f"point sets differ in shape: {p.shape} vs {q.shape}")
    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    pc = p - p_mean
    qc = q - q_mean
    _check_nondegenerate(pc)
    denom = float((pc * pc).sum())
    a = float((pc * qc).sum()) / denom
    b = float((pc[:, 0] * qc[:, 1] - pc[:, 1] * qc[:, 0]).sum()) / denom
    scale = math.hypot(a, b)
    if scale <= 0:
        raise SingularLandmarksError("degenerate fit: zero scale")
    rotation = math.atan2(b, a)
    linear = np.array([[a, -b], [b, a]])
    t = q_mean - linear @ p_mean
    return SimilarityTransform(scale=scale, rotation=rotation, tx=float(t[0]), ty=float(t[1]))


def alignment_residual(t: SimilarityTransform, src: LandmarkSet | np.ndarray,
                       dst: LandmarkSet | np.ndarray) -> float:
    """Sum of squared distances from transformed src points to dst points."""
    diff = t.apply(_points_of(src)) - _points_of(dst)
    return float((diff * diff).sum())


def warp_image(img: np.ndarray, t: SimilarityTransform, out_w: int, out_h: int) -> np.ndarray:
    """Warp into the destination frame of ``t`` (inverse-mapped bilinear).

    Output pixel centers are pulled back through ``t`` and sampled with
    bilinear interpolation; samples outside the source replicate the edge.
    """
    arr = require_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    inv = t.inverse()
    grid_x, grid_y = np.meshgrid(
        np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64)
    )
    coords = np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)
    src = inv.apply(coords)
    return sample_bilinear(arr, src[:, 0].reshape(out_h, out_w), src[:, 1].reshape(out_h, out_w))


def align_face(
    img: np.ndarray,
    landmarks: LandmarkSet,
    template: LandmarkSet = CANONICAL_TEMPLATE,
    out_size: tuple[int, int] = (224, 224),
) -> np.ndarray:
    """Fit landmarks to the template and warp the face into template space."""
    t = estimate_similarity(landmarks, template)
    out_w, out_h = out_size
    return warp_image(img, t, out_w, out_h)


def parse_landmark_file(text: str) -> dict[str, LandmarkSet]:
    """Parse annotation text into a path -> LandmarkSet mapping.

    Raises :class:`LandmarkParseError` naming the offending line for wrong
    field counts, non-numeric values, or duplicated image paths.
    """
    records: dict[str, LandmarkSet] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 13:
            raise LandmarkParseError(
                f"line {lineno}: expected image path plus 12 coordinates, got {len(fields)} fields"
            )
        path = fields[0]
        if not path:
            raise LandmarkParseError(f"line {lineno}: empty image path")
        if path in records:
            raise LandmarkParseError(f"line {lineno}: duplicate image path {path!r}")
        try:
            values = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise LandmarkParseError(f"line {lineno}: non-numeric coordinate ({exc})") from None
        lms = LandmarkSet.from_array(np.array(values).reshape(6, 2))
        if not lms.eye_line_above_mouth():
            logger.warning("landmarks for %s: eye points do not lie above mouth points", path)
        records[path] = lms
    return records


def format_landmark_file(records: dict[str, LandmarkSet]) -> str:
    """Serialize a path -> LandmarkSet mapping in the annotation file format."""
    lines = ["# image_path,x1,y1,...,x6,y6 (eye corners then mouth corners)"]
    for path, lms in records.items():
        coords = ",".join(f"{v:.3f}" for v in lms.as_array().ravel())
        lines.append(f"{path},{coords}")
    return "\n".join(lines) + "\n"

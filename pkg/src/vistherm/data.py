"""Dataset manifests, protocol splits, and the synthetic paired-face corpus.

A manifest lists subject- and modality-labelled image records plus the
visible/thermal pairing between them. Directory layout for all dataset
kinds::

    <root>/<subject_id>/<visible|thermal>/<variation_tag>.<png|jpg|jpeg|bmp>

Images pair up when subject and variation tag match across the two
modalities. An ``annotations.csv`` file at the root (see
:mod:`vistherm.alignment`) supplies landmarks, keyed by the image path
relative to the root. The ``eurecom`` kind additionally drops the variation
tags that cannot be annotated (lights off, eye-area and mouth occlusions,
30-degree poses); other kinds differ only in protocol bookkeeping.

Manifest CSV serialization: header ``subject_id,modality,variation_tag,image_path``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

import numpy as np

from . import alignment, imaging
from .alignment import LandmarkSet, SimilarityTransform

logger = logging.getLogger(__name__)

MODALITIES = ("visible", "thermal")
DATASET_KINDS = ("carl", "undx1", "eurecom", "generic")
GALLERY_POLICIES = ("one_per_subject", "two_per_subject", "all_per_subject")

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# Canonical variation inventory for the eurecom layout. Seven tags are
# excluded at load time because their landmarks cannot be annotated,
# leaving twelve usable variations per subject per modality.
EURECOM_VARIATIONS = (
    "neutral", "happy", "angry", "sad", "surprised",
    "ambient", "lights_off", "fluorescent", "light_left", "light_right",
    "eyeglasses", "sunglasses", "mouth_occluded", "eye_occluded", "cap",
    "pose_up", "pose_down", "pose_left_30", "pose_right_30",
)
EURECOM_EXCLUDED = frozenset({
    "lights_off", "eyeglasses", "sunglasses", "mouth_occluded",
    "eye_occluded", "pose_left_30", "pose_right_30",
})


class ManifestError(ValueError):
    """Raised for malformed manifests or unusable dataset layouts."""


@dataclass(frozen=True)
class Sample:
    """One image record: who, which spectrum, which variation, where."""

    subject_id: str
    modality: str
    variation_tag: str
    image_path: str
    landmarks: LandmarkSet | None = None

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ManifestError(f"unknown modality {self.modality!r} for {self.image_path!r}")


@dataclass
class DatasetManifest:
    """Samples plus the visible/thermal pairing (index pairs into samples)."""

    name: str
    samples: list[Sample]
    pairing: list[tuple[int, int]] = field(default_factory=list)

    def validate(self) -> "DatasetManifest":
        paths = [s.image_path for s in self.samples]
        if len(set(paths)) != len(paths):
            raise ManifestError("duplicate image paths in manifest")
        used: set[int] = set()
        for vi, ti in self.pairing:
            v, t = self.samples[vi], self.samples[ti]
            if v.modality != "visible" or t.modality != "thermal":
                raise ManifestError(f"pairing ({vi}, {ti}) is not (visible, thermal)")
            if v.subject_id != t.subject_id or v.variation_tag != t.variation_tag:
                raise ManifestError(
                    f"pairing ({vi}, {ti}) mixes subject or variation: "
                    f"{v.subject_id}/{v.variation_tag} vs {t.subject_id}/{t.variation_tag}"
                )
            if vi in used or ti in used:
                raise ManifestError(f"sample referenced by more than one pairing: ({vi}, {ti})")
            used.update((vi, ti))
        return self

    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})

    def of_modality(self, modality: str) -> list[Sample]:
        return [s for s in self.samples if s.modality == modality]

    def subset(self, subjects: set[str], name: str | None = None) -> "DatasetManifest":
        """Manifest restricted to the given subjects, pairings remapped."""
        keep = [i for i, s in enumerate(self.samples) if s.subject_id in subjects]
        index_map = {old: new for new, old in enumerate(keep)}
        samples = [self.samples[i] for i in keep]
        pairing = [
            (index_map[vi], index_map[ti])
            for vi, ti in self.pairing
            if vi in index_map and ti in index_map
        ]
        return DatasetManifest(name=name or self.name, samples=samples, pairing=pairing)

    def paired_samples(self) -> list[tuple[Sample, Sample]]:
        return [(self.samples[vi], self.samples[ti]) for vi, ti in self.pairing]


@dataclass(frozen=True)
class SplitConfig:
    """Subject-disjoint train/test split: how many train subjects, which seed."""

    n_train_subjects: int
    seed: int


@dataclass(frozen=True)
class GalleryConfig:
    """How many visible images per subject to enrol in the gallery."""

    policy: str

    def __post_init__(self) -> None:
        if self.policy not in GALLERY_POLICIES:
            raise ManifestError(f"unknown gallery policy {self.policy!r}")


def load_manifest(root: str | Path, dataset_kind: str = "generic") -> DatasetManifest:
    """Discover visible/thermal pairs under ``root`` for the given kind.

    Unpaired images are reported and skipped. Landmarks are attached from
    ``<root>/annotations.csv`` when present.
    """
    if dataset_kind not in DATASET_KINDS:
        raise ManifestError(f"unknown dataset kind {dataset_kind!r}")
    rootp = Path(root)
    if not rootp.is_dir():
        raise ManifestError(f"dataset root {root!s} is not a directory")

    annotations: dict[str, LandmarkSet] = {}
    ann_path = rootp / "annotations.csv"
    if ann_path.is_file():
        annotations = alignment.parse_landmark_file(ann_path.read_text(encoding="utf-8"))

    samples: list[Sample] = []
    for subject_dir in sorted(p for p in rootp.iterdir() if p.is_dir()):
        for modality in MODALITIES:
            mod_dir = subject_dir / modality
            if not mod_dir.is_dir():
                continue
            for img_path in sorted(mod_dir.iterdir()):
                if img_path.suffix.lower() not in _IMAGE_SUFFIXES:
                    continue
                tag = img_path.stem
                if dataset_kind == "eurecom" and tag in EURECOM_EXCLUDED:
                    continue
                rel = img_path.relative_to(rootp).as_posix()
                samples.append(
                    Sample(
                        subject_id=subject_dir.name,
                        modality=modality,
                        variation_tag=tag,
                        image_path=rel,
                        landmarks=annotations.get(rel),
                    )
                )
    if not samples:
        raise ManifestError(f"no samples found under {root!s}")

    by_key: dict[tuple[str, str, str], int] = {
        (s.subject_id, s.variation_tag, s.modality): i for i, s in enumerate(samples)
    }
    pairing: list[tuple[int, int]] = []
    paired: set[int] = set()
    for i, s in enumerate(samples):
        if s.modality != "visible":
            continue
        j = by_key.get((s.subject_id, s.variation_tag, "thermal"))
        if j is None:
            logger.warning("unpaired visible image skipped: %s", s.image_path)
            continue
        pairing.append((i, j))
        paired.update((i, j))
    for i, s in enumerate(samples):
        if i not in paired:
            if s.modality == "thermal":
                logger.warning("unpaired thermal image skipped: %s", s.image_path)
    kept = sorted(paired)
    index_map = {old: new for new, old in enumerate(kept)}
    manifest = DatasetManifest(
        name=dataset_kind if dataset_kind != "generic" else rootp.name,
        samples=[samples[i] for i in kept],
        pairing=[(index_map[v], index_map[t]) for v, t in pairing],
    )
    return manifest.validate()


def save_manifest_csv(manifest: DatasetManifest, path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject_id", "modality", "variation_tag", "image_path"])
    for s in manifest.samples:
        writer.writerow([s.subject_id, s.modality, s.variation_tag, s.image_path])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_manifest_csv(path: str | Path, name: str = "manifest") -> DatasetManifest:
    """Load a manifest CSV and re-derive the pairing from subject/tag matches."""
    samples: list[Sample] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            samples.append(
                Sample(
                    subject_id=row["subject_id"],
                    modality=row["modality"],
                    variation_tag=row["variation_tag"],
                    image_path=row["image_path"],
                )
            )
    by_key = {(s.subject_id, s.variation_tag, s.modality): i for i, s in enumerate(samples)}
    pairing = []
    for i, s in enumerate(samples):
        if s.modality == "visible":
            j = by_key.get((s.subject_id, s.variation_tag, "thermal"))
            if j is not None:
                pairing.append((i, j))
    return DatasetManifest(name=name, samples=samples, pairing=pairing).validate()


def split_subjects(
    manifest: DatasetManifest, cfg: SplitConfig
) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic subject-disjoint split; all of a subject stays on one side."""
    subjects = manifest.subjects()
    if not 0 < cfg.n_train_subjects < len(subjects):
        raise ManifestError(
            f"n_train_subjects must be in (0, {len(subjects)}), got {cfg.n_train_subjects}"
        )
    order = np.random.default_rng(cfg.seed).permutation(len(subjects))
    train_set = {subjects[i] for i in order[: cfg.n_train_subjects]}
    test_set = set(subjects) - train_set
    return (
        manifest.subset(train_set, name=f"{manifest.name}-train"),
        manifest.subset(test_set, name=f"{manifest.name}-test"),
    )


def build_gallery(
    test_manifest: DatasetManifest, cfg: GalleryConfig, seed: int
) -> list[Sample]:
    """Visible gallery under the given enrolment policy (deterministic in seed)."""
    visible = test_manifest.of_modality("visible")
    if not visible:
        raise ManifestError("test manifest has no visible images")
    if cfg.policy == "all_per_subject":
        return sorted(visible, key=lambda s: s.image_path)
    count = 1 if cfg.policy == "one_per_subject" else 2
    rng = np.random.default_rng(seed)
    gallery: list[Sample] = []
    for subject in test_manifest.subjects():
        candidates = sorted(
            (s for s in visible if s.subject_id == subject), key=lambda s: s.image_path
        )
        if len(candidates) < count:
            raise ManifestError(
                f"subject {subject!r} has {len(candidates)} visible images; "
                f"policy {cfg.policy!r} needs {count}"
            )
        chosen = rng.choice(len(candidates), size=count, replace=False)
        gallery.extend(candidates[i] for i in sorted(chosen))
    return gallery


def build_probes(test_manifest: DatasetManifest) -> list[Sample]:
    """Every thermal image of every test subject, in deterministic order."""
    probes = sorted(test_manifest.of_modality("thermal"), key=lambda s: s.image_path)
    if not probes:
        raise ManifestError("test manifest has no thermal images")
    return probes


def split_validation_pairs(
    manifest: DatasetManifest, fraction: float = 0.1, seed: int = 0
) -> tuple[list[int], list[int]]:
    """Hold out a subject-stratified fraction of pairs for validation.

    Returns (train, validation) index lists into ``manifest.pairing``.
    Subjects contributing a single pair stay entirely in training; if that
    leaves validation empty, the last pair overall is held out.
    """
    if not manifest.pairing:
        raise ManifestError("manifest has no pairs to split")
    if not 0.0 < fraction < 1.0:
        raise ManifestError(f"validation fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    by_subject: dict[str, list[int]] = {}
    for i, (vi, _) in enumerate(manifest.pairing):
        by_subject.setdefault(manifest.samples[vi].subject_id, []).append(i)
    val: list[int] = []
    for subject in sorted(by_subject):
        indices = by_subject[subject]
        if len(indices) < 2:
            continue
        n_val = max(1, round(fraction * len(indices)))
        chosen = rng.choice(len(indices), size=n_val, replace=False)
        val.extend(indices[i] for i in sorted(chosen))
    if not val and len(manifest.pairing) > 1:
        val = [len(manifest.pairing) - 1]
    if not val:
        raise ManifestError("cannot hold out validation pairs from a single-pair manifest")
    val_set = set(val)
    train = [i for i in range(len(manifest.pairing)) if i not in val_set]
    return train, sorted(val)


# ---------------------------------------------------------------------------
# Synthetic paired corpus
# ---------------------------------------------------------------------------


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _ellipse_mask(
    x: np.ndarray, y: np.ndarray, cx: float, cy: float, rx: float, ry: float, soft: float = 0.15
) -> np.ndarray:
    """Anti-aliased ellipse: 1 inside, smooth falloff of width ``soft`` (in d-units)."""
    d = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    return _smoothstep((1.0 - d) / soft)


def _paint(img: np.ndarray, mask: np.ndarray, color: tuple[float, float, float]) -> None:
    for c in range(3):
        img[c] = img[c] * (1.0 - mask) + color[c] * mask


class _FaceModel:
    """Per-subject appearance parameters and the canonical renderer."""

    def __init__(self, rng: np.random.Generator, size: int):
        s = float(size)
        u = rng.uniform
        self.size = size
        self.cx = s * u(0.49, 0.51)
        self.cy = s * u(0.51, 0.53)
        self.rx = s * u(0.30, 0.36)
        self.ry = s * u(0.40, 0.46)
        self.eye_y = self.cy - self.ry * u(0.25, 0.35)
        self.eye_dx = self.rx * u(0.42, 0.55)
        self.eye_rx = self.rx * u(0.13, 0.18)
        self.eye_ry = self.eye_rx * u(0.45, 0.65)
        self.iris_r = self.eye_ry * u(0.75, 1.0)
        self.iris_color = (u(0.05, 0.2), u(0.1, 0.3), u(0.1, 0.45))
        self.brow_dy = self.eye_ry + s * u(0.025, 0.05)
        self.brow_hw = self.eye_rx * u(1.0, 1.35)
        self.brow_th = s * u(0.008, 0.016)
        self.brow_color = tuple(u(0.08, 0.3) * w for w in (1.0, 0.8, 0.65))
        self.nose_w = s * u(0.020, 0.045)
        self.nose_bot = self.cy + self.ry * u(0.05, 0.18)
        self.nose_shade = u(0.05, 0.15)
        self.mouth_y = self.cy + self.ry * u(0.42, 0.52)
        self.mouth_hw = self.rx * u(0.38, 0.52)
        self.mouth_th = s * u(0.012, 0.022)
        self.mouth_curve = s * u(-0.02, 0.02)
        self.mouth_color = (u(0.40, 0.62), u(0.18, 0.3), u(0.18, 0.3))
        r = u(0.55, 0.82)
        g = r * u(0.78, 0.92)
        self.skin = (r, g, g * u(0.75, 0.92))
        self.gratings = [
            (u(0.04, 0.09), u(0.02, 0.08), u(0.0, math.pi), u(0.0, 2 * math.pi))
            for _ in range(2)
        ]
        self.spots = [
            (u(0.0, 2 * math.pi), u(0.25, 0.85), s * u(0.02, 0.05), u(-0.13, 0.13))
            for _ in range(3)
        ]

    def landmarks(self) -> LandmarkSet:
        corner_y = self.mouth_y + self.mouth_curve
        return LandmarkSet(
            left_eye_outer=(self.cx - self.eye_dx - self.eye_rx, self.eye_y),
            left_eye_inner=(self.cx - self.eye_dx + self.eye_rx, self.eye_y),
            right_eye_inner=(self.cx + self.eye_dx - self.eye_rx, self.eye_y),
            right_eye_outer=(self.cx + self.eye_dx + self.eye_rx, self.eye_y),
            mouth_left=(self.cx - self.mouth_hw, corner_y),
            mouth_right=(self.cx + self.mouth_hw, corner_y),
        )

    def render(self) -> np.ndarray:
        s = self.size
        x, y = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64))
        img = np.empty((3, s, s))
        grad = 0.10 * y / s
        for c, base in enumerate((0.20, 0.21, 0.24)):
            img[c] = base + grad

        face = _ellipse_mask(x, y, self.cx, self.cy, self.rx, self.ry, soft=0.08)
        d2 = ((x - self.cx) / self.rx) ** 2 + ((y - self.cy) / self.ry) ** 2
        shade = 1.0 - 0.20 * np.clip(d2, 0.0, 1.0)
        texture = np.zeros((s, s))
        for amp, freq, theta, phase in self.gratings:
            fx = freq * math.cos(theta)
            fy = freq * math.sin(theta)
            texture += amp * np.sin(2 * math.pi * (fx * x + fy * y) + phase)
        for angle, rad, r_spot, amp in self.spots:
            sx = self.cx + self.rx * rad * math.cos(angle)
            sy = self.cy + self.ry * rad * math.sin(angle)
            texture += amp * np.exp(-(((x - sx) ** 2 + (y - sy) ** 2) / (2 * r_spot**2)))
        for c in range(3):
            skin_plane = np.clip(self.skin[c] * shade + texture, 0.0, 1.0)
            img[c] = img[c] * (1.0 - face) + skin_plane * face

        for side in (-1.0, 1.0):
            ex = self.cx + side * self.eye_dx
            brow = _ellipse_mask(x, y, ex, self.eye_y - self.brow_dy,
                                 self.brow_hw, self.brow_th, soft=0.35)
            _paint(img, brow, self.brow_color)
            sclera = _ellipse_mask(x, y, ex, self.eye_y, self.eye_rx, self.eye_ry, soft=0.2)
            _paint(img, sclera, (0.88, 0.87, 0.84))
            iris = _ellipse_mask(x, y, ex, self.eye_y, self.iris_r, self.iris_r, soft=0.3)
            _paint(img, iris, self.iris_color)
            nostril = _ellipse_mask(
                x, y, self.cx + side * self.nose_w, self.nose_bot,
                0.35 * self.nose_w + 1.5, 0.25 * self.nose_w + 1.2, soft=0.5,
            )
            _paint(img, nostril, (0.15, 0.10, 0.10))

        nose_top = self.eye_y + 0.5 * self.eye_ry
        ridge = _smoothstep((y - nose_top) / 4.0) * _smoothstep((self.nose_bot - y) / 4.0)
        ridge *= _smoothstep(1.0 - np.abs(x - self.cx) / self.nose_w)
        img += self.nose_shade * ridge * face

        mouth_line = self.mouth_y + self.mouth_curve * ((x - self.cx) / self.mouth_hw) ** 2
        mouth = _smoothstep(1.0 - np.abs(y - mouth_line) / self.mouth_th)
        mouth *= _smoothstep((self.mouth_hw - np.abs(x - self.cx)) / (0.2 * self.mouth_hw))
        _paint(img, mouth, self.mouth_color)

        return np.clip(img, 0.0, 1.0)


def thermal_signature(visible: np.ndarray) -> np.ndarray:
    """Deterministic pseudo-thermal counterpart of a visible image.

    Fixed monotone nonlinear remap of luminance (bright skin maps hot,
    dark background cold) followed by a mild blur; the same map for every
    subject so the visible-to-thermal relation is learnable.
    """
    lum = imaging.to_grayscale(visible)
    warm = np.clip(0.12 + 0.82 * (1.0 - lum) ** 1.4, 0.0, 1.0)
    return np.clip(imaging.gaussian_blur(warm, 1.0), 0.0, 1.0)


def _jitter_transform(rng: np.random.Generator, size: int) -> SimilarityTransform:
    angle = math.radians(rng.uniform(-4.0, 4.0))
    scale = rng.uniform(0.96, 1.04)
    shift = rng.uniform(-4.0, 4.0, size=2)
    center = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    c, s = scale * math.cos(angle), scale * math.sin(angle)
    linear = np.array([[c, -s], [s, c]])
    t = center + shift - linear @ center
    return SimilarityTransform(scale=scale, rotation=angle, tx=float(t[0]), ty=float(t[1]))


def generate_synthetic(
    n_subjects: int,
    images_per_subject: int,
    seed: int,
    size: int = 224,
    root: str | Path = "synthetic",
) -> DatasetManifest:
    """Write a reproducible synthetic paired visible/thermal corpus to disk.

    Each subject gets a procedurally generated face with a distinct
    geometric and textural signature; each image adds nuisance jitter
    (pose, brightness, pixel noise). The thermal counterpart is
    :func:`thermal_signature` of the jittered visible image. Landmark
    annotations and a manifest CSV are written alongside the images.
    Identical arguments yield a bitwise-identical tree.
    """
    if n_subjects < 1 or images_per_subject < 1:
        raise ValueError("n_subjects and images_per_subject must be >= 1")
    rootp = Path(root)
    rootp.mkdir(parents=True, exist_ok=True)

    subject_seeds = np.random.SeedSequence(seed).spawn(n_subjects)
    samples: list[Sample] = []
    pairing: list[tuple[int, int]] = []
    annotations: dict[str, LandmarkSet] = {}
    for si in range(n_subjects):
        subject_id = f"s{si:03d}"
        streams = subject_seeds[si].spawn(images_per_subject + 1)
        face = _FaceModel(np.random.default_rng(streams[0]), size)
        canonical = face.render()
        canonical_lms = face.landmarks().as_array()
        for ii in range(images_per_subject):
            rng = np.random.default_rng(streams[ii + 1])
            tag = f"v{ii:02d}"
            jitter = _jitter_transform(rng, size)
            vis = alignment.warp_image(canonical, jitter, size, size)
            gain = rng.uniform(0.90, 1.10)
            offset = rng.uniform(-0.04, 0.04)
            vis = np.clip(vis * gain + offset, 0.0, 1.0)
            vis = np.clip(vis + rng.normal(0.0, 0.008, size=vis.shape), 0.0, 1.0)
            th = thermal_signature(vis)
            lms = LandmarkSet.from_array(jitter.apply(canonical_lms))

            vis_rel = f"{subject_id}/visible/{tag}.png"
            th_rel = f"{subject_id}/thermal/{tag}.png"
            imaging.save_image(vis, rootp / vis_rel)
            imaging.save_image(th, rootp / th_rel)
            annotations[vis_rel] = lms
            annotations[th_rel] = lms
            vi = len(samples)
            samples.append(Sample(subject_id, "visible", tag, vis_rel, landmarks=lms))
            samples.append(Sample(subject_id, "thermal", tag, th_rel, landmarks=lms))
            pairing.append((vi, vi + 1))

    (rootp / "annotations.csv").write_text(
        alignment.format_landmark_file(annotations), encoding="utf-8"
    )
    manifest = DatasetManifest(name="synthetic", samples=samples, pairing=pairing).validate()
    save_manifest_csv(manifest, rootp / "manifest.csv")
    return manifest

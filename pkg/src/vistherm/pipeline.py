"""Preprocessing pipeline and on-disk image cache.

Every image runs through the same chain, in order: 3x3 mean filter,
optional difference-of-Gaussians enhancement, landmark alignment, then the
resolution degradation (downsample to 112, upsample back to 224). The cache
under ``<cache_dir>/preprocessed`` mirrors the dataset tree and is keyed by
content hash plus the settings fingerprint, so reruns with unchanged inputs
skip all work.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import alignment, imaging
from .data import DatasetManifest, Sample

logger = logging.getLogger(__name__)

_INDEX_NAME = "index.json"


class PipelineError(RuntimeError):
    """Raised when the preprocessing pipeline cannot run as configured."""


@dataclass(frozen=True)
class PreprocessSettings:
    """Which preprocessing steps run, and their parameters."""

    mean_filter: bool = True
    mean_window: int = 3
    dog: bool = False
    dog_sigma_inner: float = 1.0
    dog_sigma_outer: float = 2.0
    align: bool = True
    low_res: int = 112
    out_size: int = 224

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("ascii")).hexdigest()


def preprocess_image(
    img: np.ndarray,
    settings: PreprocessSettings,
    landmarks: alignment.LandmarkSet | None = None,
    template: alignment.LandmarkSet = alignment.CANONICAL_TEMPLATE,
) -> np.ndarray:
    """Apply the configured chain to one image; output is out_size x out_size."""
    arr = imaging.require_image(img)
    if settings.mean_filter:
        arr = imaging.mean_filter(arr, settings.mean_window)
    if settings.dog:
        arr = imaging.to_grayscale(arr)
        arr = imaging.dog_filter(arr, settings.dog_sigma_inner, settings.dog_sigma_outer)
    if settings.align:
        if landmarks is None:
            raise PipelineError("alignment requested but no landmarks available")
        arr = alignment.align_face(
            arr, landmarks, template, out_size=(settings.out_size, settings.out_size)
        )
    arr = imaging.degrade_resolution(arr, settings.low_res, settings.out_size)
    return np.clip(arr, 0.0, 1.0)


@dataclass
class PreprocessReport:
    """What a cache run did: per-image outcomes and failures."""

    processed: int = 0
    skipped: int = 0
    failures: dict[str, str] = field(default_factory=dict)


class PreprocessCache:
    """Mirror of the dataset tree holding preprocessed images.

    ``index.json`` maps each source-relative path to its cache key
    (sha256 over content hash + settings fingerprint); entries whose key
    matches and whose file exists are reused.
    """

    def __init__(self, cache_dir: str | Path):
        self.root = Path(cache_dir) / "preprocessed"
        self.index_path = self.root / _INDEX_NAME
        self.index: dict[str, str] = {}
        if self.index_path.is_file():
            self.index = json.loads(self.index_path.read_text(encoding="utf-8"))

    def path_for(self, rel_path: str) -> Path:
        return (self.root / rel_path).with_suffix(".png")

    def _key(self, source: Path, settings: PreprocessSettings) -> str:
        digest = hashlib.sha256()
        digest.update(settings.fingerprint().encode("ascii"))
        digest.update(source.read_bytes())
        return digest.hexdigest()

    def is_fresh(self, rel_path: str, source: Path, settings: PreprocessSettings) -> bool:
        return (
            self.index.get(rel_path) == self._key(source, settings)
            and self.path_for(rel_path).is_file()
        )

    def store(self, rel_path: str, source: Path, settings: PreprocessSettings,
              image: np.ndarray) -> None:
        imaging.save_image(image, self.path_for(rel_path))
        self.index[rel_path] = self._key(source, settings)

    def flush(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(self.index, sort_keys=True, indent=1)
        self.index_path.write_text(payload, encoding="utf-8")

    def load(self, rel_path: str) -> np.ndarray:
        path = self.path_for(rel_path)
        if not path.is_file():
            raise PipelineError(f"preprocessed image missing from cache: {rel_path}")
        return imaging.load_image(path)


def preprocess_manifest(
    manifest: DatasetManifest,
    dataset_root: str | Path,
    cache_dir: str | Path,
    settings: PreprocessSettings,
    workers: int = 1,
) -> PreprocessReport:
    """Preprocess every manifest image into the cache.

    Missing landmarks with alignment enabled abort up front, listing the
    offending images. Unreadable or corrupt files are recorded per-file and
    the run continues.
    """
    root = Path(dataset_root)
    cache = PreprocessCache(cache_dir)
    if settings.align:
        missing = [s.image_path for s in manifest.samples if s.landmarks is None]
        if missing:
            shown = ", ".join(missing[:10]) + ("..." if len(missing) > 10 else "")
            raise PipelineError(
                f"alignment enabled but {len(missing)} images have no landmarks: {shown}"
            )

    report = PreprocessReport()
    todo: list[Sample] = []
    for sample in manifest.samples:
        source = root / sample.image_path
        try:
            fresh = cache.is_fresh(sample.image_path, source, settings)
        except OSError as exc:
            report.failures[sample.image_path] = str(exc)
            continue
        if fresh:
            report.skipped += 1
        else:
            todo.append(sample)

    def process(sample: Sample) -> tuple[Sample, np.ndarray | None, str | None]:
        try:
            img = imaging.load_image(root / sample.image_path)
            out = preprocess_image(img, settings, landmarks=sample.landmarks)
            return sample, out, None
        except PipelineError:
            raise
        except Exception as exc:  # propagate per-file problems into the summary
            return sample, None, f"{type(exc).__name__}: {exc}"

    if workers > 1 and todo:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(process, todo))
    else:
        outcomes = [process(s) for s in todo]

    for sample, image, error in outcomes:
        if error is not None:
            logger.warning("preprocess failed for %s: %s", sample.image_path, error)
            report.failures[sample.image_path] = error
            continue
        cache.store(sample.image_path, root / sample.image_path, settings, image)
        report.processed += 1
    cache.flush()
    return report


class PreparedDataset:
    """A manifest together with its preprocessed image cache."""

    def __init__(self, manifest: DatasetManifest, cache_dir: str | Path):
        self.manifest = manifest
        self.cache = PreprocessCache(cache_dir)

    def load_samples(self, samples: list[Sample], channels: int) -> np.ndarray:
        """Stack preprocessed images as float32 (N, channels, H, W)."""
        if not samples:
            raise ValueError("no samples to load")
        arrays = [
            imaging.ensure_channels(self.cache.load(s.image_path), channels) for s in samples
        ]
        return np.stack(arrays).astype(np.float32)

    def pair_arrays(
        self,
        manifest: DatasetManifest,
        input_channels: int,
        pair_indices: list[int] | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Paired (visible, thermal) arrays for training; thermal collapses to 1 channel."""
        pairs = manifest.pairing if pair_indices is None else [
            manifest.pairing[i] for i in pair_indices
        ]
        if not pairs:
            raise ValueError("no pairs to load")
        visible = self.load_samples([manifest.samples[v] for v, _ in pairs], input_channels)
        thermal = self.load_samples([manifest.samples[t] for _, t in pairs], 1)
        return visible, thermal

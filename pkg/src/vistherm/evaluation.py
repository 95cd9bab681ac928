"""Closed-set identification: match thermal probes against a synthesized gallery.

Every visible gallery image is pushed through the trained network to obtain
its synthesized thermal counterpart; each (preprocessed) thermal probe is
then compared with those synthesized images by cosine similarity over
unit-normalized flattened pixels. A subject's score is the maximum over its
gallery entries; subjects are ranked by descending score with ties broken
by ascending subject id so runs are reproducible across platforms.

Reports come in three formats: a UTF-8 text table (rows = model or
preprocessing variants, columns = gallery policies), CSV with one row per
run per policy plus a mean row, and canonical JSON that round-trips through
:func:`parse_report_json`.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import GALLERY_POLICIES, Sample
from .model import VisibleToThermalNet, infer_batch

# Previously reported rank-1 accuracies (fractions) for the three public
# benchmarks, shown as comparison rows in emitted tables. Keys follow the
# (one, two, all) images-per-subject gallery policies.
REFERENCE_ROWS: dict[str, list[tuple[str, tuple[float, float, float]]]] = {
    "carl": [
        ("bilinear", (0.402, 0.458, 0.755)),
        ("bilinear, aligned", (0.42, 0.4875, 0.7725)),
        ("upconv", (0.41, 0.4975, 0.802)),
        ("upconv, aligned", (0.4375, 0.525, 0.825)),
        ("upconv + dog", (0.468, 0.585, 0.825)),
        ("upconv + dog, aligned", (0.48, 0.6025, 0.85)),
    ],
    "undx1": [
        ("bilinear", (0.42, 0.5025, 0.754)),
        ("upconv", (0.4925, 0.575, 0.82)),
        ("upconv + dog", (0.5875, 0.6525, 0.872)),
    ],
    "eurecom": [
        ("bilinear", (0.5041, 0.585, 0.80)),
        ("upconv", (0.5375, 0.6125, 0.8125)),
        ("upconv + dog", (0.5791, 0.70, 0.8833)),
    ],
}

_POLICY_HEADERS = {
    "one_per_subject": "1/subject",
    "two_per_subject": "2/subject",
    "all_per_subject": "all/subject",
}


@dataclass
class GalleryEntry:
    """One enrolled gallery image with its synthesized-thermal feature."""

    subject_id: str
    source_path: str
    synthesized: np.ndarray
    feature: np.ndarray


def unit_feature(image: np.ndarray) -> np.ndarray:
    """Flatten and L2-normalize; an all-zero image stays the zero vector."""
    flat = np.asarray(image, dtype=np.float64).ravel()
    norm = np.linalg.norm(flat)
    if norm == 0.0:
        return flat.copy()
    return flat / norm


def synthesize_gallery(
    model: VisibleToThermalNet, gallery: list[tuple[Sample, np.ndarray]]
) -> list[GalleryEntry]:
    """Run every visible gallery image through the network and featurize it."""
    if not gallery:
        raise ValueError("empty gallery")
    images = np.stack([img for _, img in gallery]).astype(np.float32)
    synthesized = infer_batch(model, images)
    return [
        GalleryEntry(
            subject_id=sample.subject_id,
            source_path=sample.image_path,
            synthesized=synthesized[i],
            feature=unit_feature(synthesized[i]),
        )
        for i, (sample, _) in enumerate(gallery)
    ]


def match_probe(
    probe: np.ndarray, gallery: list[GalleryEntry]
) -> list[tuple[str, float]]:
    """Rank gallery subjects against one probe.

    Cosine similarity between the unit-normalized flattened probe and each
    entry; per-subject score is the max over that subject's entries; ranked
    by descending score, ties by ascending subject id.
    """
    if not gallery:
        raise ValueError("empty gallery")
    probe_feature = unit_feature(probe)
    best: dict[str, float] = {}
    for entry in gallery:
        score = float(probe_feature @ entry.feature)
        if entry.subject_id not in best or score > best[entry.subject_id]:
            best[entry.subject_id] = score
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))


def rank_k_accuracy(
    rankings: list[list[tuple[str, float]]], truth: list[str], k: int
) -> float:
    """Fraction of probes whose true subject is within the top-k ranked subjects."""
    if not rankings:
        raise ValueError("no rankings given")
    if len(rankings) != len(truth):
        raise ValueError(f"{len(rankings)} rankings vs {len(truth)} truth labels")
    n_subjects = len(rankings[0])
    if not 1 <= k <= n_subjects:
        raise ValueError(f"rank {k} outside 1..{n_subjects}")
    hits = sum(
        1
        for ranking, subject in zip(rankings, truth)
        if subject in {sid for sid, _ in ranking[:k]}
    )
    return hits / len(rankings)


def cmc_curve(rankings: list[list[tuple[str, float]]], truth: list[str]) -> np.ndarray:
    """Rank-k accuracy for k = 1..S (non-decreasing; 1.0 once every probe matched)."""
    if not rankings:
        raise ValueError("no rankings given")
    n_subjects = len(rankings[0])
    counts = np.zeros(n_subjects)
    for ranking, subject in zip(rankings, truth):
        for position, (sid, _) in enumerate(ranking):
            if sid == subject:
                counts[position] += 1
                break
    return np.cumsum(counts) / len(rankings)


@dataclass
class RunRecord:
    """One experiment repetition: its seed and full CMC."""

    run_seed: int
    rank_accuracies: list[float]


@dataclass
class ExperimentResult:
    """Averaged identification accuracies for one variant under one policy."""

    dataset: str
    policy: str
    variant: str
    config_fingerprint: str
    runs: list[RunRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.policy not in GALLERY_POLICIES:
            raise ValueError(f"unknown gallery policy {self.policy!r}")

    def mean_rank_accuracies(self) -> list[float]:
        if not self.runs:
            return []
        stacked = np.array([r.rank_accuracies for r in self.runs])
        return [float(v) for v in stacked.mean(axis=0)]

    def mean_rank1(self) -> float:
        return self.mean_rank_accuracies()[0]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "policy": self.policy,
            "variant": self.variant,
            "config_fingerprint": self.config_fingerprint,
            "runs": [
                {"run_seed": r.run_seed, "rank_accuracies": r.rank_accuracies}
                for r in self.runs
            ],
            "mean_rank_accuracies": self.mean_rank_accuracies(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(
            dataset=d["dataset"],
            policy=d["policy"],
            variant=d["variant"],
            config_fingerprint=d["config_fingerprint"],
            runs=[
                RunRecord(run_seed=r["run_seed"], rank_accuracies=list(r["rank_accuracies"]))
                for r in d["runs"]
            ],
        )


def _single_dataset(results: list[ExperimentResult]) -> str:
    if not results:
        raise ValueError("no results to report")
    datasets = {r.dataset for r in results}
    if len(datasets) != 1:
        raise ValueError(f"mixed datasets in one report: {sorted(datasets)}")
    return results[0].dataset


def _text_table(results: list[ExperimentResult]) -> str:
    dataset = _single_dataset(results)
    policies = [p for p in GALLERY_POLICIES if any(r.policy == p for r in results)]
    variants: list[str] = []
    for r in results:
        if r.variant not in variants:
            variants.append(r.variant)
    cells: dict[tuple[str, str], str] = {}
    for r in results:
        cells[(r.variant, r.policy)] = f"{r.mean_rank1():.4f}"
    rows = [(variant, [cells.get((variant, p), "-") for p in policies]) for variant in variants]
    for name, values in REFERENCE_ROWS.get(dataset, []):
        ref = dict(zip(GALLERY_POLICIES, values))
        rows.append((f"reference: {name}", [f"{ref[p]:.4f}" for p in policies]))

    name_width = max(len("model"), max(len(name) for name, _ in rows))
    headers = [_POLICY_HEADERS[p] for p in policies]
    col_width = max(11, max(len(h) for h in headers))
    lines = [f"Rank-1 identification accuracy, dataset: {dataset}"]
    lines.append(
        " ".join(["model".ljust(name_width)] + [h.rjust(col_width) for h in headers])
    )
    for name, values in rows:
        lines.append(" ".join([name.ljust(name_width)] + [v.rjust(col_width) for v in values]))
    return "\n".join(lines) + "\n"


def _csv_report(results: list[ExperimentResult]) -> str:
    _single_dataset(results)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "variant", "policy", "run", "rank1"])
    for r in results:
        for i, run in enumerate(r.runs):
            writer.writerow(
                [r.dataset, r.variant, r.policy, f"run{i}-seed{run.run_seed}",
                 f"{run.rank_accuracies[0]:.6f}"]
            )
        writer.writerow([r.dataset, r.variant, r.policy, "mean", f"{r.mean_rank1():.6f}"])
    return buf.getvalue()


def _json_report(results: list[ExperimentResult]) -> str:
    dataset = _single_dataset(results)
    payload = {"dataset": dataset, "results": [r.to_dict() for r in results]}
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def emit_report(results: list[ExperimentResult], format: str = "table") -> str:
    """Render results as ``table``, ``csv``, or ``json`` (one dataset per report)."""
    if format == "table":
        return _text_table(results)
    if format == "csv":
        return _csv_report(results)
    if format == "json":
        return _json_report(results)
    raise ValueError(f"unknown report format {format!r}")


def parse_report_json(text: str) -> list[ExperimentResult]:
    payload = json.loads(text)
    return [ExperimentResult.from_dict(d) for d in payload["results"]]

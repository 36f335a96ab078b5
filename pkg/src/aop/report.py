"""Metrics report container and artifact emission (JSON, CSV tables, plots).

Every emitted artifact embeds the config hash so a report can be traced to
the exact configuration that produced it.
"""

from __future__ import annotations

import csv
import datetime
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import CLASS_NAMES, SPLITS

ARM_ORDER = ("none", "MAE_prob", "MAE", "SSIM")


@dataclass
class ArmMetrics:
    name: str
    split_accuracy: dict[str, float]
    confusion: dict[str, list[list[int]]]
    gap: float
    gradcam_overlap_mean: float | None = None

    def __post_init__(self):
        want = self.split_accuracy["validation"] - self.split_accuracy["test"]
        if abs(self.gap - want) > 1e-9:
            raise ValueError(f"gap {self.gap} inconsistent with accuracies ({want})")


@dataclass
class MetricsReport:
    provenance: dict
    arms: dict[str, ArmMetrics]
    segmentation: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "arms": {k: asdict(v) for k, v in self.arms.items()},
            "segmentation": self.segmentation,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path: str | Path) -> "MetricsReport":
        with open(path) as fh:
            doc = json.load(fh)
        arms = {k: ArmMetrics(**v) for k, v in doc["arms"].items()}
        return cls(doc["provenance"], arms, doc.get("segmentation", {}))


def make_arm_metrics(
    name: str,
    split_accuracy: dict[str, float],
    confusion: dict[str, np.ndarray],
    gradcam_overlap_mean: float | None = None,
) -> ArmMetrics:
    return ArmMetrics(
        name=name,
        split_accuracy={k: float(v) for k, v in split_accuracy.items()},
        confusion={k: np.asarray(v).astype(int).tolist() for k, v in confusion.items()},
        gap=float(split_accuracy["validation"] - split_accuracy["test"]),
        gradcam_overlap_mean=gradcam_overlap_mean,
    )


def provenance(config_hash: str) -> dict:
    return {
        "config_hash": config_hash,
        "git_revision": _git_revision(),
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }


def _git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


def write_accuracy_csv(report: MetricsReport, path: str | Path) -> None:
    """3 splits x 4 arms accuracy grid."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={report.provenance['config_hash']}\n")
        w = csv.writer(fh)
        w.writerow(["arm"] + list(SPLITS))
        for arm in ARM_ORDER:
            if arm not in report.arms:
                continue
            accs = report.arms[arm].split_accuracy
            w.writerow([arm] + [f"{accs[s]:.6f}" for s in SPLITS])


def write_segmentation_csv(seg: dict[str, dict[str, float]], config_hash: str, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["variant", "precision", "recall", "f1"])
        for variant, vals in seg.items():
            w.writerow([variant, f"{vals['precision']:.6f}", f"{vals['recall']:.6f}", f"{vals['f1']:.6f}"])


def _png_meta(config_hash: str) -> dict:
    return {"Description": f"config_hash={config_hash}"}


def plot_confusion(matrix: np.ndarray, title: str, path: str | Path, config_hash: str = "") -> None:
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(CLASS_NAMES)), CLASS_NAMES, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(CLASS_NAMES)), CLASS_NAMES, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    thresh = matrix.max() / 2 if matrix.max() else 0.5
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(matrix[i, j]), ha="center", va="center", fontsize=6,
                    color="white" if matrix[i, j] > thresh else "black")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_png_meta(config_hash))
    plt.close(fig)


def plot_accuracy_bars(report: MetricsReport, path: str | Path) -> None:
    arms = [a for a in ARM_ORDER if a in report.arms]
    x = np.arange(len(arms))
    width = 0.25
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, split in enumerate(SPLITS):
        vals = [report.arms[a].split_accuracy[split] * 100 for a in arms]
        ax.bar(x + (k - 1) * width, vals, width, label=split)
    ax.set_xticks(x, arms)
    ax.set_ylabel("accuracy [%]")
    ax.set_title("diagnosis accuracy by arm and split")
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_png_meta(report.provenance["config_hash"]))
    plt.close(fig)


def plot_overlap_bars(report: MetricsReport, path: str | Path) -> None:
    arms = [a for a in ARM_ORDER if a in report.arms and report.arms[a].gradcam_overlap_mean is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(arms, [report.arms[a].gradcam_overlap_mean for a in arms], color="seagreen")
    ax.set_ylabel("mean evidence overlap with leaf")
    ax.set_ylim(0, 1)
    ax.set_title("attribution overlap with leaf region")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_png_meta(report.provenance["config_hash"]))
    plt.close(fig)

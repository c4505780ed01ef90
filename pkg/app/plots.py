"""SVG learning-curve plots: mean line plus min-max band per init mode."""

import logging
from pathlib import Path
from typing import Dict, List, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.metrics import METRIC_NAMES  # noqa: E402
from app.sweep import CurvePoint  # noqa: E402
from app.trainer import InitMode  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed salt and no date keep the SVG bytes identical across reruns
plt.rcParams["svg.hashsalt"] = "fundus-transfer"
plt.rcParams["figure.figsize"] = 6, 4

LEGEND_SIZE = 9

MODE_STYLE = {
    InitMode.DIRECT: "k-o",
    InitMode.GENERIC_PRETRAINED: "b--s",
    InitMode.SOURCE_PRETRAINED: "r-D",
}

MODE_COLOR = {
    InitMode.DIRECT: "0.3",
    InitMode.GENERIC_PRETRAINED: "b",
    InitMode.SOURCE_PRETRAINED: "r",
}

MODE_LEGEND = {
    InitMode.DIRECT: "Direct training",
    InitMode.GENERIC_PRETRAINED: "Generic-pretrained",
    InitMode.SOURCE_PRETRAINED: "Source-pretrained",
}

METRIC_LABEL = {
    "auroc": "AUROC",
    "accuracy": "Accuracy",
    "precision": "Precision",
    "sensitivity": "Sensitivity",
}


def plot_metric(curves: Dict[Tuple[InitMode, str], List[CurvePoint]], metric: str, path: Path) -> Path:
    fig, ax = plt.subplots()
    try:
        for mode in InitMode:
            points = [p for p in curves.get((mode, metric), []) if p.mean is not None]
            if not points:
                continue
            x = [p.train_fraction for p in points]
            ax.plot(x, [p.mean for p in points], MODE_STYLE[mode], label=MODE_LEGEND[mode], markersize=4)
            ax.fill_between(
                x, [p.min for p in points], [p.max for p in points], color=MODE_COLOR[mode], alpha=0.2, linewidth=0
            )
        ax.set_xlabel("Training size (fraction of full training set)")
        ax.set_ylabel(METRIC_LABEL[metric])
        ax.set_title(f"{METRIC_LABEL[metric]} over training sample reduction")
        ax.grid(True, linestyle=":", linewidth=0.5)
        ax.legend(loc="lower right", prop={"size": LEGEND_SIZE})
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.debug(f"Wrote {path}")
    return path


def plot_learning_curves(curves: Dict[Tuple[InitMode, str], List[CurvePoint]], plots_dir: Path) -> List[Path]:
    """One SVG per metric."""
    return [plot_metric(curves, metric, plots_dir / f"{metric}.svg") for metric in METRIC_NAMES]

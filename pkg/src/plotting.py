# plotting.py

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ood_stats import DensityCurve  # noqa: E402
from utils import PathLike  # noqa: E402

TRAIN_COLOR = "grey"
TEST_COLOR = "tab:blue"
INTERVENTION_COLOR = "tab:green"


def dataset_color(dataset_id: str) -> str:
    if dataset_id == "train":
        return TRAIN_COLOR
    if dataset_id == "test":
        return TEST_COLOR
    return INTERVENTION_COLOR


def plot_density_panels(curves: Sequence[DensityCurve], path: PathLike, estimator: str = "",
                        columns: int = 4, reference: Optional[DensityCurve] = None) -> None:
    """
    One panel per dataset: its histogram and KDE, with the reference
    (training) KDE drawn underneath in grey. Written as SVG.
    """
    if not curves:
        raise ValueError("nothing to plot")
    if reference is None:
        reference = next((c for c in curves if c.dataset_id == "train"), None)
    rows = (len(curves) + columns - 1) // columns
    fig, axes = plt.subplots(rows, columns, figsize=(3.2 * columns, 2.4 * rows), squeeze=False)
    for ax, curve in zip(axes.flat, curves):
        color = dataset_color(curve.dataset_id)
        width = curve.bin_centers[1] - curve.bin_centers[0] if len(curve.bin_centers) > 1 else 1.0
        ax.bar(curve.bin_centers, curve.hist_density, width=width, color=color, alpha=0.35, linewidth=0)
        if reference is not None and reference is not curve:
            ax.plot(reference.kde_x, reference.kde_y, color=TRAIN_COLOR, linewidth=1.0)
        ax.plot(curve.kde_x, curve.kde_y, color=color, linewidth=1.5)
        ax.set_title(curve.dataset_id, fontsize=9)
        ax.tick_params(labelsize=7)
    for ax in list(axes.flat)[len(curves):]:
        ax.set_visible(False)
    if estimator:
        fig.suptitle(f"{estimator} log-likelihood", fontsize=11)
    fig.tight_layout()
    # fixed salt keeps the generated clip-path ids stable across runs
    with plt.rc_context({"svg.hashsalt": f"density-{estimator}"}):
        fig.savefig(str(path), format="svg", metadata={"Date": None})
    plt.close(fig)

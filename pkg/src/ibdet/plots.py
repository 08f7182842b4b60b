"""Figure rendering for the report paths: training curves, information-plane
trajectories, precision-recall curves, ablation trends, and detection overlays.
All functions write PNG files and return the path."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as mpatches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_CLASS_COLORS = ("tab:red", "tab:blue", "tab:green", "tab:orange", "tab:purple")


def plot_training_curves(epoch_rows: list[dict], path: Path | str) -> Path:
    """Loss components and mAP across epochs, one panel each."""
    path = Path(path)
    train = [r for r in epoch_rows if r["split"] == "train"]
    test = [r for r in epoch_rows if r["split"] == "test"]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))

    epochs = [r["epoch"] for r in train]
    axes[0].plot(epochs, [r["total"] for r in train], label="total")
    axes[0].plot(epochs, [r["info_xf"] for r in train], label="info_xf")
    axes[0].plot(epochs, [r["sparse_term"] for r in train], label="sparse")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss (nats)")
    axes[0].legend(fontsize=8)
    axes[0].set_title("objective")

    axes[1].plot(epochs, [r["class_term"] for r in train], label="class")
    axes[1].plot(epochs, [r["loc_term"] for r in train], label="loc")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("log-likelihood (nats)")
    axes[1].legend(fontsize=8)
    axes[1].set_title("task terms")

    for rows, label in ((train, "train"), (test, "test")):
        axes[2].plot([r["epoch"] for r in rows], [r["map"] for r in rows],
                     marker="o", ms=3, label=label)
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("mAP@0.5")
    axes[2].set_ylim(0, 1)
    axes[2].legend(fontsize=8)
    axes[2].set_title("detection quality")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_info_plane(epoch_rows: list[dict], path: Path | str) -> Path:
    """Trajectory of (I(X;F) proxy, I(F;Y) proxy) over epochs per split."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    for split, color in (("train", "tab:blue"), ("test", "tab:orange")):
        rows = [r for r in epoch_rows if r["split"] == split]
        if not rows:
            continue
        x = [r["ixf_proxy"] for r in rows]
        y = [r["ify_proxy"] for r in rows]
        ax.plot(x, y, "-o", ms=3, color=color, label=split, alpha=0.8)
        if x:
            ax.annotate("start", (x[0], y[0]), fontsize=7, color=color)
            ax.annotate("end", (x[-1], y[-1]), fontsize=7, color=color)
    ax.set_xlabel("I(X;F) proxy (nats)")
    ax.set_ylabel("I(F;Y) proxy (nats)")
    ax.set_title("information plane")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pr_curves(curves: dict[int, tuple[np.ndarray, np.ndarray]],
                   ap: dict[int, float], path: Path | str,
                   class_names: tuple[str, ...] | None = None) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, (cls, (recall, precision)) in enumerate(sorted(curves.items())):
        name = (class_names[cls - 1] if class_names and cls - 1 < len(class_names)
                else f"class {cls}")
        ax.plot(recall, precision, color=_CLASS_COLORS[i % len(_CLASS_COLORS)],
                label=f"{name} (AP {ap.get(cls, 0.0):.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, loc="lower left")
    ax.set_title("precision-recall")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep_trends(rows: list[dict], path: Path | str) -> Path:
    """Four ablation panels: mAP, I(F;Y) proxy, FP, FN against the swept
    hyperparameter values (mean over seeds, per remaining grid value)."""
    path = Path(path)
    ok = [r for r in rows if np.isfinite(r.get("map", np.nan))]
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    metrics = (("map", "mAP@0.5"), ("ify_proxy", "I(F;Y) proxy (nats)"),
               ("fp", "false positives"), ("fn", "false negatives"))
    betas = sorted({r["beta"] for r in ok})
    gammas = sorted({r["gamma"] for r in ok})
    sweep_gamma = len(gammas) >= len(betas)
    xkey, groupkey = ("gamma", "beta") if sweep_gamma else ("beta", "gamma")
    for ax, (key, label) in zip(axes.ravel(), metrics):
        for gi, gval in enumerate(sorted({r[groupkey] for r in ok})):
            xs = sorted({r[xkey] for r in ok if r[groupkey] == gval})
            means = [np.mean([r[key] for r in ok
                              if r[groupkey] == gval and r[xkey] == x]) for x in xs]
            ax.plot(xs, means, "-o", ms=4,
                    color=_CLASS_COLORS[gi % len(_CLASS_COLORS)],
                    label=f"{groupkey}={gval:g}")
        ax.set_xlabel(xkey)
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
    fig.suptitle("ablation trends (mean over seeds)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def draw_detections(image: np.ndarray, detections, path: Path | str,
                    class_names: tuple[str, ...] | None = None,
                    groundtruth: np.ndarray | None = None) -> Path:
    """Overlay detection boxes (solid) and optional groundtruth (dashed)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.transpose(np.asarray(image), (1, 2, 0)), interpolation="nearest")
    if groundtruth is not None:
        for box in np.asarray(groundtruth).reshape(-1, 4):
            ax.add_patch(mpatches.Rectangle(
                (box[0], box[1]), box[2] - box[0], box[3] - box[1],
                fill=False, ls="--", ec="white", lw=1.0))
    for d in detections:
        color = _CLASS_COLORS[(d.class_id - 1) % len(_CLASS_COLORS)]
        box = d.box
        ax.add_patch(mpatches.Rectangle(
            (box[0], box[1]), box[2] - box[0], box[3] - box[1],
            fill=False, ec=color, lw=1.5))
        name = (class_names[d.class_id - 1]
                if class_names and d.class_id - 1 < len(class_names)
                else str(d.class_id))
        ax.text(box[0], max(box[1] - 1, 0), f"{name} {d.score:.2f}",
                fontsize=7, color=color)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

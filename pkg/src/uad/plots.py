"""Static figures: PR/ROC curves and a BEV inspection panel."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .bevgeo import build_partition, mask_to_angular_label, project_rois_to_mask, rasterize_world  # noqa: E402
from .model import command_index  # noqa: E402
from .scenario import expert_waypoints, filter_rois  # noqa: E402

_SAVE = dict(dpi=100, metadata={"Software": None, "Creation Time": None})


def plot_curves(pr: dict, path) -> None:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 4))
    pts = [p for p in pr["points"] if p["precision"] is not None and p["recall"] is not None]
    a.plot([p["recall"] for p in pts], [p["precision"] for p in pts], marker="o", ms=3)
    a.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02), title="objectness PR")
    pts = [p for p in pr["points"] if p["fpr"] is not None and p["tpr"] is not None]
    b.plot([p["fpr"] for p in pts], [p["tpr"] for p in pts], marker="o", ms=3)
    b.plot([0, 1], [0, 1], "k--", lw=0.8)
    b.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1.02), title="objectness ROC")
    fig.tight_layout()
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)


def render_inspection(scene, frame: int, config, model, path) -> None:
    """Raster occupancy, ROI mask with sector labels, and expert vs predicted plan."""
    grid = config.grid
    if not 0 <= frame < scene.num_frames - config.T:
        raise IndexError(f"frame {frame} has no full {config.T}-step future")
    part = build_partition(grid, config.theta)
    raster = rasterize_world(scene.pose(frame), scene.agents[frame], scene.boundary, grid, ego_speed=scene.ego_status[frame][0])
    rois = filter_rois(scene.rois[frame], scene.cameras, config.roi_conf_threshold, config.rule_filter)
    mask = project_rois_to_mask(rois, scene.cameras, grid)
    label = mask_to_angular_label(mask, part)
    gt = expert_waypoints(scene, frame, config.T)
    ext = grid.width * grid.resolution / 2, grid.height * grid.resolution / 2
    extent = (-ext[0], ext[0], -ext[1], ext[1])

    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    axes[0].imshow(raster[..., 3], extent=extent, cmap="Greys_r", vmin=-1, vmax=1)
    axes[0].imshow(np.ma.masked_equal(raster[..., 0], 0), extent=extent, cmap="autumn", alpha=0.9)
    axes[0].set_title("rasters: boundary distance + occupancy")
    axes[1].imshow(mask, extent=extent, cmap="Blues", vmin=0, vmax=1)
    lit = np.isin(part.cell_sector, np.flatnonzero(label))
    axes[1].imshow(np.ma.masked_equal(lit.astype(float), 0), extent=extent, cmap="Reds", alpha=0.25, vmin=0, vmax=1)
    axes[1].set_title(f"ROI mask, {int(label.sum())}/{part.K} sectors occupied")
    axes[2].imshow(raster[..., 3], extent=extent, cmap="Greys_r", vmin=-1, vmax=1)
    axes[2].plot(gt[:, 0], gt[:, 1], "g.-", label="expert")
    if model is not None:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            model.eval()
            st = torch.tensor([scene.ego_status[frame]], dtype=dtype) if model.use_ego_status else None
            out = model(torch.as_tensor(raster[None], dtype=dtype), torch.tensor([command_index(scene.commands[frame])]), st)
        pred = out.trajectory[0].double().numpy()
        axes[2].plot(pred[:, 0], pred[:, 1], "m.-", label="predicted")
    axes[2].legend(loc="lower right", fontsize=8)
    axes[2].set_title(f"plan ({scene.commands[frame]})")
    for ax in axes:
        ax.plot(0, 0, "k^")
    fig.tight_layout()
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)

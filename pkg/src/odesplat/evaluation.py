"""Per-frame metric tables, summary plots and trajectory errors."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .metrics import l1, psnr, ssim
from .scenes import Dataset, Trajectory

CSV_COLUMNS = ("frame_id", "t", "split", "psnr", "ssim", "l1")


@dataclass
class FrameMetrics:
    frame_id: int
    t: float
    split: str
    psnr: float
    ssim: float
    l1: float


def evaluate(render_fn, dataset: Dataset, split: str, frame_ids=None, workers: int = 1) -> list[FrameMetrics]:
    """Render every frame of ``dataset`` with ``render_fn(camera, t)`` and score it.

    ``frame_ids`` labels rows (defaults to positions within the dataset).
    """
    if not dataset.frames:
        raise ContractError(f"split {split!r} has no frames")
    ids = list(range(len(dataset.frames))) if frame_ids is None else list(frame_ids)
    if len(ids) != len(dataset.frames):
        raise ContractError("frame_ids length does not match the dataset")

    def one(i):
        fr = dataset.frames[i]
        if fr.camera >= len(dataset.cameras):
            raise ContractError(f"frame {ids[i]} refers to missing camera {fr.camera}")
        img = render_fn(dataset.cameras[fr.camera], fr.t)
        return FrameMetrics(ids[i], fr.t, split, psnr(img, fr.image), ssim(img, fr.image), l1(img, fr.image))

    idx = range(len(dataset.frames))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, idx))
    return [one(i) for i in idx]


def summarize(rows: list[FrameMetrics]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for split in sorted({r.split for r in rows}):
        sel = [r for r in rows if r.split == split]
        out[split] = {k: float(np.mean([getattr(r, k) for r in sel])) for k in ("psnr", "ssim", "l1")}
    return out


def write_csv(rows: list[FrameMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.frame_id, f"{r.t:.6f}", r.split, f"{r.psnr:.10g}", f"{r.ssim:.10g}", f"{r.l1:.10g}"])


def read_csv(path) -> list[FrameMetrics]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [FrameMetrics(int(r["frame_id"]), float(r["t"]), r["split"], float(r["psnr"]), float(r["ssim"]), float(r["l1"])) for r in rd]


def plot_metrics(rows: list[FrameMetrics], out_dir) -> list[Path]:
    """Line charts of mean metric against time, one PNG per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for key in ("psnr", "ssim", "l1"):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for split in sorted({r.split for r in rows}):
            ts = sorted({r.t for r in rows if r.split == split})
            ys = [np.mean([getattr(r, key) for r in rows if r.split == split and r.t == t]) for t in ts]
            ax.plot(ts, ys, marker="o", label=split)
        ax.set_xlabel("t")
        ax.set_ylabel(key)
        ax.legend()
        fig.tight_layout()
        p = out_dir / f"{key}_vs_t.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths


def center_error(pipeline, trajectory: Trajectory, t: float) -> float:
    """Mean distance between predicted centers at ``t`` and where the analytic
    motion carries the model's own time-0 centers."""
    start = pipeline.deformed_positions(0.0)
    pred = pipeline.deformed_positions(t)
    return float(np.linalg.norm(pred - trajectory.positions(start, t), axis=1).mean())

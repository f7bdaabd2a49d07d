"""
Evaluation - inference, corner-error metrics, dataset and zero-shot
evaluation, report files and cumulative error curves.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
import csv
import json
import time
import tracemalloc

import numpy as np
import torch

from .datapipe import PairRecord, to_tensor
from .errors import DataError
from .geometry import Frame, Homography, corners_to_homography, frame_corners
from .regnet import RegNetwork, register

AUC_KS = (3, 5, 10, 20)


def infer(net: RegNetwork, x_s: torch.Tensor, x_t: torch.Tensor) -> Homography:
    """Homography carrying x^S onto x^T from the final iteration"""
    if x_s.dim() == 3:
        x_s, x_t = x_s.unsqueeze(0), x_t.unsqueeze(0)
    with torch.no_grad():
        pred = register(net, x_s, x_t)
    return corners_to_homography(pred.final_displacement(0), tuple(x_s.shape[-2:]))


def ace(h_gt: Homography, h_pred: Homography, frame: Frame) -> float:
    """Mean Euclidean distance between the four corners mapped by each homography"""
    corners = frame_corners(frame)
    return float(np.linalg.norm(h_gt.apply(corners) - h_pred.apply(corners), axis=1).mean())


def auc_at(errors, k: float) -> float:
    """Area under the cumulative error curve up to k, as a percentage"""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        return 0.0
    return float(np.mean(np.maximum(0.0, 1.0 - e / k)) * 100.0)


def auc_fraction_at(errors, k: float) -> float:
    """Percentage of samples with error below k"""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        return 0.0
    return float(np.mean(e < k) * 100.0)


@dataclass
class EvalReport:
    dataset: str
    checkpoint: str
    ids: list[str] = field(default_factory=list)
    aces: list[float] = field(default_factory=list)
    infer_seconds: list[float] = field(default_factory=list)
    in_domain: bool = True
    peak_memory_bytes: list[int] = field(default_factory=list)
    param_bytes: int = 0

    @property
    def count(self) -> int:
        return len(self.aces)

    @property
    def mace(self) -> float:
        return float(np.mean(self.aces)) if self.aces else float("nan")

    @property
    def auc(self) -> dict[int, float]:
        return {k: auc_at(self.aces, k) for k in AUC_KS}

    @property
    def auc_fraction(self) -> dict[int, float]:
        return {k: auc_fraction_at(self.aces, k) for k in AUC_KS}

    @property
    def timing(self) -> dict[str, float]:
        t = np.asarray(self.infer_seconds, dtype=np.float64)
        if t.size == 0:
            return {"mean_ms": 0.0, "std_ms": 0.0, "total_s": 0.0}
        return {"mean_ms": float(t.mean() * 1e3), "std_ms": float(t.std() * 1e3), "total_s": float(t.sum())}

    @property
    def memory(self) -> dict[str, float]:
        peak = max(self.peak_memory_bytes, default=0)
        return {"peak_mb": peak / 2**20, "param_mb": self.param_bytes / 2**20}

    def summary(self) -> dict:
        return {
            "dataset": self.dataset,
            "checkpoint": self.checkpoint,
            "in_domain": self.in_domain,
            "count": self.count,
            "mace": self.mace,
            **{f"auc@{k}": v for k, v in self.auc.items()},
            **{f"frac@{k}": v for k, v in self.auc_fraction.items()},
            **self.timing,
            **self.memory,
        }

    def to_dict(self) -> dict:
        return {**asdict(self), "summary": self.summary()}

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            dataset=data["dataset"],
            checkpoint=data["checkpoint"],
            ids=list(data["ids"]),
            aces=[float(a) for a in data["aces"]],
            infer_seconds=[float(t) for t in data["infer_seconds"]],
            in_domain=bool(data.get("in_domain", True)),
            peak_memory_bytes=[int(b) for b in data.get("peak_memory_bytes", [])],
            param_bytes=int(data.get("param_bytes", 0)),
        )

    def save_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load_json(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_csv(self, path: str | Path) -> Path:
        """Per-sample table: id, ace, infer_ms"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "ace", "infer_ms"])
            for pair_id, err, secs in zip(self.ids, self.aces, self.infer_seconds):
                writer.writerow([pair_id, repr(err), repr(secs * 1e3)])
        return path


def _measured_infer(net: RegNetwork, x_s: torch.Tensor, x_t: torch.Tensor) -> tuple[Homography, float, int]:
    """infer() with wall-clock seconds and peak bytes allocated during the call.

    CUDA networks report torch's allocator peak; on CPU the tracemalloc peak
    is used, which only sees allocations routed through Python's allocator.
    """
    param = next(net.parameters(), None)
    on_cuda = param is not None and param.is_cuda
    if on_cuda:
        torch.cuda.synchronize(param.device)
        torch.cuda.reset_peak_memory_stats(param.device)
        base = torch.cuda.memory_allocated(param.device)
    else:
        already_tracing = tracemalloc.is_tracing()
        if already_tracing:
            tracemalloc.reset_peak()
        else:
            tracemalloc.start()
        base = tracemalloc.get_traced_memory()[0]

    start = time.perf_counter()
    try:
        h_pred = infer(net, x_s, x_t)
        if on_cuda:
            torch.cuda.synchronize(param.device)
    finally:
        seconds = time.perf_counter() - start
        if on_cuda:
            peak = torch.cuda.max_memory_allocated(param.device) - base
        else:
            peak = tracemalloc.get_traced_memory()[1] - base
            if not already_tracing:
                tracemalloc.stop()
    return h_pred, seconds, int(peak)


def evaluate_dataset(
    net: RegNetwork,
    records: list[PairRecord],
    dataset: str = "",
    checkpoint: str = "",
    channels: int = 1,
    in_domain: bool = True,
) -> EvalReport:
    """ACE of every test record; timing and memory cover infer only.

    The network's train/eval mode is restored afterwards.
    """
    report = EvalReport(dataset=dataset, checkpoint=checkpoint, in_domain=in_domain)
    report.param_bytes = sum(p.numel() * p.element_size() for p in net.parameters())
    was_training = net.training
    net.eval()
    try:
        for rec in records:
            if rec.gt_dp is None:
                raise DataError(f"Evaluation pair {rec.pair_id} has no ground-truth displacement")
            src, tgt = rec.load(channels)
            x_s, x_t = to_tensor(src), to_tensor(tgt)
            frame = tuple(x_s.shape[-2:])

            h_pred, seconds, peak = _measured_infer(net, x_s, x_t)
            report.infer_seconds.append(seconds)
            report.peak_memory_bytes.append(peak)

            report.ids.append(rec.pair_id)
            report.aces.append(ace(corners_to_homography(rec.gt_dp, frame), h_pred, frame))
    finally:
        net.train(was_training)
    return report


@dataclass
class ZeroShotMatrix:
    checkpoints: list[str]
    datasets: list[str]
    cells: dict[tuple[str, str], EvalReport]

    def cell(self, checkpoint: str, dataset: str) -> EvalReport:
        return self.cells[(checkpoint, dataset)]

    def mace_table(self) -> list[list[float]]:
        return [[self.cells[(c, d)].mace for d in self.datasets] for c in self.checkpoints]

    def to_dict(self) -> dict:
        return {
            "checkpoints": self.checkpoints,
            "datasets": self.datasets,
            "cells": [{"checkpoint": c, "dataset": d, **self.cells[(c, d)].to_dict()} for c in self.checkpoints for d in self.datasets],
        }


def zero_shot_matrix(
    checkpoints: dict[str, tuple[RegNetwork, str]],
    datasets: dict[str, list[PairRecord]],
    channels: int = 1,
) -> ZeroShotMatrix:
    """Evaluate every checkpoint on every dataset's test split.

    `checkpoints` maps a name to (network, dataset it was trained on); a cell
    is in-domain when that dataset is the one evaluated.
    """
    cells = {}
    for name, (net, trained_on) in checkpoints.items():
        for tag, records in datasets.items():
            cells[(name, tag)] = evaluate_dataset(net, records, tag, name, channels, in_domain=(trained_on == tag))
    return ZeroShotMatrix(list(checkpoints), list(datasets), cells)


def plot_error_curves(reports: dict[str, EvalReport], path: str | Path, max_error: float = 20.0) -> Path:
    """Cumulative ACE distribution of each report"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    thresholds = np.linspace(0.0, max_error, 201)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, report in reports.items():
        errors = np.asarray(report.aces)
        if errors.size == 0:
            continue
        ax.plot(thresholds, [(errors <= t).mean() * 100.0 for t in thresholds], label=f"{label} (MACE {report.mace:.2f})")
    ax.set_xlabel("Corner error threshold (px)")
    ax.set_ylabel("Pairs below threshold (%)")
    ax.set_xlim(0, max_error)
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(reports: list[EvalReport], template_dir: str | Path, title: str = "Evaluation") -> str:
    """Markdown table of report summaries"""
    from jinja2 import Environment, FileSystemLoader

    env = Environment(loader=FileSystemLoader(str(template_dir)), trim_blocks=True, lstrip_blocks=True)
    return env.get_template("report.md.j2").render(title=title, ks=AUC_KS, rows=[r.summary() for r in reports])

"""Scoring trained models on held-out pairs and Table-style reporting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError
from .losses import ms_ssim, psnr
from .trainer import load_batch

SUMMARY_COLUMNS = ("model_name", "n_images", "avg_psnr", "avg_msssim")
PER_IMAGE_COLUMNS = ("model_name", "image", "psnr", "msssim")


@dataclass
class EvalResult:
    model_name: str
    avg_psnr: float
    avg_msssim: float
    n_images: int
    records: list[dict] = field(default_factory=list)

    @classmethod
    def from_records(cls, model_name: str, records: list[dict]) -> "EvalResult":
        if not records:
            raise ContractError("cannot summarize an empty evaluation")
        return cls(model_name, _mean([r["psnr"] for r in records]),
                   _mean([r["msssim"] for r in records]), len(records), records)


def _mean(values) -> float:
    # fsum is exactly rounded, so the mean does not depend on image order
    if any(math.isinf(v) for v in values):
        return math.inf
    return math.fsum(values) / len(values)


def to_unit_range(out: torch.Tensor) -> np.ndarray:
    """tanh-range NCHW batch -> NHWC float64 in [0, 1]."""
    return np.clip((out.detach().double().permute(0, 2, 3, 1).numpy() + 1.0) / 2.0, 0.0, 1.0)


def evaluate(model, test_set, batch: int = 4, model_name: str = "PyNET") -> EvalResult:
    """Average PSNR / MS-SSIM of level-0 outputs against the full-resolution targets.

    ``model`` is a :class:`~pynet_isp.model.PyNet` or any callable with the
    same ``(packed, level)`` signature and a ``trained_level`` attribute.
    """
    if getattr(model, "trained_level", 0) != 0:
        raise ContractError(f"evaluate needs a fully trained model, trained_level={model.trained_level}")
    if len(test_set) == 0:
        raise ContractError("empty test set")
    if hasattr(model, "eval"):
        model.eval()
    names = getattr(test_set, "names", [str(i) for i in range(len(test_set))])
    records = []
    with torch.no_grad():
        for start in range(0, len(test_set), batch):
            idx = list(range(start, min(start + batch, len(test_set))))
            packed, rgb = load_batch(test_set, idx)
            preds = to_unit_range(model(packed, 0))
            targets = rgb.double().permute(0, 2, 3, 1).numpy()
            for i, p, t in zip(idx, preds, targets):
                records.append({"image": names[i], "psnr": psnr(p, t), "msssim": ms_ssim(p, t)})
    return EvalResult.from_records(model_name, records)


def _fmt(value: float, digits: int) -> str:
    return "inf" if math.isinf(value) else f"{value:.{digits}f}"


def report_table(results: list[EvalResult]) -> str:
    """Plain-text table, best PSNR first: Method | PSNR | MS-SSIM."""
    if not results:
        raise ContractError("report_table needs at least one result")
    rows = sorted(results, key=lambda r: -r.avg_psnr)
    cells = [("Method", "PSNR", "MS-SSIM")]
    cells += [(r.model_name, _fmt(r.avg_psnr, 2), _fmt(r.avg_msssim, 4)) for r in rows]
    widths = [max(len(row[c]) for row in cells) for c in range(3)]

    def line(row):
        return " | ".join(
            row[c].ljust(widths[c]) if c == 0 else row[c].rjust(widths[c]) for c in range(3)
        )

    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(cells[0]), sep] + [line(r) for r in cells[1:]])


def write_results(out_dir, result: EvalResult) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary": out_dir / "results.csv",
        "per_image": out_dir / "per_image.csv",
        "table": out_dir / "table.txt",
    }
    with paths["summary"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        w.writerow([result.model_name, result.n_images, repr(result.avg_psnr), repr(result.avg_msssim)])
    with paths["per_image"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PER_IMAGE_COLUMNS)
        for r in result.records:
            w.writerow([result.model_name, r["image"], repr(r["psnr"]), repr(r["msssim"])])
    paths["table"].write_text(report_table([result]) + "\n")
    return paths


def read_results(path) -> list[EvalResult]:
    """Load summary rows written by :func:`write_results`."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(SUMMARY_COLUMNS) - set(reader.fieldnames):
            raise ContractError(f"{path}: not a results CSV (need columns {SUMMARY_COLUMNS})")
        return [
            EvalResult(row["model_name"], float(row["avg_psnr"]), float(row["avg_msssim"]),
                       int(row["n_images"]))
            for row in reader
        ]


def summary_csv_text(result: EvalResult) -> str:
    return (",".join(SUMMARY_COLUMNS) + "\n"
            + f"{result.model_name},{result.n_images},{result.avg_psnr:.6f},{result.avg_msssim:.6f}")

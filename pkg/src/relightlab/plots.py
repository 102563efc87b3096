"""Deterministic matplotlib figures from run reports.

Inputs are classified by their header/schema: loss-curve CSVs, benchmark
reports (JSON or CSV), and steps-vs-PSNR CSVs. Every input is parsed and
validated before the first figure is written, so a malformed report never
leaves partial output behind.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .annotation import ATTRIBUTES  # noqa: E402


class PlotDataError(ValueError):
    pass


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise PlotDataError(f"{path}: cannot read: {exc}") from exc
    if not rows:
        raise PlotDataError(f"{path}:1: empty file")
    return rows[0], rows[1:]


def _parse_loss_csv(path: Path) -> dict[str, list[float]]:
    header, rows = _read_csv(path)
    expected = ["iteration", "loss0", "loss_fast", "loss_phy", "total"]
    if header != expected:
        raise PlotDataError(f"{path}:1: expected header {expected}, got {header}")
    out: dict[str, list[float]] = {name: [] for name in expected}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(expected):
            raise PlotDataError(f"{path}:{lineno}: expected {len(expected)} fields")
        try:
            for name, value in zip(expected, row):
                out[name].append(float(value))
        except ValueError as exc:
            raise PlotDataError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise PlotDataError(f"{path}:1: no data rows")
    return out


def _parse_bench(path: Path) -> dict[str, float]:
    if path.suffix == ".json":
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PlotDataError(f"{path}:1: {exc}") from exc
        if "per_attribute" not in data:
            raise PlotDataError(f"{path}:1: missing 'per_attribute'")
        values = {attr: float(data["per_attribute"][attr]) for attr in ATTRIBUTES}
        values["avg_score"] = float(data["avg_score"])
        return values
    header, rows = _read_csv(path)
    if not rows:
        raise PlotDataError(f"{path}:2: no data row")
    index = {name: i for i, name in enumerate(header)}
    missing = [a for a in (*ATTRIBUTES, "avg_score") if a not in index]
    if missing:
        raise PlotDataError(f"{path}:1: missing columns {missing}")
    try:
        return {name: float(rows[0][index[name]]) for name in (*ATTRIBUTES, "avg_score")}
    except ValueError as exc:
        raise PlotDataError(f"{path}:2: {exc}") from exc


def _parse_steps_csv(path: Path) -> tuple[list[float], list[float]]:
    header, rows = _read_csv(path)
    if header[:2] != ["steps", "psnr"]:
        raise PlotDataError(f"{path}:1: expected header ['steps', 'psnr'], got {header}")
    if not rows:
        raise PlotDataError(f"{path}:1: no data rows")
    steps, psnrs = [], []
    for lineno, row in enumerate(rows, start=2):
        try:
            steps.append(float(row[0]))
            psnrs.append(float(row[1]))
        except (IndexError, ValueError) as exc:
            raise PlotDataError(f"{path}:{lineno}: {exc}") from exc
    return steps, psnrs


def _classify(path: Path):
    if path.suffix == ".json":
        return "bench", _parse_bench(path)
    header, _ = _read_csv(path)
    if header[:2] == ["iteration", "loss0"]:
        return "loss", _parse_loss_csv(path)
    if header[:2] == ["steps", "psnr"]:
        return "steps", _parse_steps_csv(path)
    if "avg_score" in header:
        return "bench", _parse_bench(path)
    raise PlotDataError(f"{path}:1: unrecognized report schema {header}")


def emit_plots(report_paths: list[str | Path], out_dir: str | Path) -> list[Path]:
    """Render one figure per recognized report; returns the written paths."""

    if not report_paths:
        raise PlotDataError("no report files given")
    parsed = []
    for raw in report_paths:
        path = Path(raw)
        if not path.exists():
            raise PlotDataError(f"{path}: no such file")
        parsed.append((path, *_classify(path)))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for path, kind, data in parsed:
        target = out_dir / f"plot_{kind}_{path.stem}.png"
        fig, ax = plt.subplots(figsize=(6, 4))
        if kind == "loss":
            for name in ("loss0", "loss_fast", "loss_phy", "total"):
                ax.plot(data["iteration"], data[name], label=name)
            ax.set_xlabel("iteration")
            ax.set_ylabel("loss")
            ax.set_yscale("log")
            ax.legend()
            ax.set_title("training losses")
        elif kind == "bench":
            names = list(ATTRIBUTES)
            values = [data[a] for a in names]
            ax.bar(range(len(names)), values)
            ax.axhline(data["avg_score"], linestyle="--", linewidth=1, label="avg_score")
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, rotation=30, ha="right")
            ax.set_ylim(0.0, 1.05)
            ax.set_ylabel("accuracy")
            ax.legend()
            ax.set_title("attribute controllability")
        else:
            steps, psnrs = data
            ax.plot(steps, psnrs, marker="o")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("sampling steps")
            ax.set_ylabel("PSNR (dB)")
            ax.set_title("steps vs PSNR")
        fig.tight_layout()
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)
    return written

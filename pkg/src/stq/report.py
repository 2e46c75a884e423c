"""Run artifacts: structured report, beta trajectories, weight histograms and layer summaries.

Everything is plain JSON or CSV so plots can be made with any tool.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .layers import Sequential
from .trainer import TrainingReport

REPORT_FILE = "report.json"
LATENT_FILE = "latent.npz"
BETA_FILE = "beta_trajectory.csv"
SUMMARY_FILE = "summary.csv"
HIST_DIR = "histograms"
SUMMARY_COLUMNS = (
    "layer", "n_weights", "beta", "depth", "mu_mean", "mu_std", "mu_min", "mu_max", "delta", "zero_fraction",
)


class MissingArtifact(FileNotFoundError):
    pass


def write_report(run_dir, report: TrainingReport) -> Path:
    path = Path(run_dir) / REPORT_FILE
    path.write_text(json.dumps(report.to_dict(), indent=1))
    return path


def read_report(run_dir) -> dict:
    path = Path(run_dir) / REPORT_FILE
    if not path.exists():
        raise MissingArtifact(f"{path} not found")
    return json.loads(path.read_text())


def write_beta_trajectory(run_dir, trajectory) -> Path:
    path = Path(run_dir) / BETA_FILE
    n_layers = len(trajectory[0]) if trajectory else 0
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch"] + [f"layer{i}" for i in range(n_layers)])
        for epoch, row in enumerate(trajectory, start=1):
            w.writerow([epoch] + [f"{b:.6f}" for b in row])
    return path


def save_latent(run_dir, model: Sequential) -> Path:
    """Latent weights, scales and thresholds of every weight layer."""
    arrays = {}
    for i, layer in enumerate(model.quant_layers()):
        arrays[f"W{i}"] = layer.W.data
        arrays[f"mu{i}"] = layer.mu.data
        arrays[f"delta{i}"] = np.array(layer.delta)
    path = Path(run_dir) / LATENT_FILE
    np.savez(path, **arrays)
    return path


def load_latent(run_dir) -> list[dict]:
    path = Path(run_dir) / LATENT_FILE
    if not path.exists():
        raise MissingArtifact(f"{path} not found")
    with np.load(path) as z:
        n = sum(1 for k in z.files if k.startswith("W"))
        return [{"W": z[f"W{i}"], "mu": z[f"mu{i}"], "delta": float(z[f"delta{i}"])} for i in range(n)]


def histogram(w: np.ndarray, bins: int = 80) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    edge = float(np.abs(w).max()) or 1.0
    return np.histogram(w, bins=bins, range=(-edge, edge))


def write_histogram_csv(path, edges, counts) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_left", "bin_right", "count"])
        for left, right, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{left:.8g}", f"{right:.8g}", int(c)])


def layer_summary(layers: list[dict], betas, depths) -> list[dict]:
    """One row per weight layer.

    ``zero_fraction`` is the share of latent weights inside the ternary
    dead zone ``|w| <= delta``, the weights a 2-bit encoding would zero.
    """
    rows = []
    for i, (layer, beta, depth) in enumerate(zip(layers, betas, depths)):
        w, mu = layer["W"], np.asarray(layer["mu"], dtype=np.float64)
        rows.append(
            {
                "layer": i,
                "n_weights": int(w.size),
                "beta": float(beta),
                "depth": int(depth),
                "mu_mean": float(mu.mean()),
                "mu_std": float(mu.std()),
                "mu_min": float(mu.min()),
                "mu_max": float(mu.max()),
                "delta": layer["delta"],
                "zero_fraction": float(np.mean(np.abs(w) <= layer["delta"])),
            }
        )
    return rows


def write_summary(path, rows) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def format_summary(rows) -> str:
    head = f"{'layer':>5} {'weights':>9} {'beta':>7} {'bits':>4} {'mu mean':>9} {'zero frac':>9}"
    lines = [head]
    for r in rows:
        lines.append(
            f"{r['layer']:>5} {r['n_weights']:>9} {r['beta']:>7.4f} {r['depth']:>4} "
            f"{r['mu_mean']:>9.4g} {r['zero_fraction']:>9.4f}"
        )
    return "\n".join(lines)


def emit_report(run_dir) -> list[dict]:
    """Write histogram CSVs and the layer summary for a finished run."""
    run_dir = Path(run_dir)
    rep = read_report(run_dir)
    layers = load_latent(run_dir)
    hist_dir = run_dir / HIST_DIR
    hist_dir.mkdir(exist_ok=True)
    for epoch, per_layer in rep.get("histograms", {}).items():
        for h in per_layer:
            write_histogram_csv(hist_dir / f"layer{h['layer']}_epoch{epoch}.csv", h["edges"], h["counts"])
    for i, layer in enumerate(layers):
        counts, edges = histogram(layer["W"])
        write_histogram_csv(hist_dir / f"layer{i}_final.csv", edges, counts)
    betas = rep["beta_trajectory"][-1] if rep["beta_trajectory"] else [float("nan")] * len(layers)
    rows = layer_summary(layers, betas, rep["depths"])
    write_summary(run_dir / SUMMARY_FILE, rows)
    if rep["beta_trajectory"]:
        write_beta_trajectory(run_dir, rep["beta_trajectory"])
    return rows

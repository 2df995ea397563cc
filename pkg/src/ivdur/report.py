"""Delimited outputs and figure rendering for study and estimation runs.

Every figure has a CSV twin: the CSV carries the plotted numbers, the PNG
is rendered from the same arrays with matplotlib (Agg backend, file output
only).
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .estimator import PhiEstimate  # noqa: E402
from .inference import BootstrapResult  # noqa: E402
from .sim import ReplicationSummary  # noqa: E402


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (int, float, np.floating)) else v for v in row])



def write_study_csvs(summary: ReplicationSummary, outdir) -> list[Path]:
    """Emit the per-figure CSVs of a replication study."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    u = summary.u_grid

    path = outdir / "fig_residual.csv"
    _write_rows(path, ["u", "residual_norm_mean"], zip(u, summary.residual_mean))
    written.append(path)

    for z in (0, 1):
        path = outdir / f"fig_phi{z}.csv"
        _write_rows(
            path,
            ["u", "truth", "estimate_mean", "naive_mean"],
            zip(u, summary.phi_truth[:, z], summary.phi_mean[:, z], summary.naive_mean[:, z]),
        )
        written.append(path)

    path = outdir / "fig_qte.csv"
    _write_rows(path, ["u", "truth", "estimate_mean"], zip(u, summary.qte_truth, summary.qte_mean))
    written.append(path)

    label_to_file = {
        "phi[z=0]": "fig_coverage_phi0.csv",
        "phi[z=1]": "fig_coverage_phi1.csv",
        "qte[z0->z1]": "fig_coverage_qte.csv",
    }
    for label, coverage in summary.coverage.items():
        path = outdir / label_to_file.get(label, f"fig_coverage_{label}.csv")
        _write_rows(path, ["u", "coverage"], zip(summary.bootstrap_u, coverage))
        written.append(path)
    return written


def render_study_figures(summary: ReplicationSummary, outdir) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    u = summary.u_grid

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(u, summary.residual_mean, color="black")
    ax.set_xlabel("u")
    ax.set_ylabel("squared residual norm")
    ax.set_title("Residual norm of the estimated system")
    written.append(_save(fig, outdir / "fig_residual.png"))

    for z in (0, 1):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(u, summary.phi_truth[:, z], "k-", label="truth")
        ax.plot(u, summary.phi_mean[:, z], "r--", label="estimate (mean)")
        naive = summary.naive_mean[:, z]
        finite = np.isfinite(naive)
        ax.plot(u[finite], naive[finite], "b:", label="naive (Nelson-Aalen)")
        ax.set_xlabel("u")
        ax.set_ylabel(f"quantile curve, z={z}")
        ax.legend()
        written.append(_save(fig, outdir / f"fig_phi{z}.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(u, summary.qte_truth, "k-", label="truth")
    ax.plot(u, summary.qte_mean, "r--", label="estimate (mean)")
    ax.set_xlabel("u")
    ax.set_ylabel("quantile treatment effect")
    ax.legend()
    written.append(_save(fig, outdir / "fig_qte.png"))

    if summary.coverage:
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, coverage in summary.coverage.items():
            ax.plot(summary.bootstrap_u, coverage, marker="o", label=label)
        ax.axhline(0.95, color="grey", linestyle=":")
        ax.set_ylim(0.0, 1.05)
        ax.set_xlabel("u")
        ax.set_ylabel("coverage")
        ax.legend()
        written.append(_save(fig, outdir / "fig_coverage.png"))
    return written


def render_phi_figure(estimate: PhiEstimate, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = estimate.z_levels or tuple(str(z) for z in range(estimate.n_treatments))
    for z in range(estimate.n_treatments):
        ax.plot(estimate.u_grid, estimate.curve(z), label=f"z={labels[z]}")
    ax.set_xlabel("u")
    ax.set_ylabel("estimated quantile curve")
    ax.legend()
    return _save(fig, path)


def render_residual_figure(estimate: PhiEstimate, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(estimate.u_grid, estimate.residual_norm, color="black")
    ax.set_yscale("log")
    ax.set_xlabel("u")
    ax.set_ylabel("squared residual norm")
    return _save(fig, path)


def render_ci_figure(result: BootstrapResult, path) -> Path:
    curve_entries = {
        label: e for label, e in result.entries.items() if e.u is not None
    }
    n = max(len(curve_entries), 1)
    fig, axes = plt.subplots(1, n, figsize=(5 * n, 4), squeeze=False)
    for ax, (label, entry) in zip(axes[0], curve_entries.items()):
        ax.plot(entry.u, entry.point, "k-", label="point")
        ax.fill_between(entry.u, entry.lower, entry.upper, alpha=0.3, label="95% CI")
        ax.set_xlabel("u")
        ax.set_title(label)
        ax.legend()
    return _save(fig, path)


def render_outer_set_figure(sets, path, c0: float, cap_factor: float = 2.0) -> Path:
    """Figure-style rendering of 2-d box unions, one panel per u."""
    sets = [(u, bu) for u, bu in sets if bu.dimension == 2]
    if not sets:
        return None
    cap = cap_factor * c0
    n = len(sets)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4), squeeze=False)
    for ax, (u, bu) in zip(axes[0], sets):
        for box in bu.boxes:
            x0, x1 = box[0].lo, min(box[0].hi, cap)
            y0, y1 = box[1].lo, min(box[1].hi, cap)
            ax.fill([x0, x1, x1, x0], [y0, y0, y1, y1], alpha=0.4, color="tab:blue")
        ax.axvline(c0, color="grey", linestyle=":")
        ax.axhline(c0, color="grey", linestyle=":")
        ax.set_xlim(0, cap)
        ax.set_ylim(0, cap)
        ax.set_title(f"u = {u:g}")
        ax.set_xlabel("theta_1")
        ax.set_ylabel("theta_2")
    return _save(fig, path)


def write_outer_set_corners(sets, path, c0: float, cap_factor: float = 2.0) -> Path:
    """Corner-point CSV companion to the outer-set JSON, for plotting."""
    path = Path(path)
    rows = []
    for u, bu in sets:
        for row in bu.corner_rows(unbounded_cap=cap_factor * c0):
            rows.append((u,) + row)
    dim = sets[0][1].dimension if sets else 0
    header = ["u", "box"] + [f"theta_{d + 1}" for d in range(dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(row[0])), int(row[1])] + [repr(float(v)) for v in row[2:]])
    return path


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

"""Report figures (rendered off-screen to PNG)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def training_curves(history: list, path, baseline_psnr: float | None = None) -> None:
    """Loss per iteration (left) and validation PSNR (right).

    ``history`` holds dicts with ``iter`` and ``loss`` and, on validation
    events, ``psnr``.
    """
    its = [h["iter"] for h in history]
    losses = [h["loss"] for h in history]
    val = [(h["iter"], h["psnr"]) for h in history if "psnr" in h]

    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax0.plot(its, losses, lw=0.8, color="tab:blue")
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("loss")
    ax0.set_yscale("log")
    ax0.grid(alpha=0.3)
    if val:
        x, y = zip(*val)
        ax1.plot(x, y, "o-", color="tab:green", label="restored")
    if baseline_psnr is not None:
        ax1.axhline(baseline_psnr, ls="--", color="gray", label="degraded input")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("val PSNR (dB)")
    ax1.grid(alpha=0.3)
    ax1.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def bench_scaling(rows: list, path) -> None:
    """Median wall time against pixel count, one line per operation, log-log axes.

    ``rows`` are dicts with ``name``, ``pixels`` and ``median_s``.
    """
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    names = sorted({r["name"] for r in rows})
    for name in names:
        pts = sorted((r["pixels"], r["median_s"]) for r in rows if r["name"] == name)
        if len(pts) > 1:
            x, y = zip(*pts)
            ax.plot(x, y, "o-", lw=1, ms=3, label=name)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("pixels (H*W)")
    ax.set_ylabel("median time (s)")
    ax.grid(alpha=0.3, which="both")
    ax.legend(frameon=False, fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)

"""Report figures written next to the CSV outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("L_p1", "L_p2", "L_f", "L_total")


def plot_metrics(rows, path):
    """Loss curves (log scale) and the learning-rate / EMA schedules."""
    steps = np.array([r["step"] for r in rows])
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True,
                                         gridspec_kw={"height_ratios": [3, 1]})
    for key in LOSS_KEYS:
        ax_loss.plot(steps, [r[key] for r in rows], label=key, lw=1.2 if key == "L_total" else 0.8)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(frameon=False, ncol=4, fontsize=8)
    ax_lr.plot(steps, [r["lr"] for r in rows], color="k", lw=0.8)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    ax_lam = ax_lr.twinx()
    ax_lam.plot(steps, [r["lambda"] for r in rows], color="tab:red", lw=0.8)
    ax_lam.set_ylabel("EMA λ", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(rows, path):
    """Mean accuracy per (strategy, coupling) series against mask ratio."""
    ok = [r for r in rows if r["status"] == "ok"]
    fig, ax = plt.subplots(figsize=(6, 4))
    series = sorted({(r["mask_strategy"], r["coupling"]) for r in ok})
    for strategy, coupling in series:
        pts = sorted((r["mask_ratio"], r["accuracy_mean"], r["accuracy_std"]) for r in ok
                     if r["mask_strategy"] == strategy and r["coupling"] == coupling)
        x, y, e = zip(*pts)
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=f"{strategy} / {coupling}")
    ax.set_xlabel("mask ratio")
    ax.set_ylabel("probe accuracy")
    if series:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_mask_trace(records, grid, path, max_rows=4):
    """Branch-1 mask, patch losses and the derived branch-2 mask, one row per trace step."""
    records = records[:max_rows]
    fig, axes = plt.subplots(len(records), 3, figsize=(7, 2.3 * len(records)), squeeze=False)
    for row, rec in zip(axes, records):
        for ax, data, title, cmap in (
            (row[0], rec.m1, f"m1 (step {rec.step})", "gray_r"),
            (row[1], rec.loss, "patch loss", "viridis"),
            (row[2], rec.m2, "m2", "gray_r"),
        ):
            ax.imshow(np.asarray(data, dtype=float).reshape(grid), cmap=cmap)
            ax.set_title(title, fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Figures written next to the CSV reports."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .budget import width_upper_bound  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    # fixed metadata so repeated runs write identical files
    "svg.hashsalt": "igcnet",
}


def _save(fig, path):
    meta = {"Software": None} if str(path).endswith(".png") else None
    fig.savefig(path, bbox_inches="tight", metadata=meta)
    plt.close(fig)


def plot_budget_report(report, path):
    """Width and parameter count against the number of primary partitions."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        L = [e.L for e in report.entries]
        ax.plot(L, [e.width for e in report.entries], "o-", label="width L*M")
        bound = width_upper_bound(report.target_params * (1 + report.tol_fraction), report.S)
        ax.axhline(bound, color="0.5", ls="--", lw=1, label="width bound")
        if report.entries:
            best = max(report.entries, key=lambda e: (e.width, -e.params, -e.L))
            ax.annotate(f"L={best.L}, M={best.M}", (best.L, best.width),
                        textcoords="offset points", xytext=(6, -12))
        ax.set_xscale("log", base=2)
        ax.set_xlabel("primary partitions L")
        ax.set_ylabel("width")
        ax.set_title(f"{report.block_type.upper()} blocks, ~{report.target_params} params, S={report.S}")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_history(history, path):
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
        ep = [r["epoch"] for r in history]
        ax1.plot(ep, [r["train_loss"] for r in history], "-o", ms=3)
        ax1.set_yscale("log")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("train loss")
        ax2.plot(ep, [r["train_acc"] for r in history], "-o", ms=3, label="train")
        ev = [r["eval_acc"] for r in history]
        if not np.all(np.isnan(ev)):
            ax2.plot(ep, ev, "-s", ms=3, label="eval")
        ax2.set_ylim(0, 1.02)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("accuracy")
        ax2.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_equivalence(rows, path):
    """Worst path-vs-dense error per check against its tolerance."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.4, 0.18 * len(rows)), 4.0))
        labels = [f"{r['check']} L{r['L']}M{r['M']}k{r['k']}" for r in rows]
        err = np.array([max(r["max_abs_error"], 1e-18) for r in rows])
        tol = np.array([r["tolerance"] for r in rows])
        x = np.arange(len(rows))
        ax.bar(x, err, color=["C0" if r["passed"] else "C3" for r in rows])
        ax.step(x, tol, where="mid", color="k", lw=1, label="tolerance")
        ax.set_yscale("log")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
        ax.set_ylabel("max |path - dense|")
        ax.legend(frameon=False)
        _save(fig, path)

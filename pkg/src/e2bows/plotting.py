"""Figure output for the threshold sweep report (file-only, Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def plot_sweep(rows, path, learned_beta=None):
    """Two-panel figure: mAP / NDCG and per-query touched postings against beta.

    ``rows`` is ``[(beta, RetrievalSummary), ...]`` as returned by
    ``threshold_sweep``.
    """
    betas = [b for b, _ in rows]
    with plt.rc_context(STYLE):
        fig, (ax_acc, ax_cost) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        ax_acc.plot(betas, [s.map for _, s in rows], "o-", label="mAP")
        ax_acc.plot(betas, [s.ndcg for _, s in rows], "s--", label="NDCG")
        ax_acc.set_xlabel(r"threshold $\beta$")
        ax_acc.set_ylabel("retrieval quality")
        ax_acc.set_ylim(0, 1.02)
        ax_acc.legend(frameon=False)

        ax_cost.plot(betas, [s.touched for _, s in rows], "o-", color="C2", label="touched / query")
        ax_cost.plot(betas, [s.ano for _, s in rows], "^:", color="C3", label="ANO")
        ax_cost.set_xlabel(r"threshold $\beta$")
        ax_cost.set_ylabel("posting entries")
        ax_cost.set_yscale("symlog", linthresh=1.0)
        ax_cost.legend(frameon=False)

        if learned_beta is not None:
            for ax in (ax_acc, ax_cost):
                ax.axvline(learned_beta, color="0.5", lw=0.8, ls="--")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path

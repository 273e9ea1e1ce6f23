"""Figure rendering from a campaign summary (metrics versus Tp and per-UE CDFs)."""

from pathlib import Path

import numpy as np

LABELS = {
    "jac-ep": "JAC-EP",
    "jacd-ep": "JACD-EP",
    "jacd-ep-bg": "JACD-EP-BG",
    "lmmse": "LMMSE",
    "lmmse-genie": "LMMSE (genie)",
    "mmse-genie-data": "MMSE (known data)",
}

STYLES = {
    "jac-ep": dict(color="tab:gray", marker="s"),
    "jacd-ep": dict(color="tab:blue", marker="o"),
    "jacd-ep-bg": dict(color="tab:red", marker="^"),
    "lmmse": dict(color="tab:green", marker="v", linestyle="--"),
    "lmmse-genie": dict(color="tab:olive", marker="d", linestyle=":"),
    "mmse-genie-data": dict(color="black", marker="x", linestyle=":"),
}

YLABELS = {"der": "DER", "nmse": "NMSE [dB]", "ser": "SER"}


def _values(seq):
    return np.array([np.nan if v is None else v for v in seq], dtype=float)


def _db(v):
    with np.errstate(divide="ignore", invalid="ignore"):
        return 10.0 * np.log10(v)


def _log_axis(set_scale, values):
    """Symmetric-log scale so that exact zeros stay visible below the smallest positive value."""
    v = np.concatenate([np.ravel(x) for x in values]) if values else np.array([])
    pos = v[np.isfinite(v) & (v > 0)]
    if pos.size:
        set_scale("symlog", linthresh=10.0 ** np.floor(np.log10(pos.min())), linscale=0.3)


def plot_versus_tp(summary: dict, ax_der, ax_nmse, ax_ser):
    for ax, key in ((ax_der, "fig4a"), (ax_nmse, "fig4b"), (ax_ser, "fig4c")):
        fig = summary[key]
        metric = fig["metric"]
        plotted = []
        for algo, s in fig["series"].items():
            v = _values(s["value"])
            if not np.isfinite(v).any():
                continue
            y = _db(v) if metric == "nmse" else v
            ax.plot(fig["tp"], y, label=LABELS.get(algo, algo), **STYLES.get(algo, {}))
            plotted.append(v)
        if metric != "nmse":
            _log_axis(ax.set_yscale, plotted)
        ax.set_xlabel("pilot length $T_p$")
        ax.set_ylabel(YLABELS[metric])
        ax.grid(True, which="both", alpha=0.3)


def plot_cdfs(summary: dict, ax_der, ax_nmse, ax_ser):
    for ax, key in ((ax_der, "fig5a"), (ax_nmse, "fig5b"), (ax_ser, "fig5c")):
        fig = summary[key]
        metric = fig["metric"]
        plotted = []
        for algo, s in fig["series"].items():
            x, f = _values(s["x"]), _values(s["cdf"])
            if metric == "nmse":
                x = _db(x)
            keep = np.isfinite(x)
            if not keep.any():
                continue
            x, f = np.r_[x[keep][0], x[keep]], np.r_[0.0, f[keep]]
            ax.step(x, f, where="post", label=LABELS.get(algo, algo), color=STYLES.get(algo, {}).get("color"))
            plotted.append(x)
        if metric != "nmse":
            _log_axis(ax.set_xscale, plotted)
        ax.set_xlabel(YLABELS[metric] + f" per UE ($T_p$={fig['tp']})")
        ax.set_ylabel("CDF")
        ax.set_ylim(0.0, 1.0)
        ax.grid(True, which="both", alpha=0.3)


def render_figures(summary: dict, out_dir) -> dict:
    """Write ``fig4.png`` (metrics versus Tp) and ``fig5.png`` (per-UE CDFs) into ``out_dir``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = {}
    for name, fn in (("fig4", plot_versus_tp), ("fig5", plot_cdfs)):
        fig, axes = plt.subplots(1, 3, figsize=(13, 3.8), constrained_layout=True)
        fn(summary, *axes)
        legend = {}
        for ax in axes:
            for h, lab in zip(*ax.get_legend_handles_labels()):
                legend.setdefault(lab, h)
        labels, handles = list(legend), list(legend.values())
        if handles:
            fig.legend(handles, labels, loc="outside lower center", ncol=len(labels), frameon=False)
        paths[name] = out_dir / f"{name}.png"
        fig.savefig(paths[name], dpi=120)
        plt.close(fig)
    return paths

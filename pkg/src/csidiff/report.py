"""Rate-distortion figures rendered next to the CSV tables."""
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (4.8, 3.4),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "svg.hashsalt": "csidiff",
}


def curves(points):
    """Group points by (codec, side info), each curve sorted by rate."""
    groups = defaultdict(list)
    for p in points:
        groups[(p.codec, p.side_info)].append(p)
    return {k: sorted(v, key=lambda p: p.rate_bits) for k, v in groups.items()}


def is_nonincreasing(curve, tol=0.0):
    return all(b.nmse_db <= a.nmse_db + tol for a, b in zip(curve, curve[1:]))


def plot_rd(points, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (codec, side), curve in sorted(curves(points).items()):
            label = f"{codec}{' + side info' if side else ''}"
            if len(curve) > 1:
                label += " (monotone)" if is_nonincreasing(curve) else " (non-monotone)"
            ax.plot([p.rate_bits for p in curve], [p.nmse_db for p in curve],
                    marker="o", label=label)
        ax.set_xlabel("rate [bits]")
        ax.set_ylabel("NMSE [dB]")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path

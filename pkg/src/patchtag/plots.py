"""Figure rendering for tagging and evaluation reports.

All figures go straight to files through the Agg backend so the CLI works
headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_ap_chart(per_class: dict[str, float], mean_value: float, path) -> str:
    """Horizontal bar chart of per-class AP with the mean marked."""
    names = list(per_class)
    values = [per_class[n] for n in names]
    height = max(2.5, 0.32 * len(names) + 1.2)
    fig, ax = plt.subplots(figsize=(8, height))
    ypos = range(len(names))
    ax.barh(ypos, values, color="#4878cf")
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("average precision")
    ax.axvline(mean_value, color="#d65f5f", linestyle="--",
               label=f"mAP = {mean_value:.4f}")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def render_tag_histogram(tag_counts: list[int], path) -> str:
    """Histogram of tags per image across a tagging run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    upper = max(tag_counts) if tag_counts else 1
    bins = [i - 0.5 for i in range(upper + 2)]
    ax.hist(tag_counts, bins=bins, color="#4878cf", edgecolor="white")
    ax.set_xlabel("tags per image")
    ax.set_ylabel("images")
    ax.set_xticks(range(upper + 1))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)

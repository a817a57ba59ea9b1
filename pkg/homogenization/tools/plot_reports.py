import matplotlib
matplotlib.use("Agg")
from matplotlib import pyplot as plt

from .write_files import _prepare


def plot_deviation_trace(trace, output_path, output_dir, title=None):
    """Median and 5-95% band of the deviation against fluid time, one curve per N."""
    path = _prepare(output_dir, output_path)
    fig = plt.figure(figsize=(10, 5))
    ax = fig.add_subplot(111)
    for N, group in trace.groupby("N"):
        by_time = group.groupby("fluid_time")["deviation"]
        med = by_time.median()
        ax.plot(med.index, med.values, label="N = {}".format(N))
        ax.fill_between(med.index, by_time.quantile(0.05).values, by_time.quantile(0.95).values, alpha=0.2)
    ax.set_xlabel("fluid time", fontsize=14)
    ax.set_ylabel("sup-norm deviation", fontsize=14)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_deviation_vs_N(frame, output_path, output_dir, column="deviation", tolerance=None):
    """Per-replica deviations against N on log axes, with the median line."""
    path = _prepare(output_dir, output_path)
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(111)
    ax.scatter(frame["N"], frame[column], s=6, alpha=0.4)
    med = frame.groupby("N")[column].median()
    ax.plot(med.index, med.values, marker="o", color="black", label="median")
    if tolerance is not None:
        ax.axhline(tolerance, linestyle="--", color="grey", label="tolerance")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N", fontsize=14)
    ax.set_ylabel(column, fontsize=14)
    ax.legend()
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path

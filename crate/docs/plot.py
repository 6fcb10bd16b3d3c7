"""Plots for the files written by `bifp`.

    python docs/plot.py sweep bifp-sweep.csv sweep.png
    python docs/plot.py tradeoff bifp-tradeoff.csv tradeoff.png
    python docs/plot.py iterations bifp-iterations.csv iterations.png
    python docs/plot.py interpolate bifp-interpolate.csv interpolate.png
    python docs/plot.py ablate bifp-ablate.csv ablate.png

Input may be CSV or JSON lines (by extension). Needs pandas and matplotlib.
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def load(path):
    if path.endswith((".jsonl", ".json")):
        return pd.read_json(path, lines=True)
    return pd.read_csv(path)


def ok_rows(df):
    if "error" in df:
        df = df[df["error"].isna()]
    return df


def sweep(df, ax):
    df = ok_rows(df)
    agg = df.groupby(["method", "sparsity"])[["acc_overall", "perf_gap"]].agg(["mean", "std"]).reset_index()
    for method, g in agg.groupby("method"):
        ax[0].errorbar(g["sparsity"], g[("acc_overall", "mean")], g[("acc_overall", "std")], label=method, capsize=2)
        ax[1].errorbar(g["sparsity"], g[("perf_gap", "mean")], g[("perf_gap", "std")], label=method, capsize=2)
    ax[0].set(xlabel="sparsity", ylabel="test accuracy")
    ax[1].set(xlabel="sparsity", ylabel="perf_gap")
    ax[1].legend()


def tradeoff(df, ax):
    agg = df.groupby(["method", "sparsity", "lambda"])[["acc", "perf_gap"]].mean().reset_index()
    for (method, s), g in agg.groupby(["method", "sparsity"]):
        ax[0].plot(g["perf_gap"], g["acc"], marker="o", label=f"{method} @ {s:.3f}")
        for _, r in g.iterrows():
            ax[0].annotate(f"{r['lambda']:g}", (r["perf_gap"], r["acc"]), fontsize=7)
    ax[0].set(xlabel="perf_gap", ylabel="test accuracy")
    ax[0].legend()


def iterations(df, ax):
    df = ok_rows(df)
    reached = df.dropna(subset=["iterations"])
    for method, g in reached.groupby("method"):
        ax[0].scatter(g["seed"], g["iterations"], label=method)
    ax[0].set(xlabel="seed", ylabel="iterations to target (missing = not reached)")
    ax[0].legend()


def interpolate(df, ax):
    agg = df.groupby(["method", "counterpart", "sparsity", "t"])[["loss", "fhat"]].mean().reset_index()
    for key, g in agg.groupby(["method", "counterpart", "sparsity"]):
        label = f"{key[0]} to {key[1]} @ {key[2]:.3f}"
        ax[0].plot(g["t"], g["loss"], marker="o", label=label)
        ax[1].plot(g["t"], g["fhat"], marker="o", label=label)
    ax[0].set(xlabel="t", ylabel="test loss")
    ax[1].set(xlabel="t", ylabel="surrogate gap")
    ax[0].legend()


def ablate(df, ax):
    df = ok_rows(df)
    agg = df.groupby(["variant", "sparsity"])[["acc_overall", "perf_gap"]].mean().reset_index()
    for variant, g in agg.groupby("variant"):
        ax[0].plot(g["sparsity"], g["acc_overall"], marker="o", label=variant)
        ax[1].plot(g["sparsity"], g["perf_gap"], marker="o", label=variant)
    ax[0].set(xlabel="sparsity", ylabel="test accuracy")
    ax[1].set(xlabel="sparsity", ylabel="perf_gap")
    ax[1].legend()


PLOTS = {"sweep": (sweep, 2), "tradeoff": (tradeoff, 1), "iterations": (iterations, 1),
         "interpolate": (interpolate, 2), "ablate": (ablate, 2)}


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("kind", choices=PLOTS)
    p.add_argument("input")
    p.add_argument("output")
    a = p.parse_args()
    draw, panels = PLOTS[a.kind]
    fig, ax = plt.subplots(1, panels, figsize=(5.5 * panels, 4), squeeze=False)
    draw(load(a.input), ax[0])
    fig.tight_layout()
    fig.savefig(a.output, dpi=120)


if __name__ == "__main__":
    main()

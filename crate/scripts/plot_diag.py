#!/usr/bin/env python3
"""Render panels from one or more `desklm diag` JSONL reports.

Usage:
    python3 scripts/plot_diag.py report.jsonl [more.jsonl ...] -o diag.png

Each report contributes one line per panel (labelled by file stem):
  (a) attention-logit kurtosis per layer
  (b) residual-stream kurtosis per layer
  (c) mean attention-sink mass per layer (averaged over heads)
  (d) max |attention logit| per layer
"""

import argparse
import json
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load(path):
    records = [json.loads(line) for line in pathlib.Path(path).read_text().splitlines() if line]
    out = {"kurtosis": {"attention_logits": {}, "residual_stream": {}}, "sink": {}, "maxlogit": {}}
    for r in records:
        kind = r.get("record")
        if kind == "kurtosis":
            out["kurtosis"][r["probe"]][r["layer"]] = r["kurtosis"]
        elif kind == "sink_mass":
            out["sink"].setdefault(r["layer"], []).append(r["mass"])
        elif kind == "max_abs_attn_logit":
            out["maxlogit"][r["layer"]] = r["value"]
    return out


def series(d):
    layers = sorted(d)
    return layers, [d[l] for l in layers]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("reports", nargs="+")
    ap.add_argument("-o", "--out", default="diag.png")
    args = ap.parse_args()

    fig, axes = plt.subplots(2, 2, figsize=(11, 7))
    panels = [
        ("attention-logit kurtosis", "kurtosis"),
        ("residual-stream kurtosis", "kurtosis"),
        ("attention-sink mass", "sink"),
        ("max |attention logit|", "maxlogit"),
    ]
    for path in args.reports:
        data = load(path)
        label = pathlib.Path(path).stem
        for ax, (title, _) in zip(axes.flat, panels):
            ax.set_title(title)
            ax.set_xlabel("layer")
        x, y = series(data["kurtosis"]["attention_logits"])
        axes[0, 0].plot(x, y, marker="o", label=label)
        x, y = series(data["kurtosis"]["residual_stream"])
        axes[0, 1].plot(x, y, marker="o", label=label)
        sink = {l: sum(v) / len(v) for l, v in data["sink"].items()}
        x, y = series(sink)
        axes[1, 0].plot(x, y, marker="o", label=label)
        x, y = series(data["maxlogit"])
        axes[1, 1].plot(x, y, marker="o", label=label)
    axes[0, 0].axhline(3.0, ls="--", lw=0.8, color="gray")  # normal reference
    for ax in axes.flat:
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, dpi=140)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()

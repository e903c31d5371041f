#!/usr/bin/env python3
"""Plot metrics CSVs written by `dba3c --out`.

    plot_metrics.py runs/eps_1e-3.csv runs/eps_1e-8.csv -o eps.png
    plot_metrics.py --check metrics.csv

One line per file. Top panel: score against wall time (evaluation score
where present, online score otherwise). Bottom panel: data points per second.
"""

import argparse
import csv
import os
import sys

COLUMNS = [
    "step",
    "wall_time_s",
    "dp_per_s",
    "online_score_mean",
    "eval_score_mean",
    "staleness_p50",
    "staleness_max",
    "drops",
    "tx_payload_bytes",
    "rx_payload_bytes",
]
INTS = {"step", "staleness_p50", "staleness_max", "drops", "tx_payload_bytes", "rx_payload_bytes"}


def parse_cell(name, text):
    if text == "":
        if name in ("online_score_mean", "eval_score_mean"):
            return None
        raise ValueError(f"empty {name}")
    return int(text) if name in INTS else float(text)


def load(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(COLUMNS):
                raise ValueError(f"{path}:{lineno}: {len(rec)} fields")
            try:
                rows.append({k: parse_cell(k, v) for k, v in zip(COLUMNS, rec)})
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    if not rows:
        raise ValueError(f"{path}: no rows")
    return rows


def plot(runs, output):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (top, bottom) = plt.subplots(2, 1, figsize=(8, 7), sharex=False)
    for label, rows in runs:
        evals = [(r["wall_time_s"], r["eval_score_mean"]) for r in rows if r["eval_score_mean"] is not None]
        online = [(r["wall_time_s"], r["online_score_mean"]) for r in rows if r["online_score_mean"] is not None]
        pts = evals or online
        if pts:
            kind = "eval" if evals else "online"
            top.plot(*zip(*pts), marker="o" if evals else None, label=f"{label} ({kind})")
        bottom.plot([r["step"] for r in rows], [r["dp_per_s"] for r in rows], label=label)
    top.set_xlabel("wall time (s)")
    top.set_ylabel("mean score")
    top.legend()
    bottom.set_xlabel("global step")
    bottom.set_ylabel("data points / s")
    bottom.legend()
    fig.tight_layout()
    fig.savefig(output)


def main(argv):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("csv", nargs="+")
    ap.add_argument("-o", "--output", default="metrics.png")
    ap.add_argument("--check", action="store_true", help="only validate the files")
    args = ap.parse_args(argv)

    try:
        runs = [(os.path.splitext(os.path.basename(p))[0], load(p)) for p in args.csv]
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for label, rows in runs:
        last = rows[-1]
        print(f"{label}: {len(rows)} rows, last step {last['step']}, wall {last['wall_time_s']:.1f}s")
    if not args.check:
        plot(runs, args.output)
        print(f"wrote {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))

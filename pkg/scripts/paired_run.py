"""Seed-matched BF16 vs FP8DPA training of FOG-opt at desk scale.

Defaults are the shape used by the acceptance suite: L=4, D=128, 2000
steps, batch 8 x 128 bytes on a >= 1 MB text corpus.
"""

import argparse
import json
from pathlib import Path

from fogdesk.compare import compare, format_report
from fogdesk.config import TrainConfig
from fogdesk.data import docstring_corpus

PAIRED_DEFAULTS = dict(arch="fog-opt", layers=4, hidden=128, total_steps=2000, batch_size=8, context=128)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/paired")
    ap.add_argument("--corpus", default=None, help="text file; default builds one from stdlib docstrings")
    ap.add_argument("--steps", type=int, default=PAIRED_DEFAULTS["total_steps"])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = args.corpus
    if corpus is None:
        corpus = out / "corpus.txt"
        if not corpus.exists():
            corpus.write_bytes(docstring_corpus())
    cfg = TrainConfig(**{**PAIRED_DEFAULTS, "total_steps": args.steps}, seed=args.seed, corpus=str(corpus))
    report = compare(cfg, out, log=lambda s: print(s, flush=True))
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(format_report(report))


if __name__ == "__main__":
    main()

"""Write a deterministic >= 1 MB English text corpus for desk-scale runs."""

import argparse
from pathlib import Path

from fogdesk.data import docstring_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", nargs="?", default="data/corpus.txt")
    ap.add_argument("--min-bytes", type=int, default=1_200_000)
    args = ap.parse_args()
    text = docstring_corpus(args.min_bytes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(text)
    print(f"wrote {len(text)} bytes to {out}")


if __name__ == "__main__":
    main()

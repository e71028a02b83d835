"""Command-line entry point: train, compare, diagnose, export, list-archs.

Exit codes: 0 completed, 1 usage or config error, 2 diverged, 3 internal error.
Training flags mirror the config keys (``--total-steps`` for ``total_steps``)
and take precedence over the config file, which takes precedence over the
built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import math
import sys
import traceback
from dataclasses import fields
from pathlib import Path

from fogdesk.checkpoint import CheckpointError, load_checkpoint
from fogdesk.config import ConfigError, TrainConfig, dump_config, parse_config_text, parse_value
from fogdesk.trainer import COMPLETED, DIVERGED, read_metrics

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_INTERNAL = 3

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# -- config resolution -------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    g = p.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="ov_" + f.name, metavar="VALUE", default=None)


def resolve_config(args) -> tuple[TrainConfig, dict, str]:
    """Merge defaults, the config file and flag overrides. Returns (config, overrides, file_text)."""
    text = ""
    values = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        values = parse_config_text(text)
    overrides = {}
    for f in fields(TrainConfig):
        raw = getattr(args, "ov_" + f.name, None)
        if raw is not None:
            overrides[f.name] = parse_value(f.name, raw)
    values.update(overrides)
    return TrainConfig.from_dict(values), overrides, text


def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(run_dir: Path, manifest: dict):
    tmp = run_dir / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(run_dir / MANIFEST)


# -- commands ------------------------------------------------------------------------


def cmd_train(args) -> int:
    from fogdesk.trainer import Trainer

    cfg, overrides, _ = resolve_config(args)
    if not Path(cfg.corpus).is_file():
        raise ConfigError(f"corpus {cfg.corpus!r} is not a readable file", "corpus")
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_text = dump_config(cfg)
    digest = git_blob_sha1(cfg_text.encode("utf-8"))
    manifest = {
        "run_id": f"{cfg.arch}-{cfg.precision}-s{cfg.seed}-{digest[:10]}",
        "config_path": args.config,
        "output_dir": str(run_dir),
        "config_hash": digest,
        "overrides": overrides,
        "resumed_from": args.resume,
        "started": _now(),
        "ended": None,
        "status": "running",
    }
    write_manifest(run_dir, manifest)
    log = None if args.quiet else (lambda s: print(s, flush=True))
    try:
        result = Trainer(cfg, run_dir, resume=args.resume).run(log=log)
        status = result.status
    except Exception:
        traceback.print_exc()
        status = "error"
    manifest.update(ended=_now(), status=status)
    write_manifest(run_dir, manifest)
    print(f"{status}: {run_dir}")
    return {COMPLETED: EXIT_OK, DIVERGED: EXIT_DIVERGED}.get(status, EXIT_INTERNAL)


def cmd_compare(args) -> int:
    from fogdesk.compare import compare, format_report

    cfg, _, _ = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else (lambda s: print(s, flush=True))
    report = compare(cfg, out, log=log)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = format_report(report)
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    if report["errors"]:
        return EXIT_INTERNAL
    if not report["all_completed"]:
        return EXIT_DIVERGED
    return EXIT_OK


def diagnose_rows(checkpoint, corpus_path, batch_size=None, context=None, batch_index=0) -> list[dict]:
    """Per-layer, per-probe kurtosis of a checkpointed model on one corpus batch."""
    from fogdesk.data import ByteCorpus
    from fogdesk.diagnostics import collect_probes
    from fogdesk.models import build_model

    meta, arrays = load_checkpoint(checkpoint)
    cfg = TrainConfig.from_dict(meta["config"])
    model = build_model(cfg.arch, cfg.model_config(), seed=cfg.seed)
    for k, p in model.params.items():
        p.data[...] = arrays[f"param:{k}"]
    for k in model.buffers:
        model.buffers[k][...] = arrays[f"buffer:{k}"]
    corpus = ByteCorpus(corpus_path, context or cfg.context, batch_size or cfg.batch_size, cfg.seed)
    inputs, _ = corpus.batch(batch_index)
    recs = collect_probes(model, inputs, step=meta["step"])
    return [{"probe": r.probe, "layer": r.layer, "kurtosis": r.value, "excluded": r.excluded}
            for r in recs if r.layer != "mean"]


def cmd_diagnose(args) -> int:
    rows = diagnose_rows(args.checkpoint, args.corpus, args.batch_size, args.context, args.batch_index)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".kurtosis.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["probe", "layer", "kurtosis", "excluded"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "kurtosis": "undefined" if r["kurtosis"] is None else repr(r["kurtosis"])})
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


SCALAR_SERIES = {"loss": "loss", "grad_norm": "grad_norm_preclip", "lr": "lr"}
CAST_SERIES = ("overflow", "underflow")


def series_names(layers: int) -> list[str]:
    from fogdesk.diagnostics import PROBES

    names = list(SCALAR_SERIES) + list(CAST_SERIES)
    for p in PROBES:
        names += [f"kurtosis.{p}.mean"] + [f"kurtosis.{p}.{i}" for i in range(layers)]
    return names


def extract_series(records: list[dict], name: str) -> list[tuple[int, float]]:
    """``(tokens, value)`` rows of a named series; undefined scalar values become NaN."""
    if name in SCALAR_SERIES:
        key = SCALAR_SERIES[name]
        return [(r["tokens"], math.nan if r.get(key) is None else r[key]) for r in records]
    if name in CAST_SERIES:
        return [(r["tokens"], r["casts"][name]) for r in records]
    parts = name.split(".")
    if len(parts) == 3 and parts[0] == "kurtosis":
        layer = parts[2] if parts[2] == "mean" else int(parts[2])
        out = []
        for r in records:
            for k in r.get("kurtosis", ()):
                if k["probe"] == parts[1] and k["layer"] == layer:
                    out.append((r["tokens"], math.nan if k["value"] is None else k["value"]))
        return out
    raise KeyError(name)


def cmd_export(args) -> int:
    run = Path(args.run_dir)
    records = read_metrics(run)
    cfg = TrainConfig.from_dict(parse_config_text((run / "config.txt").read_text(encoding="utf-8")))
    known = set(series_names(cfg.layers))
    unknown = [s for s in args.series if s not in known]
    if unknown:
        raise UsageError(f"unknown series {unknown}; available: {', '.join(sorted(known))}")
    out = Path(args.out) if args.out else run / "exports"
    out.mkdir(parents=True, exist_ok=True)
    for name in args.series:
        rows = extract_series(records, name)
        path = out / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["tokens", name])
            for t, v in rows:
                w.writerow([t, repr(float(v))])
        print(f"{name}: {len(rows)} rows -> {path}")
    return EXIT_OK


def cmd_list_archs(args) -> int:
    from fogdesk.models import ARCHITECTURES

    print(f"{'name':<20} {'input':<6} {'final':<9} {'pre':<9} {'post':<17} {'qk':<15} activation")
    for name, s in ARCHITECTURES.items():
        u = "1/sd" if s.inverse_sigma_input else "1"
        post = s.n_post + ("/sqrtL" if s.post_gain_inv_sqrt_layers else "")
        print(f"{name:<20} {u:<6} {s.n_final:<9} {s.n_pre:<9} {post:<17} {s.n_qk:<15} {s.activation}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fogdesk", description="Desk-scale FP8 training experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="seed-matched bf16 vs fp8dpa runs")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("diagnose", help="per-layer kurtosis of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--out", help="CSV path (default: next to the checkpoint)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--context", type=int)
    p.add_argument("--batch-index", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("export", help="plot-ready CSV series from a run")
    p.add_argument("run_dir")
    p.add_argument("series", nargs="+", help="e.g. loss grad_norm kurtosis.qkv.mean")
    p.add_argument("--out", help="output directory (default: RUN_DIR/exports)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("list-archs", help="print the architecture table")
    p.set_defaults(func=cmd_list_archs)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as e:
        where = f" (key {e.key!r})" if e.key else ""
        print(f"config error{where}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

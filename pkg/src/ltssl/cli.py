"""Command line entry point and experiment grids.

    ltssl generate-data --config exp.cfg --out data/
    ltssl train --config exp.cfg [--out runs/] [--stop-at N]
    ltssl resume --checkpoint runs/<run-id>/checkpoints/latest.json [--iterations N]
    ltssl ablate --config exp.cfg [--out runs/] [--jobs N]
    ltssl compare --config exp.cfg [--out runs/] [--jobs N]
    ltssl dump-features --checkpoint <file> [--out dir]
    ltssl show-config [--config exp.cfg]

The output root defaults to ``$LTSSL_OUT_DIR`` or ``./runs``.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ConfigError, config_hash, parse_config, replace, run_id, schema_doc, serialize_config
from .dataset import write_bundle
from .metrics import dump_unlabeled_features
from .model import forward
from .msp import prototypes
from .trainer import generate_data, load_checkpoint, load_data, resume_run, train_run

log = logging.getLogger("ltssl")

# (row, use_rp, use_lctr, use_mp), in the order of the ablation table
ABLATION_ROWS = [
    (0, False, False, False),
    (1, False, True, False),
    (2, False, True, True),
    (3, True, False, False),
    (4, True, True, False),
    (5, True, True, True),
]

COMPARE_MODES = ("supervised", "fixmatch", "crmsp")

SUMMARY_COLUMNS = [
    "cell", "mode", "use_rp", "use_lctr", "use_mp", "n_seeds", "n_ok", "n_failed",
    "macro_f1_mean", "macro_f1_std", "accuracy_mean", "accuracy_std",
    "test_tail_recall_mean", "test_tail_recall_std",
    "pl_tail_recall_mean", "pl_tail_recall_std", "pl_mask_in_rate_mean", "errors",
]


def default_out_dir():
    return os.environ.get("LTSSL_OUT_DIR", "runs")


def ablation_cells(cfg):
    return [
        (f"row{row}", replace(cfg, mode="crmsp", use_rp=rp, use_lctr=lc, use_mp=mp))
        for row, rp, lc, mp in ABLATION_ROWS
    ]


def compare_cells(cfg):
    return [(mode, replace(cfg, mode=mode)) for mode in COMPARE_MODES]


def _run_cell(args):
    cfg, out_dir = args
    try:
        result = train_run(cfg, out_dir=out_dir)
    except Exception as exc:  # a broken cell must not stop the grid
        log.exception("run %s failed", run_id(cfg))
        return {"ok": False, "run_id": run_id(cfg), "error": f"{type(exc).__name__}: {exc}"}
    tail = result.tail
    pl = result.pseudo_report
    return {
        "ok": True,
        "run_id": run_id(cfg),
        "macro_f1": 100.0 * result.report.macro_f1,
        "accuracy": 100.0 * result.report.accuracy,
        "test_tail_recall": 100.0 * float(result.report.recall[tail].mean()),
        "pl_tail_recall": 100.0 * pl.tail_recall if pl is not None else 0.0,
        "pl_mask_in_rate": pl.mask_in_rate if pl is not None else 0.0,
    }


def run_grid(cells, seeds, out_dir, jobs=1):
    """Run every (cell, seed) pair; returns per-cell summary dicts in cell order."""
    tasks = []
    for name, cfg in cells:
        for seed in seeds:
            tasks.append((name, replace(cfg, seed=seed)))
    args = [(cfg, out_dir) for _, cfg in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, args))
    else:
        results = [_run_cell(a) for a in args]
    summary = []
    for name, cfg in cells:
        rows = [r for (n, _), r in zip(tasks, results) if n == name]
        summary.append(_summarize(name, cfg, rows))
    return summary, [(n, c, r) for (n, c), r in zip(tasks, results)]


def _summarize(name, cfg, rows):
    ok = [r for r in rows if r["ok"]]
    rp, lc, mp = cfg.effective_flags()
    out = {
        "cell": name, "mode": cfg.mode, "use_rp": rp, "use_lctr": lc, "use_mp": mp,
        "n_seeds": len(rows), "n_ok": len(ok), "n_failed": len(rows) - len(ok),
        "errors": "; ".join(r["error"] for r in rows if not r["ok"]),
    }
    for key in ("macro_f1", "accuracy", "test_tail_recall", "pl_tail_recall"):
        vals = np.array([r[key] for r in ok])
        out[f"{key}_mean"] = float(vals.mean()) if len(vals) else float("nan")
        out[f"{key}_std"] = float(vals.std()) if len(vals) else float("nan")
    vals = np.array([r["pl_mask_in_rate"] for r in ok])
    out["pl_mask_in_rate_mean"] = float(vals.mean()) if len(vals) else float("nan")
    return out


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def summary_csv(summary):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in summary:
        w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def summary_table(summary):
    lines = [f"{'cell':<12}{'RP':>4}{'Lctr':>6}{'MP':>4}  {'macro-F1':>16}  {'PL tail recall':>16}  {'ok':>5}"]
    for r in summary:
        lines.append(
            f"{r['cell']:<12}{'x' if r['use_rp'] else '':>4}{'x' if r['use_lctr'] else '':>6}"
            f"{'x' if r['use_mp'] else '':>4}  "
            f"{r['macro_f1_mean']:>8.2f} ± {r['macro_f1_std']:<5.2f}  "
            f"{r['pl_tail_recall_mean']:>8.2f} ± {r['pl_tail_recall_std']:<5.2f}  "
            f"{r['n_ok']:>2}/{r['n_seeds']}"
        )
    return "\n".join(lines) + "\n"


def run_compare(cfg, cells, out_dir, jobs=1, config_path=None):
    """Run a grid and write manifest.json, summary.csv and summary.txt under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    summary, runs = run_grid(cells, cfg.seeds, out_dir, jobs=jobs)
    manifest = {
        "config_echo": serialize_config(cfg),
        "config_hash": config_hash(cfg),
        "config_path": config_path,
        "dataset": cfg.data_dir or "generated",
        "out_dir": out_dir,
        "seeds": cfg.seeds,
        "runs": [{"cell": n, "seed": c.seed, "run_id": r["run_id"], "ok": r["ok"]} for n, c, r in runs],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write(summary_csv(summary))
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(summary_table(summary))
    return summary


def dump_features(checkpoint_path, out_dir=None, sample=64):
    """Prototypes, a sample of bank contents and teacher features of unlabeled data, as TSV."""
    state, cfg = load_checkpoint(checkpoint_path)
    if out_dir is None:
        out_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(checkpoint_path))), "features")
    os.makedirs(out_dir, exist_ok=True)
    protos = prototypes(state.bank)
    with open(os.path.join(out_dir, "prototypes.tsv"), "w") as fh:
        for c in range(cfg.num_classes):
            fh.write("\t".join([str(c), "1" if protos.valid[c] else "0"]
                               + [repr(float(v)) for v in protos.vectors[c]]) + "\n")
    with open(os.path.join(out_dir, "bank.tsv"), "w") as fh:
        for c in range(cfg.num_classes):
            q = state.bank.queue(c)[-sample:]
            for row in q:
                fh.write("\t".join([str(c)] + [repr(float(v)) for v in row]) + "\n")
    data = load_data(cfg)
    z = forward(state.ema.shadow, data.unlabeled.features).z
    dump_unlabeled_features(os.path.join(out_dir, "unlabeled_features.tsv"), z, data.unlabeled)
    return out_dir


def _error(kind, message, code, **extra):
    rec = {"error": kind, "message": message}
    rec.update({k: v for k, v in extra.items() if v is not None})
    print("error: " + json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="ltssl", description="Long-tailed semi-supervised learning lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a dataset bundle")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--stop-at", type=int, default=None, help="stop early, leaving a resumable checkpoint")

    r = sub.add_parser("resume", help="continue a run from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--iterations", type=int, default=None)

    for name, text in (("ablate", "run the six-row ablation grid"),
                       ("compare", "supervised vs fixmatch vs crmsp over seeds")):
        a = sub.add_parser(name, help=text)
        a.add_argument("--config", required=True)
        a.add_argument("--out", default=None)
        a.add_argument("--jobs", type=int, default=1)

    d = sub.add_parser("dump-features", help="export prototypes and features as TSV")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", default=None)
    d.add_argument("--sample", type=int, default=64)

    s = sub.add_parser("show-config", help="print the resolved config (or the schema)")
    s.add_argument("--config", default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "show-config":
            if args.config:
                print(serialize_config(parse_config(args.config)), end="")
            else:
                print(schema_doc())
            return 0
        if args.command == "generate-data":
            cfg = parse_config(args.config)
            data = generate_data(cfg)
            write_bundle(args.out, cfg.data, data.mixture, data.labeled, data.unlabeled, data.test,
                         extra={"config_hash": config_hash(cfg), "separation": cfg.separation,
                                "data_seed": cfg.dataset_seed()})
            print(args.out)
            return 0
        if args.command == "train":
            cfg = parse_config(args.config)
            res = train_run(cfg, out_dir=args.out or default_out_dir(), stop_at=args.stop_at)
            print(f"{res.run_dir}\tstep={res.state.t}\tmacro_f1={res.report.macro_f1:.4f}"
                  f"\taccuracy={res.report.accuracy:.4f}")
            return 0
        if args.command == "resume":
            res = resume_run(args.checkpoint, iterations=args.iterations)
            print(f"{res.run_dir}\tstep={res.state.t}\tmacro_f1={res.report.macro_f1:.4f}"
                  f"\taccuracy={res.report.accuracy:.4f}")
            return 0
        if args.command in ("ablate", "compare"):
            cfg = parse_config(args.config)
            cells = ablation_cells(cfg) if args.command == "ablate" else compare_cells(cfg)
            out = args.out or os.path.join(default_out_dir(), f"{args.command}-{config_hash(cfg)}")
            summary = run_compare(cfg, cells, out, jobs=args.jobs, config_path=args.config)
            print(summary_table(summary), end="")
            failed = sum(r["n_failed"] for r in summary)
            return 0 if failed == 0 else 3
        if args.command == "dump-features":
            print(dump_features(args.checkpoint, args.out, args.sample))
            return 0
    except ConfigError as exc:
        return _error("config", str(exc), 2, key=exc.key, line=exc.line)
    except FileNotFoundError as exc:
        return _error("io", str(exc), 2)
    except (ValueError, KeyError) as exc:
        return _error("invalid", str(exc), 1)
    return 1


if __name__ == "__main__":
    sys.exit(main())

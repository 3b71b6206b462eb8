"""Command line entry point: ``hardmetric {gen-data,train,eval,ablate,report}``.

Exit codes: 0 success, 2 usage/configuration, 3 numeric failure, 4 I/O.
``HM_THREADS`` caps BLAS threads (default 1, for bitwise reproducibility).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from . import config, data, evaluation, trainer
from .errors import HardMetricError, UsageError

log = logging.getLogger("hardmetric")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path, command, config_echo, dataset_path, artifacts, started):
    manifest = {
        "command": command,
        "config": config_echo,
        "dataset_sha256": file_digest(dataset_path) if dataset_path else None,
        "artifacts": [str(a) for a in artifacts],
        "wall_clock_seconds": round(time.time() - started, 3),
        "git_describe": _git_describe(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _input_file(path, what):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_dataset(path):
    return data.load(_input_file(path, "dataset file"))


def cmd_gen_data(args):
    started = time.time()
    spec = config.load_dataset_spec(_input_file(args.spec, "spec file") if args.spec else None, args.set)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save(data.generate(spec), out)
    digest = file_digest(out)
    print(digest)
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", spec.to_dict(), out, [out], started)
    return EXIT_OK


def _train_config(args):
    overrides = list(args.set or [])
    if args.iters is not None:
        overrides.append(f"total_iters={args.iters}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return config.load_train_config(_input_file(args.config, "config file"), overrides)


def cmd_train(args):
    started = time.time()
    cfg = _train_config(args)
    dataset = _load_dataset(args.dataset)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume, saved_cfg = trainer.load_checkpoint(_input_file(args.resume, "checkpoint"))
        if saved_cfg != cfg:
            raise UsageError("checkpoint was written with a different configuration")
    state, runlog = trainer.run(cfg, dataset, resume=resume, checkpoint_dir=out)
    ckpt = trainer.save_checkpoint(out / "checkpoint.hmck", state, cfg)
    log_path = runlog.to_csv(out / "runlog.csv")
    cfg_path = config.dump_yaml(cfg.to_dict(), out / "config.yaml")
    artifacts = [ckpt, log_path, cfg_path] + sorted(out.glob("checkpoint_*.hmck"))
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), args.dataset, artifacts, started)
    if runlog.records:
        print(f"t={runlog.records[-1]['t']} loss_total={runlog.records[-1]['loss_total']:.6f}")
    return EXIT_OK


def _protocol(args):
    return evaluation.EvalProtocol(
        gallery_seqs=tuple(int(s) for s in args.gallery_seqs.split(",")),
        exclude_identical_view=not args.include_identical_view,
        self_retrieval=args.self_retrieval,
    )


def cmd_eval(args):
    started = time.time()
    state, cfg = trainer.load_checkpoint(_input_file(args.checkpoint, "checkpoint"))
    dataset = _load_dataset(args.dataset)
    table = evaluation.evaluate(state.params, dataset, _protocol(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = table.to_csv(out)
    print(text, end="")
    print(f"grand mean rank-1: {table.grand_mean:.1f}")
    write_manifest(out.with_name(out.name + ".manifest.json"), "eval", cfg.to_dict(), args.dataset, [out], started)
    return EXIT_OK


_CELL_FILES = {"baseline": "baseline", "+D": "plus_drpl", "+G": "plus_gsam", "++": "plus_both"}


def cmd_ablate(args):
    started = time.time()
    cfg = _train_config(args)
    dataset = _load_dataset(args.dataset)
    test = _load_dataset(args.test_dataset) if args.test_dataset else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluation.ablation_report(dataset, cfg, _protocol(args), test_dataset=test)
    artifacts = []
    for name, table in report.tables.items():
        artifacts.append(out / f"{_CELL_FILES[name]}.csv")
        table.to_csv(artifacts[-1])
    artifacts.append(out / "comparison.csv")
    print(report.to_csv(artifacts[-1]), end="")
    artifacts.append(report.plot(out / "ablation.svg"))
    write_manifest(out / "manifest.json", "ablate", cfg.to_dict(), args.dataset, artifacts, started)
    return EXIT_OK


def _plot_runlog(runlog, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = runlog.column("t")
    with matplotlib.rc_context({"svg.hashsalt": "hardmetric", "svg.fonttype": "path"}):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=True)
        for name in ("loss_total", "loss_ba", "loss_bh", "loss_gsam_ce", "loss_gsam_var"):
            ax1.plot(t, runlog.column(name), label=name, linewidth=0.8)
        ax1.set_yscale("symlog", linthresh=1e-3)
        ax1.legend(fontsize="small")
        for name in ("delta_t", "s_t", "gamma_t"):
            ax2.plot(t, runlog.column(name), label=name)
        ax2.set_xlabel("iteration")
        ax2.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return path


def cmd_report(args):
    """Summarize a train or ablate output directory into report.md (+ SVG plots)."""
    started = time.time()
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    lines, artifacts = [f"# Report for `{run_dir}`", ""], []
    runlog_path = run_dir / "runlog.csv"
    if runlog_path.is_file():
        runlog = trainer.RunLog.from_csv(runlog_path)
        artifacts.append(_plot_runlog(runlog, run_dir / "loss_curves.svg"))
        first, last = runlog.records[0], runlog.records[-1]
        lines += ["## Training", "", "| t | loss_total | loss_ba | loss_bh | gsam_ce | gsam_var |", "|---|---|---|---|---|---|"]
        for r in (first, last):
            lines.append(f"| {r['t']} | {r['loss_total']:.5f} | {r['loss_ba']:.5f} | {r['loss_bh']:.5f} "
                         f"| {r['loss_gsam_ce']:.5f} | {r['loss_gsam_var']:.5f} |")
        lines += ["", "![losses](loss_curves.svg)", ""]
    comparison = run_dir / "comparison.csv"
    if comparison.is_file():
        rows = [line.split(",") for line in comparison.read_text().splitlines()]
        lines += ["## Ablation (rank-1 %, per-condition means)", "", "| " + " | ".join(rows[0]) + " |",
                  "|" + "---|" * len(rows[0])]
        for row in rows[1:]:
            lines.append("| " + " | ".join([row[0]] + [f"{float(x):.1f}" for x in row[1:]]) + " |")
        lines += ["", "![ablation](ablation.svg)", ""]
    if len(lines) == 2:
        raise UsageError(f"{run_dir} holds neither runlog.csv nor comparison.csv")
    report = run_dir / "report.md"
    report.write_text("\n".join(lines))
    artifacts.append(report)
    print(report)
    write_manifest(run_dir / "report.manifest.json", "report", None, None, artifacts, started)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hardmetric", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("spec", nargs="?", help="dataset spec YAML (defaults apply when omitted)")
    p.add_argument("out")
    overrides(p)
    p.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("train", cmd_train, "train one configuration"),
                              ("ablate", cmd_ablate, "train and evaluate the four toggle cells")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("dataset")
        p.add_argument("out_dir")
        p.add_argument("--iters", type=int)
        p.add_argument("--seed", type=int)
        overrides(p)
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--resume", metavar="CHECKPOINT")
        else:
            p.add_argument("--test-dataset", help="evaluate on this (held-out) dataset instead")
            _protocol_flags(p)

    p = sub.add_parser("eval", help="rank-1 evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("out")
    _protocol_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize a train/ablate output directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def _protocol_flags(p):
    p.add_argument("--include-identical-view", action="store_true", help="do not exclude same-view gallery entries")
    p.add_argument("--self-retrieval", action="store_true", help="sanity mode: gallery = probe set")
    p.add_argument("--gallery-seqs", default="0", help="comma-separated Base sequence indices forming the gallery")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = int(os.environ.get("HM_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except HardMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

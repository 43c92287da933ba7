"""Command-line front end: ``hqb <command> [--config F] [--set k=v ...] [--out DIR]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as X
from .attacks import poison_dataset
from .gradcheck import run_gradcheck
from .io import (CheckpointError, ConfigError, FormatError, load_checkpoint, parse_config, read_results,
                 save_checkpoint, write_ppm, write_raw_images, write_results)
from .metrics import EvalReport

log = logging.getLogger("hqbackdoor")

PRESETS = {
    # CIFAR-10 at 16x16, DeskCNN, 4 qubits x 2 layers, p = 0.1, target 0, Qcolor
    "paper-desk": "dataset.kind = cifar10_bin\n",
    # file-free variant for smoke runs
    "synthetic-desk": "dataset.kind = synthetic\ndataset.n_train = 3000\ndataset.n_test = 600\n",
}

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _seeds(cfg) -> list:
    return [cfg["seed"] + k for k in range(cfg["runs.n_seeds"])]


class Run:
    """Output directory plus the bookkeeping that ends up in ``manifest.json``."""

    def __init__(self, command: str, cfg, out: Path, extra: dict):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.extra = extra
        self.artifacts: dict = {}
        self.started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts[name] = p
        return p

    def csv(self, name: str, rows, columns=None) -> None:
        write_results(rows, self.path(name), columns)

    def input_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.command.encode())
        h.update(self.cfg.to_text().encode())
        h.update(json.dumps(self.extra, sort_keys=True).encode())
        return h.hexdigest()

    def finish(self, status: str) -> None:
        (self.out / "config.txt").write_text(self.cfg.to_text())
        manifest = dict(
            command=self.command, status=status, input_hash=self.input_hash(), inputs=self.extra,
            config=self.cfg.to_text().splitlines(),
            artifacts={k: dict(path=str(v.relative_to(self.out)), sha256=_sha256(v))
                       for k, v in sorted(self.artifacts.items()) if v.exists()},
            # wall-clock fields differ between reruns; everything else is deterministic
            timestamps=dict(started=self.started, finished=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())),
        )
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def _model_or_train(run: Run, args, train_set, test_set, spec):
    if args.model:
        model, _, _ = load_checkpoint(args.model)
        return model
    cfg, seed = run.cfg, run.cfg["seed"]
    poisoned = poison_dataset(train_set, spec, X.poison_config(cfg, seed))
    model = X.fit_model(X.model_arch(cfg, train_set.image_shape, train_set.n_classes), poisoned, cfg, seed)
    save_checkpoint(model, model.optim_state, _meta(run, data_hash=train_set.content_hash()), run.path("backdoor.qbckpt"))
    return model


def _meta(run: Run, report: EvalReport | None = None, data_hash: str = "") -> dict:
    meta = dict(seed=run.cfg["seed"], poison_rate=run.cfg["poison.rate"], target=run.cfg["poison.target"],
                trigger=run.cfg["trigger.kind"])
    if data_hash:
        meta["dataset_hash"] = data_hash
    if report is not None:
        meta["report"] = report.row()
    return meta


def cmd_train(run: Run, args) -> int:
    cfg = run.cfg
    train_set, test_set = X.load_data(cfg)
    spec = X.trigger_spec(cfg, train_set.image_shape)
    clean, backdoor, report = X.train_clean_and_backdoor(cfg, train_set, test_set, spec, cfg["seed"])
    h = train_set.content_hash()
    save_checkpoint(clean, clean.optim_state, _meta(run, data_hash=h), run.path("clean.qbckpt"))
    if not args.clean:
        save_checkpoint(backdoor, backdoor.optim_state, _meta(run, report, h), run.path("backdoor.qbckpt"))
    run.csv("report.csv", [report.row()], EvalReport.COLUMNS)
    log.info("CA %.2f BA %.2f ASR %.2f SSIM %.4f", report.ca, report.ba, report.asr, report.mean_ssim)
    return 0


def cmd_poison(run: Run, args) -> int:
    cfg = run.cfg
    train_set, _ = X.load_data(cfg)
    spec = X.trigger_spec(cfg, train_set.image_shape)
    poisoned = poison_dataset(train_set, spec, X.poison_config(cfg, cfg["seed"]))
    write_raw_images(poisoned.images, run.path("poisoned_images.raw"))
    rows = [dict(index=i, label=int(lab), poisoned=bool(m), source_index=int(s))
            for i, (lab, m, s) in enumerate(zip(poisoned.labels, poisoned.poison_mask, poisoned.source_index))]
    run.csv("poisoned_labels.csv", rows, ["index", "label", "poisoned", "source_index"])
    for k, i in enumerate(np.flatnonzero(poisoned.poison_mask)[:args.previews]):
        original = train_set.images[poisoned.source_index[i]]
        write_ppm(np.concatenate([original, poisoned.images[i]], axis=2), run.path(f"previews/{k:03d}.ppm"), scale=4)
    return 0


def cmd_nsga(run: Run, args) -> int:
    cfg = run.cfg
    train_set, test_set = X.load_data(cfg)
    result = X.run_nsga(cfg, train_set, test_set, cfg["seed"])
    cols = ["generation", "r1", "r2", "r3", "f1", "f2", "rank", "crowding"]
    run.csv("population.csv", result.records, cols)
    front = sorted(result.front, key=lambda ind: ind.fitness)
    run.csv("pareto.csv", [dict(r1=i.genes[0], r2=i.genes[1], r3=i.genes[2], f1=i.fitness[0], f2=i.fitness[1])
                           for i in front], ["r1", "r2", "r3", "f1", "f2"])
    b = result.best
    run.csv("best.csv", [dict(r1=b.genes[0], r2=b.genes[1], r3=b.genes[2], f1=b.fitness[0], f2=b.fitness[1])])
    return 0


def cmd_sweep(run: Run, args) -> int:
    cfg = run.cfg
    train_set, test_set = X.load_data(cfg)
    run.csv("sweep.csv", X.run_sweep(cfg, train_set, test_set, _seeds(cfg)), EvalReport.COLUMNS)
    return 0


def cmd_compare_heads(run: Run, args) -> int:
    cfg = run.cfg
    train_set, test_set = X.load_data(cfg)
    rows, comps = X.compare_heads(cfg, train_set, test_set, _seeds(cfg))
    run.csv("heads.csv", rows, ["seed", "trigger", "head", "p", "ba", "asr"])
    run.csv("heads_comparison.csv", comps,
            ["seed", "trigger", "asr_quantum", "asr_classical", "quantum_le_classical"])
    return 0


def cmd_defend(run: Run, args) -> int:
    cfg = run.cfg
    train_set, test_set = X.load_data(cfg)
    spec = X.trigger_spec(cfg, train_set.image_shape)
    model = _model_or_train(run, args, train_set, test_set, spec)
    if args.method == "strip":
        res = X.run_strip(cfg, model, test_set, spec, cfg["seed"])
        run.csv("strip.csv", res.rows(), ["sample_id", "set", "entropy"])
        run.csv("strip_summary.csv", [dict(threshold=res.threshold, far=res.far, frr=res.frr)])
        log.info("STRIP threshold %.4f FAR %.3f FRR %.3f", res.threshold, res.far, res.frr)
    elif args.method == "cleanse":
        rows = X.run_cleanse(cfg, model, test_set, cfg["seed"])
        rows = [{"class": r["label"], "l1": r["l1"], "anomaly_index": r["anomaly_index"], "flagged": r["flagged"]}
                for r in rows]
        run.csv("cleanse.csv", rows, ["class", "l1", "anomaly_index", "flagged"])
    else:
        run.csv("prune.csv", X.run_prune(cfg, model, test_set, spec), ["rate", "ba", "asr"])
    return 0


def cmd_bounds(run: Run, args) -> int:
    cfg = run.cfg
    train_set, test_set = X.load_data(cfg)
    spec = X.trigger_spec(cfg, train_set.image_shape)
    model = _model_or_train(run, args, train_set, test_set, spec)
    rows = X.run_bounds(cfg, model, train_set, test_set, spec, cfg["seed"])
    run.csv("bounds.csv", rows, ["quantity", "value", "B", "m", "conf_delta", "L_t", "trig_delta", "z_norm",
                                 "train_err", "eps", "c"])
    return 0


def cmd_gradcheck(run: Run, args) -> int:
    cfg = run.cfg
    rows = run_gradcheck(cfg["gradcheck.h"], cfg["gradcheck.tol"], cfg["seed"])
    run.csv("gradcheck.csv", [r.row() for r in rows], ["target", "input", "max_rel_err", "passed"])
    worst = max(rows, key=lambda r: r.max_rel_err)
    failed = [r for r in rows if not r.passed]
    print(f"gradcheck: {len(rows) - len(failed)}/{len(rows)} passed; worst {worst.target}/{worst.input} "
          f"rel-err {worst.max_rel_err:.3e}")
    return 1 if failed else 0


def aggregate_reports(directories) -> list:
    """Every EvalReport-shaped CSV row found below ``directories``, tagged with its file."""
    rows = []
    for d in directories:
        for path in sorted(Path(d).rglob("*.csv")):
            if path.name == "report_all.csv":
                continue
            data = read_results(path)
            if data and set(EvalReport.COLUMNS) <= set(data[0]):
                rows.extend(dict({k: r[k] for k in EvalReport.COLUMNS}, source=str(path.relative_to(d)))
                            for r in data)
    return rows


def cmd_report(run: Run, args) -> int:
    dirs = args.inputs or [run.out]
    run.csv("report_all.csv", aggregate_reports(dirs), list(EvalReport.COLUMNS) + ["source"])
    return 0


HANDLERS = {
    "train": cmd_train, "poison": cmd_poison, "nsga": cmd_nsga, "sweep": cmd_sweep,
    "compare-heads": cmd_compare_heads, "defend": cmd_defend, "bounds": cmd_bounds,
    "gradcheck": cmd_gradcheck, "report": cmd_report,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (default: the chosen preset)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="paper-desk")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--out", help="output directory (default: output.dir from the config)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, help="cap BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hqb", description="Backdoor experiments on hybrid quantum-classical models.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train clean and backdoored models")
    p.add_argument("--clean", action="store_true", help="only keep the clean checkpoint")
    p = sub.add_parser("poison", parents=[common], help="write a poisoned training set and previews")
    p.add_argument("--previews", type=int, default=8)
    sub.add_parser("nsga", parents=[common], help="search Qcolor ratios with NSGA-II")
    sub.add_parser("sweep", parents=[common], help="patch size x poison rate grid")
    sub.add_parser("compare-heads", parents=[common], help="quantum head vs classical twin under weak triggers")
    p = sub.add_parser("defend", parents=[common], help="run a defense against a backdoored model")
    p.add_argument("method", choices=("strip", "cleanse", "prune"))
    p.add_argument("--model", help="checkpoint to defend (default: train one from the config)")
    p = sub.add_parser("bounds", parents=[common], help="generalisation bound terms and COMP tails")
    p.add_argument("--model", help="checkpoint to analyse (default: train one from the config)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    p = sub.add_parser("report", parents=[common], help="aggregate EvalReport CSVs")
    p.add_argument("inputs", nargs="*", help="directories to scan (default: --out)")
    return parser


def _resolve_config(args):
    if args.config:
        path = Path(args.config)
        try:
            cfg = parse_config(path.read_text())
        except ConfigError as exc:
            raise ConfigError(exc.line, f"{path}: {str(exc).split(': ', 1)[1]}") from None
    else:
        cfg = parse_config(PRESETS[args.preset])
    if args.overrides:
        cfg = cfg.with_overrides(args.overrides)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed = {args.seed}"])
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"hqb: config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    extra = {k: v for k, v in vars(args).items()
             if k in ("clean", "previews", "method", "inputs")}
    if getattr(args, "model", None):
        extra["model_sha256"] = _sha256(args.model)
    run = Run(args.command, cfg, out, extra)
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    try:
        code = HANDLERS[args.command](run, args)
    except (ValueError, OSError, FormatError, CheckpointError, FloatingPointError) as exc:
        print(f"hqb {args.command}: {exc}", file=sys.stderr)
        run.finish("error")
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()
    run.finish("ok" if code == 0 else "failed")
    return code


if __name__ == "__main__":
    sys.exit(main())

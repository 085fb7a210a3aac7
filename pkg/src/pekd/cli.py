"""``pekd`` command line: data generation, training, evaluation, protocol and analyses.

Every command prints its effective configuration as a ``# config`` banner;
passing that JSON back through ``--config`` reproduces the run. Flags win
over the config file. Exit codes: 0 success, 1 usage, 2 data or format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysiskit, checkpoint, synthdata, trainkit
from . import peft as peftlib
from .config import Config, ConfigError
from .metrics import MetricsFormatError, MetricsWriter, read_file

log = logging.getLogger("pekd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ---------------------------------------------------------------------


def _config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    return cfg


def _banner(cfg: Config, out=None, **extra) -> None:
    out = out or sys.stdout
    out.write(f"# config {cfg.dumps()}\n")
    if extra:
        out.write(f"# args {json.dumps(extra, sort_keys=True)}\n")


def _check_target(path, force: bool) -> None:
    if Path(path).exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")


def _open_out(path, force: bool):
    if path is None or path == "-":
        return sys.stdout, False
    _check_target(path, force)
    return open(path, "w", encoding="utf-8"), True


def _data_config(cfg: Config, ds: synthdata.Dataset) -> Config:
    """Adopt the dataset's own generator settings and the input shapes they imply."""
    d = cfg.to_dict()
    spec = ds.spec
    d["data"] = spec.to_dict()
    d["encoder"].update(m=spec.m, d_v=spec.d_v, n=spec.n_tokens, vocab=spec.vocab)
    return Config.from_dict(d)


def _part(cfg: Config, ds: synthdata.Dataset, name: str, split_id: int = 0) -> synthdata.Dataset:
    if name == "all":
        return ds
    parts = synthdata.split(ds, cfg.split, split_id).parts()
    if name not in parts:
        raise UsageError(f"unknown data part {name!r}; choose all or one of {sorted(parts)}")
    return ds.subset(parts[name])


def _report_row(report: trainkit.RunReport, **extra) -> dict:
    """Deterministic summary fields; wall-clock time goes to the log instead."""
    row = {
        "name": report.name,
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
        "best_epoch": report.best_epoch,
        "valid_accuracy": report.valid_accuracy,
        "errors_0": report.class_errors[0],
        "errors_1": report.class_errors[1],
        "student_only_0": report.student_only_errors[0],
        "student_only_1": report.student_only_errors[1],
        "trainable_params": report.trainable_params,
    }
    log.info("%s took %.1fs", report.name, report.wall_clock)
    row.update(report.tags)
    row.update(extra)
    return row


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    _check_target(args.out, args.force)
    if args.shift is not None:
        if args.base is None:
            raise UsageError("--shift needs --base (the dataset whose attributes are remapped)")
        base_spec = synthdata.load(args.base).spec
        ds = synthdata.shifted_testset(
            base_spec, args.shift, seed=args.seed, n_examples=args.n if args.n is not None else base_spec.n_examples
        )
        cfg = _data_config(cfg, ds)
    else:
        if args.base is not None:
            raise UsageError("--base is only meaningful with --shift")
        changes = {}
        if args.n is not None:
            changes["n_examples"] = args.n
        if args.seed is not None:
            changes["seed"] = args.seed
        cfg = cfg.override("data", **changes)
        ds = synthdata.generate(cfg.data)
    _banner(cfg, out=sys.stdout)
    digest = synthdata.save(ds, args.out)
    c0, c1 = ds.class_counts()
    MetricsWriter(sys.stdout).write("data", path=str(args.out), examples=len(ds), class_0=c0, class_1=c1, sha256=digest)
    return EXIT_OK


def _load_base(cfg: Config, args) -> dict:
    if args.base:
        return checkpoint.model_from_blocks(checkpoint.read_blocks(args.base)).state_dict()
    log.info("no --base given: pretraining a base model")
    state, _ = trainkit.build_base(cfg.encoder, cfg.data, cfg.train, cfg.pretrain)
    return state


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.override("train", seed=args.seed)
    if args.data:
        cfg = _data_config(cfg, synthdata.load(args.data))
    _check_target(args.out, args.force)
    _banner(cfg)
    state, report = trainkit.build_base(cfg.encoder, cfg.data, cfg.train, cfg.pretrain)
    model = trainkit.model_from_state(cfg.encoder, state, seed=cfg.train.seed)
    digest = checkpoint.save_model(model, args.out)
    MetricsWriter(sys.stdout).write("run", **_report_row(report, sha256=digest))
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.override("train", seed=args.seed)
    ds = synthdata.load(args.data)
    cfg = _data_config(cfg, ds)
    _check_target(args.out, args.force)
    _banner(cfg, base=args.base)
    base = _load_base(cfg, args)
    model = trainkit.model_from_state(cfg.encoder, base, seed=cfg.train.seed)
    parts = synthdata.split(ds, cfg.split, 0)
    _, report = trainkit.train_teacher(
        model, ds.subset(parts.teacher_train), ds.subset(parts.valid_teacher), cfg.train, ds.subset(parts.test)
    )
    digest = checkpoint.save_model(model, args.out, base_state=base)
    MetricsWriter(sys.stdout).write("run", **_report_row(report, sha256=digest))
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = _config(args)
    if args.kd == "off" and args.gate is not None:
        log.warning("--kd off: ignoring --gate %s", args.gate)
    gate = "off" if args.kd == "off" else (args.gate or cfg.gate.mode)
    ds = synthdata.load(args.data)
    cfg = _data_config(cfg, ds)
    _check_target(args.out, args.force)
    _banner(cfg, peft=args.peft, gate=gate, split=args.split, seed=args.seed)
    blocks = checkpoint.read_blocks(args.teacher)
    teacher = checkpoint.model_from_blocks(blocks)
    if teacher.attachment is not None:
        raise checkpoint.CheckpointError("teacher checkpoint carries a PEFT attachment")
    base = checkpoint.base_state(blocks)
    if base is None:
        raise checkpoint.CheckpointError("teacher checkpoint has no base weights to build a student on")
    if teacher.config != cfg.encoder:
        raise checkpoint.CheckpointError("teacher checkpoint does not match the encoder config")
    student = trainkit.model_from_state(cfg.encoder, base)
    peftlib.attach(student, args.peft, cfg.peft.for_variant(args.peft), seed=args.seed)
    parts = synthdata.split(ds, cfg.split, args.split)
    train_cfg = replace(cfg.train, seed=cfg.train.seed + args.seed)
    policy = trainkit.policy_for(gate, cfg.gate.temperature)
    if gate != "off":
        policy = replace(policy, batch_gate=cfg.gate.batch_gate)
    _, report = trainkit.train_student(
        student,
        teacher,
        ds.subset(parts.student_train),
        ds.subset(parts.valid_student),
        train_cfg,
        policy,
        ds.subset(parts.test),
    )
    digest = checkpoint.save_model(student, args.out)
    MetricsWriter(sys.stdout).write(
        "run", **_report_row(report, gate=gate, split=args.split, seed=args.seed, sha256=digest)
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ds = synthdata.load(args.data)
    cfg = _data_config(cfg, ds)
    model = checkpoint.load_model(args.model)
    data = _part(cfg, ds, args.part, args.split)
    if args.limit is not None:
        data = data.subset(np.arange(min(args.limit, len(data))))
    teacher_preds = None
    if args.teacher:
        teacher_preds = trainkit.predict(checkpoint.load_model(args.teacher), data).argmax(axis=1)
    tag = args.tag or Path(args.model).stem
    fh, close = _open_out(args.out, args.force)
    try:
        _banner(cfg, out=fh, model=str(args.model), part=args.part, tag=tag)
        res = trainkit.evaluate(model, data, teacher_preds)
        w = MetricsWriter(fh)
        w.write("run", name=tag, accuracy=res.accuracy, macro_f1=res.macro_f1, examples=len(data))
        w.write_many("example", res.records())
    finally:
        if close:
            fh.close()
    if args.dump_activations:
        _check_target(args.dump_activations, args.force)
        analysiskit.save_dump(analysiskit.dump_activations(model, data, tag), args.dump_activations)
    if args.export_embeddings:
        efh, eclose = _open_out(args.export_embeddings, args.force)
        try:
            MetricsWriter(efh).write_many("embedding", analysiskit.export_embeddings(model, data, tag))
        finally:
            if eclose:
                efh.close()
    return EXIT_OK


def write_protocol(result: trainkit.ProtocolResult, cfg: Config, fh) -> None:
    w = MetricsWriter(fh)
    w.header(f"config {cfg.dumps()}")
    w.header("std: population standard deviation (ddof=0) over the listed runs")
    w.header("delta: (with - without) mean accuracy / macro-F1 in percentage points")
    w.write("run", **_report_row(result.base))
    w.write("run", **_report_row(result.teacher))
    for row in result.runs:
        w.write("run", name="student", **row)
    w.write_many("aggregate", result.aggregates)
    w.write_many("delta", result.deltas)


def cmd_protocol(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
    _banner(cfg)
    p = cfg.protocol
    result = trainkit.run_protocol(
        cfg.data,
        cfg.split,
        cfg.encoder,
        cfg.train,
        cfg.pretrain,
        {v: cfg.peft.for_variant(v) for v in peftlib.VARIANTS},
        variants=p.variants,
        gates=p.gates,
        trials=p.trials,
        temperature=cfg.gate.temperature,
        workers=args.workers,
        keep_states=args.checkpoints,
    )
    out.mkdir(parents=True, exist_ok=True)
    teacher = trainkit.model_from_state(cfg.encoder, result.teacher_state)
    checkpoint.save_model(teacher, out / "teacher.pekd", base_state=result.base_state)
    for (variant, gate, split_id, trial), trained in result.student_states.items():
        run_dir = out / "runs" / f"{variant}-{gate}-split{split_id}-trial{trial}"
        run_dir.mkdir(parents=True, exist_ok=True)
        student = trainkit.student_from_state(
            cfg.encoder, result.base_state, variant, trained, cfg.peft.for_variant(variant)
        )
        checkpoint.save_model(student, run_dir / "student.pekd")
    with open(out / "protocol.tsv", "w", encoding="utf-8") as fh:
        write_protocol(result, cfg, fh)
    with open(out / "timing.tsv", "w", encoding="utf-8") as fh:
        MetricsWriter(fh).write_many("diag", result.timings)
    w = MetricsWriter(sys.stdout)
    w.write_many("aggregate", result.aggregates)
    w.write_many("delta", result.deltas)
    return EXIT_OK


def cmd_analyze(args) -> int:
    fh, close = _open_out(args.out, args.force)
    try:
        w = MetricsWriter(fh)
        if args.analysis == "cca":
            t, s = analysiskit.load_dump(args.teacher), analysiskit.load_dump(args.student)
            w.write_many("cca", analysiskit.cca_profile(t, s, args.ridge))
        elif args.analysis == "errors":
            student = read_file(args.student, "example")
            teacher = read_file(args.teacher, "example")
            w.write_many("errors", analysiskit.error_breakdown(student, teacher))
        elif args.analysis == "gate-curve":
            recs = read_file(args.records, "example")
            p1 = np.array([r["p1"] for r in recs], dtype=np.float64)
            probs = np.stack([1.0 - p1, p1], axis=1)
            w.write_many("gate", [{"confidence": c, "weight": g} for c, g in analysiskit.gate_curve(probs)])
        elif args.analysis == "confidence":
            w.header(f"quartiles: {analysiskit.QUARTILE_METHOD} interpolation between order statistics")
            w.write_many("confidence", analysiskit.confidence_stats(read_file(args.records, "example")))
    finally:
        if close:
            fh.close()
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pekd", description="Entropy-gated distillation into PEFT students on a synthetic incongruity task.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, force=True):
        if config:
            sp.add_argument("--config", help="JSON config file (see the printed banner for the schema)")
        if force:
            sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    g = sub.add_parser("gen-data", help="write a synthetic dataset file")
    g.add_argument("--out", required=True, help="dataset path to write")
    g.add_argument("--n", type=int, help="number of examples (default from config)")
    g.add_argument("--seed", type=int, help="generator seed (default from config)")
    g.add_argument("--shift", type=float, help="write a shifted evaluation set; needs --base")
    g.add_argument("--base", help="dataset whose generator settings the shifted set starts from")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    pr = sub.add_parser("pretrain", help="pretrain the shared base encoder on scene attributes")
    pr.add_argument("--out", required=True, help="checkpoint path to write")
    pr.add_argument("--data", help="dataset whose generator settings to use (default from config)")
    pr.add_argument("--seed", type=int, help="training seed")
    common(pr)
    pr.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train-teacher", help="fully fine-tune the teacher on the teacher split")
    t.add_argument("--data", required=True, help="dataset file")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--base", help="base checkpoint to start from (default: pretrain one now)")
    t.add_argument("--seed", type=int, help="training seed")
    common(t)
    t.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train-student", help="train a PEFT student with optional gated distillation")
    s.add_argument("--data", required=True, help="dataset file")
    s.add_argument("--teacher", required=True, help="teacher checkpoint (carries the base weights)")
    s.add_argument("--peft", required=True, choices=peftlib.VARIANTS, help="PEFT variant")
    s.add_argument("--kd", choices=("on", "off"), default="on", help="distill from the teacher")
    s.add_argument("--gate", choices=("entropy", "hard", "none"), help="KD weighting (default from config)")
    s.add_argument("--split", type=int, default=0, help="few-shot split id")
    s.add_argument("--seed", type=int, default=0, help="trial seed (PEFT init and batch order)")
    s.add_argument("--out", required=True, help="checkpoint path to write")
    common(s)
    s.set_defaults(func=cmd_train_student)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write per-example records")
    e.add_argument("--model", required=True, help="checkpoint to evaluate")
    e.add_argument("--data", required=True, help="dataset file")
    e.add_argument("--part", default="test", help="all, test, teacher_train, valid_teacher, student_train or valid_student")
    e.add_argument("--split", type=int, default=0, help="few-shot split id used to resolve --part")
    e.add_argument("--limit", type=int, help="evaluate only the first N examples of the part")
    e.add_argument("--teacher", help="teacher checkpoint; adds teacher predictions to the records")
    e.add_argument("--tag", help="model tag for records and dumps (default: checkpoint file stem)")
    e.add_argument("--out", help="metrics file (default stdout)")
    e.add_argument("--dump-activations", help="write pooled per-layer activations here")
    e.add_argument("--export-embeddings", help="write per-example logit records here")
    common(e)
    e.set_defaults(func=cmd_eval)

    pp = sub.add_parser("protocol", help="run the full variant x gate x split x trial grid")
    pp.add_argument("--out", required=True, help="output directory")
    pp.add_argument("--workers", type=int, help="parallel runs (default: PEKD_THREADS or 1)")
    pp.add_argument("--checkpoints", action="store_true", help="also write one student checkpoint per run")
    common(pp)
    pp.set_defaults(func=cmd_protocol)

    a = sub.add_parser("analyze", help="teacher/student analyses over dumped records")
    asub = a.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    c = asub.add_parser("cca", help="layer-wise mean CCA between two aligned activation dumps")
    c.add_argument("--teacher", required=True, help="teacher activation dump")
    c.add_argument("--student", required=True, help="student activation dump")
    c.add_argument("--ridge", type=float, default=1e-6, help="covariance ridge")
    er = asub.add_parser("errors", help="per-class student errors and student-only errors")
    er.add_argument("--student", required=True, help="student eval records")
    er.add_argument("--teacher", required=True, help="teacher eval records")
    gc = asub.add_parser("gate-curve", help="teacher confidence vs KD weight pairs")
    gc.add_argument("--records", required=True, help="teacher eval records")
    cf = asub.add_parser("confidence", help="per-class quartiles of predicted-class probability")
    cf.add_argument("--records", required=True, help="eval records")
    for sp in (c, er, gc, cf):
        sp.add_argument("--out", help="metrics file (default stdout)")
        sp.add_argument("--force", action="store_true", help="overwrite an existing --out")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except trainkit.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        synthdata.DataFormatError,
        checkpoint.CheckpointError,
        MetricsFormatError,
        ConfigError,
        FileExistsError,
        FileNotFoundError,
        IsADirectoryError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

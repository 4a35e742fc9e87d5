"""Command-line entry point: ``crseg <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import SETTINGS, ExperimentConfig


def _config(path) -> ExperimentConfig:
    return ExperimentConfig.from_file(path) if path else ExperimentConfig()


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected H,W,D")
    return tuple(parts)


def cmd_phantom(args):
    from .phantom import PhantomConfig, generate_cohort, truth_dir, write_cohort

    cfg = PhantomConfig(grid_size=args.size, num_frames=args.frames, num_subjects=args.subjects,
                        label_fraction=args.label_fraction, motion_amplitude=args.motion,
                        noise_sigma=args.noise, seed=args.seed)
    write_cohort(generate_cohort(cfg), args.out)
    print(f"wrote {args.subjects} subjects to {args.out} (dense ground truth in {truth_dir(args.out)})")


def _overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {k: v for k, v in (("setting", getattr(args, "setting", None)), ("fold", args.fold),
                                 ("seed", getattr(args, "seed", None)), ("out_dir", args.out),
                                 ("data_dir", args.data)) if v is not None}
    return cfg.with_(**changes)


def cmd_train(args):
    from .trainer import train

    result = train(_overrides(_config(args.config), args))
    print(f"best checkpoint {result.best_checkpoint} (validation Dice {result.best_val_dice:.4f})")


def cmd_train_reg(args):
    from .trainer import train_registration

    print(train_registration(_overrides(_config(args.config), args)))


def cmd_sweep(args):
    from .trainer import sweep

    lams = [float(v) for v in args.lambda0.split(",")]
    out = sweep(_overrides(_config(args.config), args), lams)
    print(f"best lambda0 = {out['best_lambda0']:g}")


def cmd_eval(args):
    from .evaluation import export_logits, score_series, write_scores
    from .models import load_checkpoint
    from .volume import load_cohort

    net, payload = load_checkpoint(args.checkpoint)
    series = load_cohort(args.data)
    subjects = None
    if args.subjects == "test" and "config" in payload:
        from .trainer import fold_split

        cfg = ExperimentConfig.from_dict(payload["config"])
        subjects = set(fold_split(cfg, series).test_subjects)
    chosen = [s for s in series if subjects is None or s.subject_id in subjects]
    setting = args.setting or payload.get("setting", "")
    scores = [score_series(net, s, setting, args.level) for s in chosen]
    out = Path(args.out)
    write_scores(out / "scores.csv", scores)
    if args.export_logits:
        for s in chosen:
            export_logits(net, s, out / "logits" / s.subject_id)
    print(f"scored {len(scores)} subjects -> {out / 'scores.csv'}")


def cmd_report(args):
    from .report import build_report, collect_scores

    res = build_report(collect_scores(args.runs), args.out)
    print((Path(args.out) / "table2.txt").read_text())
    if res["table1"]:
        print((Path(args.out) / "table1.txt").read_text())


def cmd_plot(args):
    from .report import emit_plots

    emit_plots(args.report, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic data")
    phs = ph.add_subparsers(dest="action", required=True)
    g = phs.add_parser("generate")
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int, default=10)
    g.add_argument("--frames", type=int, default=30)
    g.add_argument("--size", type=_triple, default=(32, 32, 32))
    g.add_argument("--label-fraction", type=float, default=0.1)
    g.add_argument("--motion", type=float, default=2.0)
    g.add_argument("--noise", type=float, default=0.03)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_phantom)

    def run_args(sp, setting=False, seed=False):
        sp.add_argument("--config")
        sp.add_argument("--fold", type=int)
        sp.add_argument("--out")
        sp.add_argument("--data")
        if setting:
            sp.add_argument("--setting", choices=SETTINGS)
        if seed:
            sp.add_argument("--seed", type=int)

    t = sub.add_parser("train")
    run_args(t, setting=True, seed=True)
    t.set_defaults(func=cmd_train)
    r = sub.add_parser("train-reg")
    run_args(r, seed=True)
    r.set_defaults(func=cmd_train_reg)
    s = sub.add_parser("sweep")
    run_args(s, setting=True, seed=True)
    s.add_argument("--lambda0", default="0.01,0.001,0.0001")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--export-logits", action="store_true")
    e.add_argument("--subjects", choices=("test", "all"), default="test")
    e.add_argument("--setting")
    e.add_argument("--level", default="all")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report")
    rp.add_argument("--runs", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    pl = sub.add_parser("plot")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: generate, train, explain, evaluate, baseline, sweep, loso, render.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .diffcore import ContractError
from .evaluate import (easy_peasi, lambda_sweep, loso_study, removal_feed_in,
                       removal_feed_in_instance, threshold_split, write_report)
from .explainer import (ExplainerConfig, NumericError, explain_epochs, group_saliency, load_saliency,
                        save_saliency, write_traces)
from .models import ModelConfig, TrainHyperparams, build_model, load_model, save_model, train_model
from .spectral import make_partition
from .synthdata import SynthConfig, compute_clusters, config_dict, generate_dataset, load_dataset, save_dataset
from .textio import LoadError, config_hash, dumps

log = logging.getLogger("freqmask")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument plumbing -------------------------------------------------------------
def _common(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="flat key=value file; flags override it")
    p.add_argument("--out-dir", default="out")
    opts = {
        "model": dict(default=None, help="model checkpoint"),
        "dataset": dict(default=None, help="dataset file"),
        "lambda": dict(type=float, default=0.05, dest="lam", help="target alignment weight"),
        "bands": dict(type=int, default=10, help="mask length (bands per channel)"),
        "epochs": dict(type=int, default=None, help="training epochs or mask-search epochs"),
        "patience": dict(type=int, default=10),
        "lr": dict(type=float, default=None, help="learning rate"),
    }
    for n in names:
        p.add_argument(f"--{n}", **opts[n])


def _explainer_flags(p):
    _common(p, "model", "dataset", "lambda", "bands", "epochs", "patience", "lr")
    p.add_argument("--no-regularizers", action="store_true")
    p.add_argument("--one-branch", action="store_true")
    p.add_argument("--limit", type=int, default=None, help="number of epochs to explain (seeded choice)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="freqmask", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _common(p, "bands")
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--per-class", type=int, default=80, help="epochs per subject per class")
    p.add_argument("--channels", type=int, default=8)

    p = sub.add_parser("train", help="train a classifier on a dataset")
    _common(p, "dataset", "epochs", "lr")
    p.add_argument("--arch", choices=("mini_cnn", "mlp"), default="mini_cnn")

    p = sub.add_parser("explain", help="learn instance masks and the group map")
    _explainer_flags(p)

    p = sub.add_parser("evaluate", help="removal and feed-in game for a saliency map")
    _common(p, "model", "dataset", "bands")
    p.add_argument("--map", default=None, help="group saliency map file")
    p.add_argument("--maps-dir", default=None, help="directory of instance maps (instance level)")

    p = sub.add_parser("baseline", help="easyPEASI single-cell noise baseline")
    _common(p, "model", "dataset", "bands")

    p = sub.add_parser("sweep", help="lambda sensitivity sweep")
    _explainer_flags(p)
    p.add_argument("--lambdas", default="0,0.0005,0.005,0.05,0.5", help="comma-separated values")

    p = sub.add_parser("loso", help="leave-one-subject-out study")
    _explainer_flags(p)
    p.add_argument("--train-epochs", type=int, default=100)
    p.add_argument("--train-lr", type=float, default=1e-3)

    p = sub.add_parser("render", help="saliency map to plain-text PGM")
    p.add_argument("map_file")
    p.add_argument("out_file")
    return ap


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise LoadError(path, f"cannot read config ({exc.strerror})") from exc
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    aliases = {"lambda": "lam"}
    values = {}
    for key, raw in read_config_file(args.config).items():
        dest = aliases.get(key, key)
        if dest not in actions or dest in ("help", "config"):
            raise UsageError(f"{args.config}: unknown key {key!r} for '{args.command}'")
        act = actions[dest]
        if isinstance(act, argparse._StoreTrueAction):  # noqa: SLF001
            values[dest] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                values[dest] = act.type(raw) if act.type else raw
            except ValueError as exc:
                raise UsageError(f"{args.config}: bad value for {key!r}: {raw!r}") from exc
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _echo(out: Path, args: argparse.Namespace) -> None:
    skip = {"out_dir", "config", "verbose"}
    lines = [f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip and v is not None]
    (out / "run_config.txt").write_text("\n".join(lines) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise LoadError(out, f"cannot create output directory ({exc.strerror})") from exc
    _echo(out, args)
    return out


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"{args.command}: --{n.replace('_', '-')} is required")


def _explainer_config(args) -> ExplainerConfig:
    kw = dict(lam=args.lam, num_bands=args.bands, patience=args.patience,
              regularizers_enabled=not args.no_regularizers, one_branch_mode=args.one_branch)
    if args.epochs is not None:
        kw["max_epochs"] = args.epochs
    if args.lr is not None:
        kw["learning_rate"] = args.lr
    try:
        return ExplainerConfig(**kw)
    except ContractError as exc:
        raise UsageError(str(exc)) from exc


def _select(epochs, limit, seed):
    if limit is None:
        return list(range(len(epochs)))
    if limit < 1:
        raise UsageError("--limit must be at least 1 (nothing to explain)")
    if limit >= len(epochs):
        return list(range(len(epochs)))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(len(epochs), limit, replace=False))


# -- commands ---------------------------------------------------------------------
def cmd_generate(args) -> None:
    if args.subjects < 2:
        raise UsageError("--subjects must be at least 2 (leave-one-subject-out needs two)")
    if args.per_class < 1 or args.channels < 2:
        raise UsageError("--per-class must be >= 1 and --channels >= 2")
    cfg = SynthConfig(n_channels=args.channels, num_bands=args.bands)
    out = _out_dir(args)
    epochs, truth = generate_dataset(args.seed, args.subjects, args.per_class, cfg)
    save_dataset(out / "dataset.jsonl", epochs, truth)
    (out / "synth_config.jsonl").write_text(dumps({"record": "synth_config", **config_dict(cfg)}) + "\n")
    labels = np.array([e.label for e in epochs])
    print(f"subjects={args.subjects} epochs={len(epochs)} class0={int((labels == 0).sum())} "
          f"class1={int((labels == 1).sum())} -> {out / 'dataset.jsonl'}")


def cmd_train(args) -> None:
    _need(args, "dataset")
    epochs, _ = load_dataset(args.dataset)
    Ch, T = epochs[0].data.shape
    out = _out_dir(args)
    hyper = TrainHyperparams(learning_rate=args.lr if args.lr is not None else 1e-3,
                             epochs=args.epochs if args.epochs is not None else 100, seed=args.seed)
    model = build_model(ModelConfig(architecture=args.arch, n_channels=Ch, n_samples=T, seed=args.seed))
    train_model(model, epochs, hyper)
    save_model(out / "model.ckpt", model)
    print(f"train_accuracy={model.metadata['train_accuracy']:.4f} -> {out / 'model.ckpt'}")


def cmd_explain(args) -> None:
    _need(args, "model", "dataset")
    cfg = _explainer_config(args)
    model = load_model(args.model)
    epochs, _ = load_dataset(args.dataset)
    chosen = _select(epochs, args.limit, args.seed)
    out = _out_dir(args)
    exps = explain_epochs(model, [epochs[i] for i in chosen], compute_clusters(epochs), cfg, seed=args.seed)
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    for i, e in zip(chosen, exps):
        e.saliency.epoch_ids = [i]
        e.saliency.meta.update(epoch_id=i, label=epochs[i].label, subject_id=epochs[i].subject_id)
        save_saliency(maps_dir / f"instance_{i:05d}.jsonl", e.saliency)
    gmap = group_saliency([e.saliency for e in exps])
    gmap.meta.update(seed=args.seed, config_hash=cfg.hash())
    save_saliency(out / "group_map.jsonl", gmap)
    write_traces(out / "traces.jsonl", exps)
    print(f"explained {len(exps)} epochs -> {out / 'group_map.jsonl'}")


def cmd_evaluate(args) -> None:
    _need(args, "model", "dataset")
    if (args.map is None) == (args.maps_dir is None):
        raise UsageError("evaluate: give exactly one of --map or --maps-dir")
    model = load_model(args.model)
    epochs, _ = load_dataset(args.dataset)
    part = make_partition(epochs[0].data.shape[-1], args.bands)
    out = _out_dir(args)
    if args.map is not None:
        sal = load_saliency(args.map)
        report = removal_feed_in(model, epochs, threshold_split(sal), part)
        chash = sal.meta.get("config_hash", config_hash({"map": str(Path(args.map).name)}))
    else:
        files = sorted(Path(args.maps_dir).glob("instance_*.jsonl"))
        if not files:
            raise LoadError(args.maps_dir, "no instance_*.jsonl maps found")
        maps = [load_saliency(f) for f in files]
        ids = []
        for f, m in zip(files, maps):
            if not m.epoch_ids or not 0 <= m.epoch_ids[0] < len(epochs):
                raise LoadError(f, "field 'epoch_ids' does not index the dataset")
            ids.append(m.epoch_ids[0])
        report = removal_feed_in_instance(model, [epochs[i] for i in ids], maps, part)
        chash = maps[0].meta.get("config_hash", "")
    write_report(out / "report.csv", report, args.seed, chash)
    print(f"Ori={report.accuracy_original:.4f} RN={report.accuracy_remove_nonsalient:.4f} "
          f"RS={report.accuracy_remove_salient:.4f} -> {out / 'report.csv'}")


def cmd_baseline(args) -> None:
    _need(args, "model", "dataset")
    model = load_model(args.model)
    epochs, _ = load_dataset(args.dataset)
    part = make_partition(epochs[0].data.shape[-1], args.bands)
    out = _out_dir(args)
    drops = easy_peasi(model, epochs, part, noise_seed=args.seed)
    (out / "easypeasi_drops.jsonl").write_text(
        dumps({"record": "easypeasi_drops", "shape": list(drops.shape), "seed": args.seed, "values": drops}) + "\n")
    report = removal_feed_in(model, epochs, threshold_split(drops), part)
    write_report(out / "report.csv", report, args.seed, config_hash({"method": "easypeasi", "bands": args.bands}))
    print(f"max drop={drops.max():.4f} RN={report.accuracy_remove_nonsalient:.4f} "
          f"RS={report.accuracy_remove_salient:.4f} -> {out / 'report.csv'}")


def _parse_lambdas(text: str) -> list[float]:
    try:
        vals = [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--lambdas: {exc}") from exc
    if not vals or any(v < 0 for v in vals):
        raise UsageError("--lambdas needs one or more non-negative values")
    return vals


def cmd_sweep(args) -> None:
    _need(args, "model", "dataset")
    cfg = _explainer_config(args)
    lambdas = _parse_lambdas(args.lambdas)
    model = load_model(args.model)
    epochs, _ = load_dataset(args.dataset)
    chosen = [epochs[i] for i in _select(epochs, args.limit, args.seed)]
    out = _out_dir(args)
    rows = lambda_sweep(model, epochs, compute_clusters(epochs), lambdas, args.seed, cfg, explain_set=chosen)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("lambda", "kde_score", "rs_drop", "rn_drop", "n_epochs", "seed", "config_hash"))
        for r in rows:
            w.writerow((format(r.lam, ".17g"), format(r.kde_score, ".17g"), format(r.rs_drop, ".17g"),
                        format(r.rn_drop, ".17g"), r.report.n_epochs, args.seed, cfg.hash()))
    for r in rows:
        print(f"lambda={r.lam:g} kde={r.kde_score:.3f} rs_drop={r.rs_drop:.3f}")


def cmd_loso(args) -> None:
    _need(args, "dataset")
    cfg = _explainer_config(args)
    epochs, _ = load_dataset(args.dataset)
    Ch, T = epochs[0].data.shape
    out = _out_dir(args)
    if args.limit is not None and args.limit < 1:
        raise UsageError("--limit must be at least 1")
    res = loso_study(epochs, ModelConfig(n_channels=Ch, n_samples=T, seed=args.seed),
                     TrainHyperparams(learning_rate=args.train_lr, epochs=args.train_epochs, seed=args.seed),
                     cfg, seed=args.seed, max_explained=args.limit)
    with open(out / "loso.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("held_out_subject", "ori", "rn", "rs", "rn_drop", "rs_drop", "n_epochs", "seed", "config_hash"))
        for s in res.splits:
            r = s.report
            w.writerow((s.subject, *(format(v, ".17g") for v in (r.accuracy_original, r.accuracy_remove_nonsalient,
                                                                 r.accuracy_remove_salient, r.rn_drop, r.rs_drop)),
                        r.n_epochs, args.seed, cfg.hash()))
            save_saliency(out / f"group_map_sub{s.subject}.jsonl", s.group_map)
    save_saliency(out / "unseen_map.jsonl", res.unseen_map)
    for s in res.splits:
        print(f"subject {s.subject}: Ori={s.report.accuracy_original:.3f} "
              f"RN={s.report.accuracy_remove_nonsalient:.3f} RS={s.report.accuracy_remove_salient:.3f}")


def render_pgm(values: np.ndarray) -> str:
    """Plain P2 graymap, channels as rows; 0 -> 0 and 1 -> 255 with halves rounded up."""
    v = np.asarray(values, dtype=np.float64)
    px = np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(int)
    h, w = px.shape
    rows = "\n".join(" ".join(str(p) for p in row) for row in px)
    return f"P2\n{w} {h}\n255\n{rows}\n"


def parse_pgm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines() for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P2":
        raise ValueError("not a plain-text graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    px = np.array([int(t) for t in tokens[4:]])
    if px.size != w * h or (px > maxval).any():
        raise ValueError("pixel data does not match the header")
    return px.reshape(h, w)


def cmd_render(args) -> None:
    sal = load_saliency(args.map_file)
    out = Path(args.out_file)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(render_pgm(sal.mask_values))
    except OSError as exc:
        raise LoadError(out, f"cannot write ({exc.strerror})") from exc
    print(f"{sal.mask_values.shape[1]}x{sal.mask_values.shape[0]} -> {out}")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "explain": cmd_explain, "evaluate": cmd_evaluate,
            "baseline": cmd_baseline, "sweep": cmd_sweep, "loso": cmd_loso, "render": cmd_render}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LoadError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, NumericError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

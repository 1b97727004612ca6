"""Command-line entry point: ``gradrel <command> [--config FILE] [flags]``.

Commands: gen, train, eval, rank, correlate, analyze.  Settings come from an
optional TOML config (paths resolved against the config's directory) and
are overridden by flags.  Exit status is 0 on success, 1 on data or runtime
errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import analysis
from .dataset import (
    DataError,
    PairSet,
    SplitSpec,
    binarize_ratings,
    generate_synthetic,
    load_features,
    load_pairs,
    load_ratings,
    load_splits,
    split_captions,
    write_features,
    write_pairs,
    write_ratings,
    write_splits,
)
from .metrics import evaluate_retrieval, rank_queries, spearman, write_report
from .model import LOSS_MODES, TrainConfig, TrainData, load_checkpoint, save_checkpoint, score_lists, train

log = logging.getLogger("gradrel")

PATH_KEYS = ("audio_features", "caption_features", "ratings", "pairs", "splits", "output")
DEFAULT_FILES = {
    "audio_features": "audio_features.csv",
    "caption_features": "caption_features.csv",
    "ratings": "ratings.csv",
    "pairs": "pairs.csv",
    "splits": "splits.csv",
}
SPLITS = ("development", "validation", "evaluation")


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    paths: dict[str, Path | None] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    k: int = 10
    repeat: int = 5
    base_seed: int = 0
    binarize: bool = False
    split: str = "evaluation"
    analysis: dict = field(default_factory=dict)
    base: Path = field(default_factory=Path.cwd)

    def path(self, key: str, required: bool = True) -> Path | None:
        p = self.paths.get(key)
        if p is None and required:
            raise DataError(f"no path configured for {key!r} (set [paths].{key} or --{key.replace('_', '-')})")
        return p

    def run_dirs(self) -> list[Path]:
        return [self.path("output") / f"run_{i}" for i in range(self.repeat)]


# --------------------------------------------------------------------------- config


def _read_toml(path: Path) -> dict:
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as err:
        raise DataError(f"{path}: {err}") from None


def _check_keys(section: str, given: dict, allowed, src) -> None:
    for key in given:
        if key not in allowed:
            raise DataError(f"{src}: unknown key [{section}].{key}")


def resolve_config(args) -> ExperimentConfig:
    """Merge defaults, the config file and flags (flags win)."""
    raw: dict = {}
    base = Path.cwd()
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        raw = _read_toml(cfg_path)
        base = cfg_path.resolve().parent
        _check_keys("", raw, ("paths", "train", "experiment", "analysis"), cfg_path)

    paths: dict[str, Path | None] = {}
    file_paths = raw.get("paths", {})
    _check_keys("paths", file_paths, PATH_KEYS, args.config)
    data_dir = getattr(args, "data", None)
    for key in PATH_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            paths[key] = Path(flag)
        elif key in file_paths:
            paths[key] = base / file_paths[key]
        elif data_dir is not None and key in DEFAULT_FILES:
            candidate = Path(data_dir) / DEFAULT_FILES[key]
            paths[key] = candidate if candidate.exists() else None
        else:
            paths[key] = None

    train_keys = {f.name for f in fields(TrainConfig)}
    train_raw = dict(raw.get("train", {}))
    _check_keys("train", train_raw, train_keys, args.config)
    flag_map = {"loss": "loss_mode", "omega": "omega", "tau": "tau", "alpha": "alpha", "lr": "lr0",
                "max_epochs": "max_epochs", "batch_size": "batch_size", "embed_dim": "embed_dim"}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            train_raw[key] = value
    try:
        tcfg = TrainConfig(**train_raw)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid training setting: {err}") from None

    exp = dict(raw.get("experiment", {}))
    _check_keys("experiment", exp, ("k", "repeat", "base_seed", "binarize", "split"), args.config)
    for key in ("k", "repeat", "base_seed", "split"):
        value = getattr(args, key, None)
        if value is not None:
            exp[key] = value
    if getattr(args, "binarize", False):
        exp["binarize"] = True
    cfg = ExperimentConfig(paths, tcfg, **exp, analysis=dict(raw.get("analysis", {})), base=base)
    if cfg.repeat < 1:
        raise UsageError(f"repeat must be >= 1, got {cfg.repeat}")
    if cfg.k < 1:
        raise UsageError(f"k must be >= 1, got {cfg.k}")
    if cfg.split not in SPLITS:
        raise UsageError(f"split must be one of {SPLITS}, got {cfg.split!r}")
    return cfg


# --------------------------------------------------------------------------- data


def _load_split_spec(cfg: ExperimentConfig) -> SplitSpec | None:
    path = cfg.path("splits", required=False)
    return load_splits(path) if path is not None else None


def build_train_data(cfg: ExperimentConfig) -> TrainData:
    """Development split for training, validation split for the schedule.

    Without a splits file every caption trains and the schedule watches the
    training loss.
    """
    audio = load_features(cfg.path("audio_features"))
    captions = load_features(cfg.path("caption_features"))
    mode = cfg.train.loss_mode
    lists, pairs = [], PairSet()
    if cfg.train.uses_lists:
        rpath = cfg.path("ratings", required=False)
        if rpath is None:
            raise DataError(f"loss {mode!r} needs relevance ratings but no ratings file was given "
                            "(set [paths].ratings or --ratings)")
        lists, dropped = load_ratings(rpath)
        if dropped:
            log.warning("%s: dropped %d all-zero lists", rpath, dropped)
    if cfg.train.uses_pairs or cfg.binarize:
        ppath = cfg.path("pairs", required=False)
        if ppath is None:
            raise DataError(f"{'--binarize' if cfg.binarize else f'loss {mode!r}'} needs positive pairs "
                            "but no pairs file was given (set [paths].pairs or --pairs)")
        pairs = load_pairs(ppath)
    if cfg.binarize and lists:
        lists = binarize_ratings(lists, pairs)

    splits = _load_split_spec(cfg)
    if splits is None:
        return TrainData(audio, captions, lists, pairs, (), PairSet())
    dev, val = splits.development, splits.validation
    return TrainData(
        audio,
        captions,
        [rl for rl in lists if rl.caption_id in dev],
        pairs.subset(c for c in pairs if c in dev),
        [rl for rl in lists if rl.caption_id in val],
        pairs.subset(c for c in pairs if c in val),
    )


def _query_ids(cfg: ExperimentConfig) -> set[str] | None:
    splits = _load_split_spec(cfg)
    return None if splits is None else set(splits[cfg.split])


def _existing_checkpoints(cfg: ExperimentConfig) -> list[Path]:
    ckpts = [d / "checkpoint.json" for d in cfg.run_dirs()]
    for c in ckpts:
        if not c.exists():
            raise DataError(f"missing checkpoint: {c}")
    return ckpts


# --------------------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    if args.list_size < 2:
        raise UsageError(f"--list-size must be >= 2, got {args.list_size}")
    if args.captions < 3 or args.audio < 2 or args.dim < 1:
        raise UsageError("--captions >= 3, --audio >= 2 and --dim >= 1 are required")
    try:
        syn = generate_synthetic(args.seed, args.captions, args.audio, args.dim, args.list_size,
                                 args.noise, latent_dim=args.latent_dim)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_features(out / DEFAULT_FILES["audio_features"], syn.audio)
    write_features(out / DEFAULT_FILES["caption_features"], syn.captions)
    write_ratings(out / DEFAULT_FILES["ratings"], syn.lists)
    write_pairs(out / DEFAULT_FILES["pairs"], syn.pairs)
    write_splits(out / DEFAULT_FILES["splits"], split_captions(list(syn.pairs), args.seed))
    print(f"wrote {len(syn.audio)} audio, {len(syn.captions)} captions, "
          f"{sum(len(rl) for rl in syn.lists)} ratings to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = build_train_data(cfg)
    for i, run_dir in enumerate(cfg.run_dirs()):
        tcfg = replace(cfg.train, seed=cfg.base_seed + i)
        enc, report = train(data, tcfg)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "checkpoint.json", enc, tcfg, report)
        write_report(run_dir / "report.json", {"run": i, "seed": tcfg.seed, **report.to_dict()})
        print(f"run {i} seed {tcfg.seed}: {len(report.train_loss)} epochs, best {report.best_epoch}, "
              f"{report.stop_reason}")
    return 0


def _mean_sd(values: list[float]) -> tuple[float, float | None]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), (float(arr.std(ddof=1)) if len(arr) > 1 else None)


def _fmt(mean: float, sd: float | None) -> str:
    return f"{mean:.3f}" if sd is None else f"{mean:.3f} ± {sd:.3f}"


def _label(n: int) -> str:
    return "single run" if n == 1 else f"mean ± sd over {n} runs"


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    audio = load_features(cfg.path("audio_features"))
    captions = load_features(cfg.path("caption_features"))
    pairs = load_pairs(cfg.path("pairs"))
    queries = _query_ids(cfg)
    if queries is not None:
        pairs = pairs.subset(c for c in pairs if c in queries)
    rkey = f"r_at_{cfg.k}"
    rows = []
    for i, ckpt in enumerate(_existing_checkpoints(cfg)):
        enc, _ = load_checkpoint(ckpt)
        m, r = evaluate_retrieval(enc, audio, captions, pairs, cfg.k)
        rows.append({"run": i, "seed": cfg.base_seed + i, "map": m, rkey: r})
        print(f"run {i}: mAP {m:.4f}  R@{cfg.k} {r:.4f}")
    m_mean, m_sd = _mean_sd([row["map"] for row in rows])
    r_mean, r_sd = _mean_sd([row[rkey] for row in rows])
    print(f"{_label(len(rows))}: mAP {_fmt(m_mean, m_sd)}  R@{cfg.k} {_fmt(r_mean, r_sd)}")
    report = {"split": cfg.split, "k": cfg.k, "n": len(rows), "n_queries": len(pairs),
              "map": m_mean, "map_sd": m_sd, rkey: r_mean, f"{rkey}_sd": r_sd, "runs": rows}
    out = Path(args.report) if args.report else cfg.path("output") / "eval_report.json"
    write_report(out, report)
    return 0


def cmd_rank(args) -> int:
    cfg = resolve_config(args)
    audio = load_features(cfg.path("audio_features"))
    captions = load_features(cfg.path("caption_features"))
    pairs = load_pairs(cfg.path("pairs"))
    queries = _query_ids(cfg)
    if queries is not None:
        pairs = pairs.subset(c for c in pairs if c in queries)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.path("output") / f"run_{args.run}" / "checkpoint.json"
    if not ckpt.exists():
        raise DataError(f"missing checkpoint: {ckpt}")
    enc, _ = load_checkpoint(ckpt)
    ranked = rank_queries(enc, audio, captions, pairs)
    out = Path(args.out) if args.out else ckpt.parent / "rankings.csv"
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["caption_id", "rank", "audio_id", "relevant"])
        for rl in ranked:
            for rank, item in enumerate(rl.items[: args.top], start=1):
                w.writerow([rl.query_id, rank, item, int(item in rl.relevant)])
    print(f"wrote top-{args.top} rankings for {len(ranked)} queries to {out}")
    return 0


def cmd_correlate(args) -> int:
    cfg = resolve_config(args)
    audio = load_features(cfg.path("audio_features"))
    captions = load_features(cfg.path("caption_features"))
    lists, _ = load_ratings(cfg.path("ratings"))
    queries = _query_ids(cfg)
    if queries is not None:
        lists = [rl for rl in lists if rl.caption_id in queries]
    if not lists:
        raise DataError(f"no rated captions in the {cfg.split!r} split")
    ratings = np.concatenate([rl.ratings for rl in lists])
    rows = []
    for i, ckpt in enumerate(_existing_checkpoints(cfg)):
        enc, _ = load_checkpoint(ckpt)
        sims = np.concatenate([
            score_lists(enc, audio.rows(rl.audio_ids)[None], captions.rows([rl.caption_id]))[0] for rl in lists
        ])
        res = spearman(sims, ratings)
        rows.append({"run": i, "spearman_rho": res.coefficient, "spearman_p": res.p_value, "n": res.n})
        print(f"run {i}: rho {res.coefficient:.4f}  p {res.p_value:.3g}  n {res.n}")
    rho_mean, rho_sd = _mean_sd([r["spearman_rho"] for r in rows])
    print(f"{_label(len(rows))}: rho {_fmt(rho_mean, rho_sd)}")
    report = {"split": cfg.split, "n": int(len(ratings)), "spearman_rho": rho_mean, "spearman_rho_sd": rho_sd,
              "spearman_p": max(r["spearman_p"] for r in rows), "runs": rows}
    out = Path(args.report) if args.report else cfg.path("output") / "correlation_report.json"
    write_report(out, report)
    return 0


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    opts = dict(cfg.analysis)
    base = cfg.base
    allowed = ("table", "matrices", "frame_hop", "freq_lexicon", "freq_cutoff", "content_lexicon", "out")
    _check_keys("analysis", opts, allowed, args.config)
    for key in ("table", "matrices", "freq_lexicon", "content_lexicon", "out"):
        if getattr(args, key, None) is not None:
            opts[key] = Path(getattr(args, key))
        elif key in opts:
            opts[key] = base / opts[key]
    for key in ("frame_hop", "freq_cutoff"):
        if getattr(args, key, None) is not None:
            opts[key] = getattr(args, key)
    if "table" not in opts:
        raise DataError("no analysis table given (set [analysis].table or --table)")
    if ("freq_lexicon" in opts) != ("content_lexicon" in opts):
        raise UsageError("text features need both --freq-lexicon and --content-lexicon")

    table = analysis.load_analysis_table(opts["table"])
    if "matrices" in opts:
        analysis.add_audio_features(table, opts["matrices"], opts.get("frame_hop"))
    if "freq_lexicon" in opts:
        freq = analysis.load_lexicon(opts["freq_lexicon"], opts.get("freq_cutoff"))
        content = analysis.load_lexicon(opts["content_lexicon"])
        analysis.add_text_features(table, freq, content)
    analysis.with_disagreement(table)
    targets, features = analysis.default_layout(table)
    ct = analysis.correlation_table(table, targets, features)
    out = Path(opts.get("out", "correlations.csv"))
    analysis.write_correlation_table(out, ct)
    print(f"wrote {len(features)} x {len(targets)} correlation table to {out}")
    return 0


# --------------------------------------------------------------------------- parser


def _alpha(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"alpha must lie in [0, 1] (convex mixing weight), got {value}")
    return value


def _positive(kind):
    def parse(text: str):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
        return value

    return parse


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--data", help="directory holding files written by `gen`")
    for key in PATH_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key)
    p.add_argument("--repeat", type=int)
    p.add_argument("--base-seed", type=int, dest="base_seed")
    p.add_argument("--split", choices=SPLITS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradrel", description="Graded-relevance audio retrieval experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--captions", type=int, default=600)
    g.add_argument("--audio", type=int, default=1009)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--list-size", type=int, default=17, dest="list_size")
    g.add_argument("--noise", type=float, default=0.2)
    g.add_argument("--latent-dim", type=int, default=8, dest="latent_dim")
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train `repeat` seeded runs")
    _add_data_flags(t)
    t.add_argument("--loss", choices=LOSS_MODES)
    t.add_argument("--omega", type=_positive(float))
    t.add_argument("--tau", type=_positive(float))
    t.add_argument("--alpha", type=_alpha)
    t.add_argument("--lr", type=_positive(float))
    t.add_argument("--max-epochs", type=int, dest="max_epochs")
    t.add_argument("--batch-size", type=_positive(int), dest="batch_size")
    t.add_argument("--embed-dim", type=_positive(int), dest="embed_dim")
    t.add_argument("--binarize", action="store_true", help="train on ratings binarized by the positive pairs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval mAP and R@k for every run")
    _add_data_flags(e)
    e.add_argument("--k", type=_positive(int))
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rank", help="dump per-query rankings of one run")
    _add_data_flags(r)
    r.add_argument("--run", type=int, default=0)
    r.add_argument("--checkpoint")
    r.add_argument("--top", type=_positive(int), default=10)
    r.add_argument("--out")
    r.set_defaults(func=cmd_rank)

    c = sub.add_parser("correlate", help="Spearman rho between similarities and ratings")
    _add_data_flags(c)
    c.add_argument("--report")
    c.set_defaults(func=cmd_correlate)

    a = sub.add_parser("analyze", help="feature-target correlation table")
    a.add_argument("--config")
    a.add_argument("--table")
    a.add_argument("--matrices")
    a.add_argument("--frame-hop", type=_positive(float), dest="frame_hop")
    a.add_argument("--freq-lexicon", dest="freq_lexicon")
    a.add_argument("--freq-cutoff", type=_positive(int), dest="freq_cutoff")
    a.add_argument("--content-lexicon", dest="content_lexicon")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        parser.error(str(err))
    except (DataError, ValueError, OSError) as err:
        print(f"gradrel {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

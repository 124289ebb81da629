"""Command-line entry points: train, eval, analyze, gen-data, grad-check.

Settings are resolved in three layers: built-in defaults, then an optional
JSON file given with ``--config``, then command-line flags. Unknown keys in
the file are rejected. Relative data paths are looked up under the
directory named by ``SGQA_DATA_ROOT`` when that variable is set. Every
command writes its resolved settings to ``config.json`` in ``--out``.

Exit codes: 0 success, 2 bad configuration or inputs, 3 numeric failure,
4 gradient-check threshold breach.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from . import analysis
from .data import (SyntheticClozeConfig, SyntheticSpanConfig, gen_synthetic_cloze, gen_synthetic_span,
                   load_cloze_dataset, load_span_dataset, write_cloze_dataset, write_span_dataset)
from .embeddings import EmbeddingMatrix, OovPolicy, load_embeddings
from .errors import NumericError, SgqaError
from .experiments import (DESK_LR, GRAD_THRESHOLD, SWEEPS, build_vocab, model_gradient_report, run_sweep,
                          sweep_csv, tiny_cloze_case, tiny_span_case)
from .models import ClozeModel, ClozeModelConfig, SpanModel, SpanModelConfig
from .training import (TrainConfig, evaluate, fit, headline, load_checkpoint, restore_model,
                       restore_run, save_checkpoint, start_run)

log = logging.getLogger("sgqa")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4
DATA_ROOT_ENV = "SGQA_DATA_ROOT"


class UsageError(SgqaError):
    """Bad command-line or configuration input (exit code 2)."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    # shared
    task: str = "span"
    seed: int = 7
    out: str = "runs"
    data: Optional[str] = None
    # model
    hidden_dim: int = 16
    embed_dim: int = 32
    n_hops: int = 3
    encoder_kind: str = "average"
    combiner_kind: str = "vector"
    use_matching: bool = True
    dropout: Optional[float] = None
    max_span_len: int = 15
    trainable_embeddings: bool = True
    char_dim: int = 0
    char_hidden: int = 0
    embeddings: Optional[str] = None
    oov_policy: Optional[str] = None
    # training
    heldout: Optional[str] = None
    batch_size: int = 8
    lr: float = DESK_LR
    lr_decay: float = 0.9
    epochs: int = 30
    clip_norm: Optional[float] = None
    sweep: Optional[str] = None
    resume: Optional[str] = None
    # eval / analyze
    checkpoint: Optional[str] = None
    buckets: int = 0
    sample: int = 3
    min_count: int = 5
    top_k: int = 10
    # gen-data
    n: int = 200
    name: Optional[str] = None
    # grad-check
    threshold: float = GRAD_THRESHOLD

    def model_config(self):
        common = dict(hidden_dim=self.hidden_dim, embed_dim=self.embed_dim, encoder_kind=self.encoder_kind,
                      combiner_kind=self.combiner_kind, use_matching=self.use_matching,
                      trainable_embeddings=self.trainable_embeddings, seed=self.seed)
        if self.task == "span":
            cfg = SpanModelConfig(max_span_len=self.max_span_len, **common)
        else:
            cfg = ClozeModelConfig(n_hops=self.n_hops, char_dim=self.char_dim, char_hidden=self.char_hidden,
                                   **common)
        if self.dropout is not None:
            cfg.dropout = self.dropout
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(batch_size=self.batch_size, lr=self.lr, lr_decay=self.lr_decay, dropout=self.dropout,
                          epochs=self.epochs, seed=self.seed, clip_norm=self.clip_norm)
        cfg.validate()
        return cfg


CONFIG_KEYS = {f.name for f in fields(RunConfig)}
MODEL_KEYS = ("hidden_dim", "embed_dim", "n_hops", "encoder_kind", "combiner_kind", "use_matching",
              "max_span_len", "char_dim", "char_hidden")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def resolve_config(args: argparse.Namespace) -> tuple[RunConfig, set]:
    """Defaults < config file < flags. Returns the config and the keys set explicitly."""
    values: dict = {}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values.update(loaded)
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    for f in fields(RunConfig):
        v = values.get(f.name)
        if v is None or f.default is None:
            continue
        if isinstance(f.default, bool):
            if not isinstance(v, bool):
                raise UsageError(f"{f.name} must be a boolean, got {v!r}")
        elif isinstance(f.default, (int, float)):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise UsageError(f"{f.name} must be a number, got {v!r}")
        elif isinstance(f.default, str) and not isinstance(v, str):
            raise UsageError(f"{f.name} must be a string, got {v!r}")
    cfg = RunConfig(**values)
    if cfg.task not in ("span", "cloze"):
        raise UsageError(f"task must be 'span' or 'cloze', got {cfg.task!r}")
    return cfg, set(values)


def data_path(path: Optional[str], what: str = "data") -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root and not p.exists():
        p = Path(root) / p
    if not p.exists():
        raise UsageError(f"{what} file not found: {path}")
    return p


def load_dataset(task: str, path: Path):
    data = load_span_dataset(path) if task == "span" else load_cloze_dataset(path)
    if len(data) == 0:
        raise UsageError(f"{path} holds no usable {task} examples")
    return data


def write_resolved(cfg: RunConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **asdict(cfg)}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _embeddings(cfg: RunConfig, vocab):
    if cfg.embeddings:
        default_policy = OovPolicy.ZERO if cfg.task == "span" else OovPolicy.RANDOM_PER_TOKEN
        return load_embeddings(data_path(cfg.embeddings, "embeddings"), vocab, cfg.embed_dim,
                               cfg.oov_policy or default_policy, cfg.seed, cfg.trainable_embeddings)
    return EmbeddingMatrix.random(vocab, cfg.embed_dim, cfg.seed, cfg.trainable_embeddings)


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    train = load_dataset(cfg.task, data_path(cfg.data))
    heldout = load_dataset(cfg.task, data_path(cfg.heldout, "heldout")) if cfg.heldout else None
    write_resolved(cfg, out, "train")
    if cfg.sweep:
        if cfg.task != "span":
            raise UsageError("--sweep runs on the span task")
        if cfg.sweep not in SWEEPS:
            raise UsageError(f"unknown sweep {cfg.sweep!r}; choose from {sorted(SWEEPS)}")
        from .experiments import TaskData
        data = TaskData(train, heldout if heldout is not None else train, build_vocab(train, heldout or []))
        rows = run_sweep(cfg.sweep, data, cfg.model_config(), cfg.train_config())
        text = sweep_csv(rows)
        (out / f"sweep-{cfg.sweep}.csv").write_text(text, encoding="utf-8")
        sys.stdout.write(text)
        return EXIT_OK

    if cfg.resume:
        run = restore_run(load_checkpoint(data_path(cfg.resume, "resume")))
        run.config.epochs = cfg.epochs
        model = run.model
    else:
        vocab = build_vocab(train, heldout or [])
        model_cfg = cfg.model_config()
        cls = SpanModel if cfg.task == "span" else ClozeModel
        model = cls(model_cfg, vocab, _embeddings(cfg, vocab).matrix)
        run = start_run(model, cfg.train_config())
    metric = "em" if cfg.task == "span" else "accuracy"
    header = ["epoch", "lr", "mean_loss", f"train_{metric}"] + ([f"heldout_{metric}"] if heldout else [])
    rows = []
    log_path = out / "metrics.csv"

    def on_epoch(run, report):
        row = [report.epoch, repr(report.lr), repr(report.mean_loss), repr(report.train_metric)]
        if heldout is not None:
            row.append(repr(headline(run.model, evaluate(run.model, heldout).report)))
        rows.append(row)
        log_path.write_text(_csv(header, rows), encoding="utf-8")
        save_checkpoint(run, out / "model.ckpt")
        log.info("epoch %d: loss %.5f", report.epoch, report.mean_loss)

    fit(run, train, on_epoch=on_epoch)
    if not rows:
        log_path.write_text(_csv(header, rows), encoding="utf-8")
        save_checkpoint(run, out / "model.ckpt")
    final = evaluate(model, train).report
    (out / "train_metrics.csv").write_text(final.to_csv(), encoding="utf-8")
    print(f"trained {run.epoch} epochs; train {metric} {headline(model, final):.4f}")
    return EXIT_OK


def _restore(cfg: RunConfig, explicit: set):
    ck = load_checkpoint(data_path(cfg.checkpoint, "checkpoint"))
    if ck.task != cfg.task and "task" in explicit:
        raise UsageError(f"checkpoint holds a {ck.task} model but task {cfg.task} was requested")
    cfg.task = ck.task
    for key in MODEL_KEYS:
        if key in explicit and key in ck.model_config and ck.model_config[key] != getattr(cfg, key):
            raise UsageError(f"{key}={getattr(cfg, key)!r} does not match the checkpoint ({ck.model_config[key]!r})")
    return restore_model(ck)


def cmd_eval(cfg: RunConfig, explicit: set) -> int:
    model = _restore(cfg, explicit)
    data = load_dataset(cfg.task, data_path(cfg.data))
    out = Path(cfg.out)
    write_resolved(cfg, out, "eval")
    ev = evaluate(model, data, n_buckets=cfg.buckets or None)
    (out / "metrics.csv").write_text(ev.report.to_csv(), encoding="utf-8")
    if cfg.task == "span":
        rows = [[ex.id, s, e, text] for ex, (s, e, text) in zip(data, ev.predictions)]
        header = ["id", "start", "end", "prediction"]
    else:
        rows = [[ex.id, ex.candidates[p]] for ex, p in zip(data, ev.predictions)]
        header = ["id", "prediction"]
    (out / "predictions.csv").write_text(_csv(header, rows), encoding="utf-8")
    if cfg.buckets:
        bucket_rows = [[b["bucket"], b["n"], repr(b["min_len"]), repr(b["max_len"])]
                       + [repr(b[k]) for k in ev.scores] for b in ev.report.buckets]
        (out / "buckets.csv").write_text(
            _csv(["bucket", "n", "min_avg_len", "max_avg_len"] + list(ev.scores), bucket_rows), encoding="utf-8")
    sys.stdout.write(ev.report.to_csv())
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, explicit: set) -> int:
    model = _restore(cfg, explicit)
    data = load_dataset(cfg.task, data_path(cfg.data))
    out = Path(cfg.out)
    write_resolved(cfg, out, "analyze")
    try:
        records = analysis.trace_dataset(model, data)
    except SgqaError as exc:
        raise UsageError(f"cannot trace this checkpoint: {exc}") from exc
    stats = analysis.hop_distribution_stats(records)
    (out / "hop_stats.csv").write_text(analysis.hop_stats_csv(stats), encoding="utf-8")
    highest, lowest = analysis.rank_tokens_global(records, cfg.min_count, cfg.top_k)
    (out / "ranking.csv").write_text(analysis.ranking_csv(highest, lowest), encoding="utf-8")
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(exist_ok=True)
    csv_parts = []
    for n, ex in enumerate(list(data)[:cfg.sample]):
        mine = [r for r in records if r.example_id == ex.id]
        blocks = []
        for hop in sorted({r.hop for r in mine}):
            lines, part = analysis.render_heatmap_text(mine, ex.passage, hop, ex.id)
            blocks.append(f"# {ex.id} hop {hop}\n" + "\n".join(lines))
            csv_parts.append(part if not csv_parts else part.split("\n", 1)[1])
        (heat_dir / f"heatmap-{n:03d}.txt").write_text("\n".join(blocks) + "\n", encoding="utf-8")
    (out / "heatmaps.csv").write_text("".join(csv_parts), encoding="utf-8")
    print(f"traced {len(data)} examples over {len(stats)} hop(s)")
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    write_resolved(cfg, out, "gen-data")
    name = cfg.name or f"{cfg.task}-{cfg.seed}"
    if cfg.task == "span":
        examples = gen_synthetic_span(SyntheticSpanConfig(n_examples=cfg.n, seed=cfg.seed))
        path = out / f"{name}.json"
        write_span_dataset(examples, path)
    else:
        examples = gen_synthetic_cloze(SyntheticClozeConfig(n_examples=cfg.n, seed=cfg.seed))
        path = out / f"{name}.tsv"
        write_cloze_dataset(examples, path)
    print(f"wrote {len(examples)} {cfg.task} examples to {path}")
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig, explicit: set) -> int:
    out = Path(cfg.out)
    write_resolved(cfg, out, "grad-check")
    tasks = [cfg.task] if "task" in explicit else ["span", "cloze"]
    rows, failed = [], []
    for task in tasks:
        case = tiny_span_case(cfg.seed) if task == "span" else tiny_cloze_case(cfg.seed)
        for name, err in model_gradient_report(case).items():
            ok = err < cfg.threshold
            rows.append([task, name, repr(err), "ok" if ok else "FAIL"])
            if not ok:
                failed.append(f"{task}:{name}")
            print(f"{task:5s} {name:48s} {err:.3e} {'ok' if ok else 'FAIL'}")
    (out / "grad_check.csv").write_text(_csv(["task", "group", "max_rel_error", "status"], rows),
                                        encoding="utf-8")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--task", choices=["span", "cloze"])
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    model.add_argument("--embed-dim", dest="embed_dim", type=int)
    model.add_argument("--hops", dest="n_hops", type=int)
    model.add_argument("--encoder", dest="encoder_kind", choices=["average", "max", "last", "attention"])
    model.add_argument("--combiner", dest="combiner_kind", choices=["concat", "scalar", "vector"])
    model.add_argument("--matching", dest="use_matching", type=_bool, metavar="BOOL")
    model.add_argument("--max-span-len", dest="max_span_len", type=int)
    model.add_argument("--char-dim", dest="char_dim", type=int)
    model.add_argument("--char-hidden", dest="char_hidden", type=int)

    parser = argparse.ArgumentParser(prog="sgqa", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common, model], help="train a model or an ablation sweep")
    p.add_argument("--data")
    p.add_argument("--heldout")
    p.add_argument("--embeddings")
    p.add_argument("--oov-policy", dest="oov_policy", choices=[o.value for o in OovPolicy])
    p.add_argument("--trainable-embeddings", dest="trainable_embeddings", type=_bool, metavar="BOOL")
    p.add_argument("--dropout", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--sweep", choices=sorted(SWEEPS))
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common, model], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--buckets", type=int, nargs="?", const=5,
                   help="add a per-bucket breakdown by average sentence length (default 5 buckets)")

    p = sub.add_parser("analyze", parents=[common, model], help="gate-trace analysis of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--sample", type=int, help="number of examples to render as heatmaps")
    p.add_argument("--min-count", dest="min_count", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--name", help="file stem (default <task>-<seed>)")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of tiny models")
    p.add_argument("--threshold", type=float)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, explicit = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, explicit)
        if args.command == "analyze":
            return cmd_analyze(cfg, explicit)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        return cmd_grad_check(cfg, explicit)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SgqaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""tabenc command line: datasets, encodings, masks, benchmarks, training, analysis.

Exit codes: 0 success, 2 input/validation error, 3 runtime failure.
--json-errors switches stderr diagnostics to one JSON object per error.
TABENC_THREADS caps both BLAS thread pools and grid worker processes, which
is why numpy and the sibling modules are imported lazily inside handlers.
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import hashlib
import io
import json
import os
import sys
from pathlib import Path

_TOKEN_CHOICES = ("T0", "T1", "T2")
_MASK_CHOICES = ("M0", "M1", "M2", "M3", "M4", "M5", "M6")
_PE_CHOICES = ("TPE", "CPE")
_BIAS_CHOICES = ("B0", "B1")
_EMB_CHOICES = ("E0", "E1")
_SUITE_CHOICES = ("train", "structure", "consistency", "compositional", "mixability")
_RESULT_FIELDS = ("T", "M", "PE", "B", "E", "suite", "replicate", "da")

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _apply_thread_cap() -> tuple[int | None, str | None]:
    """Honor TABENC_THREADS before numpy is imported anywhere."""
    raw = os.environ.get("TABENC_THREADS")
    if raw is None:
        return None, None
    try:
        n = int(raw)
    except ValueError:
        return None, f"TABENC_THREADS must be an integer, got {raw!r}"
    if n < 1:
        return None, f"TABENC_THREADS must be >= 1, got {n}"
    for var in _THREAD_ENV_VARS:
        os.environ.setdefault(var, str(n))
    return n, None


# ---------------------------------------------------------------------------
# small shared helpers
# ---------------------------------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _load_table(path: str):
    from .core import Table

    with open(path, encoding="utf-8") as fh:
        return Table.from_json(json.load(fh))


def _factor_from_args(args):
    from .core import FactorConfig

    return FactorConfig(tokens=args.tokens, mask=args.mask, pe=args.pe,
                        bias=args.bias, emb=args.emb)


def _derived_seed(master: int, tag: str) -> int:
    material = int(master).to_bytes(8, "little", signed=False) + tag.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "little")


def _fmt_float(x: float) -> str:
    return format(float(x), ".12g")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _cmd_gen(args) -> int:
    from .core import write_jsonl
    from .datagen import gen_dataset, suite_spec

    overrides = {}
    if args.templates:
        overrides["templates"] = tuple(p.strip() for p in args.templates.split(",") if p.strip())
    if args.rows:
        overrides["row_values"] = _int_list(args.rows)
    if args.cols:
        overrides["col_values"] = _int_list(args.cols)
    if args.value_max is not None:
        overrides["value_max"] = args.value_max
    if args.consistency_rate is not None:
        overrides["consistency_rate"] = args.consistency_rate
    if args.mix_strength is not None:
        overrides["mix_strength"] = args.mix_strength
    if args.mix_alphabet is not None:
        overrides["mix_alphabet"] = args.mix_alphabet
    if args.drop_empty:
        overrides["keep_empty"] = False
    spec = suite_spec(args.suite, args.n, args.seed, **overrides)

    examples, report = gen_dataset(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f"{out.name}.tmp.{os.getpid()}")
    write_jsonl(examples, tmp)
    os.replace(tmp, out)

    _print_json({
        "suite": args.suite,
        "seed": args.seed,
        "n_requested": report.n_requested,
        "n_emitted": report.n_emitted,
        "n_skipped_oracle": report.n_skipped_oracle,
        "n_filtered_empty": report.n_filtered_empty,
        "v0": report.v0,
        "mix_alphabet": list(report.chain.alphabet) if report.chain else None,
        "out": str(out),
    })
    return 0


# ---------------------------------------------------------------------------
# exec / score
# ---------------------------------------------------------------------------

def _cmd_exec(args) -> int:
    from .sqlexec import execute

    table = _load_table(args.table)
    result = execute(args.query, table)
    _print_json(result)
    return 0


def _read_predictions(path: str) -> list[list[str]]:
    from .core import ValidationError

    preds = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if isinstance(obj, dict):
                obj = obj.get("answer")
            if not isinstance(obj, list) or not all(isinstance(v, str) for v in obj):
                raise ValidationError(
                    f"{path}:{lineno}: prediction must be a JSON list of strings "
                    f"or an object with an 'answer' list"
                )
            preds.append(obj)
    return preds


def _cmd_score(args) -> int:
    from .core import ValidationError, read_jsonl
    from .sqlexec import denotation_accuracy

    golds = [ex.answer for ex in read_jsonl(args.data)]
    preds = _read_predictions(args.pred)
    if not golds:
        raise ValidationError(f"{args.data}: no examples")
    da = denotation_accuracy(preds, golds, set_semantics=args.set_semantics)
    _print_json({"n": len(golds), "da": round(da, 6)})
    return 0


# ---------------------------------------------------------------------------
# dump-encoding / mask
# ---------------------------------------------------------------------------

def _cmd_dump_encoding(args) -> int:
    from .core import FactorConfig
    from .linearize import default_vocab, encode_input, encoding_rows

    factor = FactorConfig(tokens=args.tokens, mask="M0", pe=args.pe,
                          bias="B0", emb=args.emb)
    table = _load_table(args.table)
    enc = encode_input(args.question, table, factor, max_len=args.max_len)
    rows = list(encoding_rows(enc, default_vocab()))
    if enc.unk_count:
        sys.stderr.write(f"tabenc: {enc.unk_count} token(s) outside the vocabulary became UNK\n")
    if args.json:
        keys = ("idx", "symbol", "role", "row", "col", "cell", "seg", "pos")
        _print_json([dict(zip(keys, r)) for r in rows])
        return 0
    header = ("idx", "symbol", "role", "row", "col", "cell", "seg", "pos")
    table_rows = [tuple(str(v) for v in r) for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in table_rows)) for i, h in enumerate(header)]
    line = "  ".join(h.ljust(widths[i]) for i, h in enumerate(header))
    sys.stdout.write(line.rstrip() + "\n")
    for r in table_rows:
        sys.stdout.write("  ".join(r[i].ljust(widths[i]) for i in range(len(header))).rstrip() + "\n")
    return 0


def _cmd_mask(args) -> int:
    from .core import FactorConfig
    from .linearize import encode_input
    from .mask import build_mask, sparsity, write_blocks_file

    factor = FactorConfig(tokens=args.tokens, mask=args.mask, pe="TPE",
                          bias="B0", emb="E0")
    table = _load_table(args.table)
    enc = encode_input(args.question, table, factor, max_len=args.max_len)
    mask = build_mask(enc, args.mask)

    if args.show:
        limit = 200
        if mask.length > limit:
            sys.stderr.write(f"tabenc: --show skipped, length {mask.length} > {limit}\n")
        else:
            for row in mask.dense:
                sys.stdout.write("".join("#" if x else "." for x in row) + "\n")

    summary = {
        "length": mask.length,
        "scheme": args.mask,
        "sparsity": round(sparsity(mask), 6),
        "n_blocks": len(mask.blocks),
    }
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_name(f"{out.name}.tmp.{os.getpid()}")
        write_blocks_file(tmp, mask)
        os.replace(tmp, out)
        summary["out"] = str(out)
    _print_json(summary)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _bench_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("length", "scheme", "direction", "dense_ms", "sparse_ms", "speedup"))
    for r in rows:
        w.writerow((r.length, r.scheme, r.direction,
                    f"{r.dense_ms:.3f}", f"{r.sparse_ms:.3f}", f"{r.speedup:.2f}"))
    return buf.getvalue()


def _cmd_bench(args) -> int:
    from .attention import bench_attention

    lengths = _int_list(args.lengths)
    rows = bench_attention(lengths, scheme=args.scheme, trials=args.trials,
                           head_dim=args.head_dim, seed=args.seed,
                           include_backward=args.backward)
    text = _bench_csv(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(out, text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def _model_config_from_args(args, factor):
    from .model import ModelConfig

    return ModelConfig(
        factor=factor,
        d_model=args.d_model,
        n_heads=args.n_heads,
        n_enc_layers=args.enc_layers,
        n_dec_layers=args.dec_layers,
        ffn_dim=args.ffn_dim,
        context_len=args.context_len,
        max_positions=max(args.context_len, 512),
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        patience=args.patience,
        eval_every=args.eval_every,
        eval_fraction=args.eval_fraction,
    )


def _trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "loss", "eval_da"))
    for row in trace:
        w.writerow((row["step"], f"{row['loss']:.6f}", f"{row['eval_da']:.6f}"))
    return buf.getvalue()


def _cmd_train(args) -> int:
    from .core import read_jsonl
    from .linearize import default_vocab
    from .model import save_checkpoint, train

    factor = _factor_from_args(args)
    cfg = _model_config_from_args(args, factor)
    examples = read_jsonl(args.data)

    log = None if args.quiet else (lambda msg: sys.stderr.write(msg + "\n"))
    result = train(examples, cfg, seed=args.seed, stop_da=args.stop_da, log=log)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = default_vocab()
    ckpt = out / "checkpoint.bin"
    tmp = ckpt.with_name(f"{ckpt.name}.tmp.{os.getpid()}")
    save_checkpoint(tmp, result.params, cfg, vocab.size)
    os.replace(tmp, ckpt)
    _atomic_write_text(out / "trace.csv", _trace_csv(result.trace))

    summary = {
        "seed": args.seed,
        "best_step": result.best_step,
        "best_eval_da": round(result.best_eval_da, 6),
        "steps_run": result.steps_run,
        "final_loss": round(result.final_loss, 6),
        "config": cfg.to_json(),
        "checkpoint": str(ckpt),
    }
    _atomic_write_text(out / "result.json",
                       json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _print_json(summary)
    return 0


def _cmd_eval(args) -> int:
    from .core import ValidationError, read_jsonl
    from .linearize import default_vocab
    from .model import load_checkpoint, predict
    from .sqlexec import denotation_match

    params, cfg, vocab_size = load_checkpoint(args.checkpoint)
    vocab = default_vocab()
    if vocab_size != vocab.size:
        raise ValidationError(
            f"checkpoint vocabulary size {vocab_size} != library vocabulary {vocab.size}"
        )
    examples = read_jsonl(args.data)
    if not examples:
        raise ValidationError(f"{args.data}: no examples")
    preds = predict(params, cfg, examples, vocab, batch_size=args.batch_size)
    hits = sum(
        denotation_match(p, ex.answer, args.set_semantics)
        for p, ex in zip(preds, examples)
    )
    if args.pred_out:
        lines = "".join(json.dumps({"answer": p}, sort_keys=True) + "\n" for p in preds)
        out = Path(args.pred_out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(out, lines)
    _print_json({"n": len(examples), "da": round(hits / len(examples), 6)})
    return 0


# ---------------------------------------------------------------------------
# anova
# ---------------------------------------------------------------------------

def _read_results_csv(path: str) -> list[dict]:
    from .core import ValidationError

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: empty results file")
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return rows


def _drop_failed_rows(rows: list[dict], response: str) -> tuple[list[dict], int]:
    import math

    good = []
    dropped = 0
    for row in rows:
        try:
            value = float(row[response])
        except (KeyError, TypeError, ValueError):
            dropped += 1
            continue
        if math.isfinite(value):
            good.append(row)
        else:
            dropped += 1
    return good, dropped


def _anova_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("term", "ss", "df", "f", "p", "eta_sq"))
    for t in report.terms:
        w.writerow((t.name, _fmt_float(t.ss), t.df, _fmt_float(t.f_stat),
                    _fmt_float(t.p_value), _fmt_float(t.eta_sq)))
    w.writerow(("residual", _fmt_float(report.residual_ss), report.residual_df, "", "", ""))
    w.writerow(("total", _fmt_float(report.total_ss), report.n - 1, "", "", ""))
    return buf.getvalue()


def _cmd_anova(args) -> int:
    from .core import ValidationError
    from .stats import anova

    rows = _read_results_csv(args.results)
    rows, dropped = _drop_failed_rows(rows, args.response)
    if dropped:
        sys.stderr.write(f"tabenc: dropped {dropped} row(s) with missing/non-finite "
                         f"{args.response}\n")
    if not rows:
        raise ValidationError("no usable data rows after dropping failures")
    terms = [t.strip() for t in args.terms.split(",") if t.strip()]
    report = anova(rows, terms, response=args.response,
                   allow_unbalanced=args.allow_unbalanced)
    text = _anova_csv(report)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(out, text)
        _print_json({"out": str(out), "n": report.n,
                     "residual_df": report.residual_df})
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def _config_key(factor) -> str:
    f = factor.csv_fields()
    return "/".join(f[k] for k in ("T", "M", "PE", "B", "E"))


def _parse_config_string(text: str):
    from .core import FactorConfig, ValidationError

    parts = text.strip().split("/")
    if len(parts) != 5:
        raise ValidationError(f"config must look like T0/M1/TPE/B0/E1, got {text!r}")
    return FactorConfig(tokens=parts[0], mask=parts[1], pe=parts[2],
                        bias=parts[3], emb=parts[4])


def _build_plan(args) -> dict:
    from .core import (BIAS_SETTINGS, EMB_SETTINGS, MASK_SCHEMES, PE_SCHEMES,
                       TOKEN_SCHEMES, FactorConfig, ValidationError,
                       is_legal_combination)

    suites = tuple(s.strip() for s in args.suites.split(",") if s.strip())
    for s in suites:
        if s not in _SUITE_CHOICES:
            raise ValidationError(f"unknown suite {s!r}; choose from {_SUITE_CHOICES}")
    if not suites:
        raise ValidationError("at least one evaluation suite required")
    if args.replicates < 1:
        raise ValidationError("replicates must be >= 1")

    configs = []
    dropped = 0
    if args.configs:
        raw = [p for p in args.configs.split(";") if p.strip()]
        for item in raw:
            parts = item.strip().split("/")
            if len(parts) != 5:
                raise ValidationError(f"config must look like T0/M1/TPE/B0/E1, got {item!r}")
            if not is_legal_combination(parts[0], parts[1]):
                dropped += 1
                continue
            configs.append(_parse_config_string(item))
        n_raw = len(raw)
    else:
        n_raw = 0
        for t in TOKEN_SCHEMES:
            for m in MASK_SCHEMES:
                for pe in PE_SCHEMES:
                    for b in BIAS_SETTINGS:
                        for e in EMB_SETTINGS:
                            n_raw += 1
                            if not is_legal_combination(t, m):
                                dropped += 1
                                continue
                            configs.append(FactorConfig(t, m, pe, b, e))
    if not configs:
        raise ValidationError("plan has no legal configurations")

    return {
        "seed": args.seed,
        "replicates": args.replicates,
        "suites": list(suites),
        "configs": [_config_key(c) for c in configs],
        "raw_points": n_raw * args.replicates,
        "dropped_points": dropped * args.replicates,
        "dropped_configs": dropped,
        "legal_configs": len(configs),
        "runs": len(configs) * args.replicates,
        "train_n": args.train_n,
        "eval_n": args.eval_n,
        "steps": args.steps,
    }


def _grid_data_paths(outdir: Path, suites) -> dict:
    paths = {"train": outdir / "data" / "train.jsonl"}
    for s in suites:
        paths[f"eval-{s}"] = outdir / "data" / f"eval-{s}.jsonl"
    return paths


def _ensure_grid_data(outdir: Path, suites, seed: int, train_n: int, eval_n: int) -> dict:
    from .core import write_jsonl
    from .datagen import gen_dataset, suite_spec

    paths = _grid_data_paths(outdir, suites)
    (outdir / "data").mkdir(parents=True, exist_ok=True)
    jobs = [("train", "train", train_n, paths["train"])]
    jobs += [(f"eval-{s}", s, eval_n, paths[f"eval-{s}"]) for s in suites]
    for tag, suite, n, path in jobs:
        if path.exists():
            continue
        spec = suite_spec(suite, n, _derived_seed(seed, f"grid-data-{tag}"))
        examples, _report = gen_dataset(spec)
        tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
        write_jsonl(examples, tmp)
        os.replace(tmp, path)
    return paths


def _append_rows(results_path: Path, lines: list[str]) -> None:
    with open(results_path, "a", encoding="utf-8", newline="\n") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            if fh.tell() == 0 and not lines[0].startswith("T,"):
                fh.write(",".join(_RESULT_FIELDS) + "\n")
            for line in lines:
                fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def _read_done_keys(results_path: Path) -> set[tuple]:
    done = set()
    if not results_path.exists():
        return done
    with open(results_path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                key = tuple(row[k] for k in ("T", "M", "PE", "B", "E", "suite")) + (
                    int(row["replicate"]),)
            except (KeyError, TypeError, ValueError):
                continue
            done.add(key)
    return done


def _grid_run_one(payload: dict) -> list[str]:
    """Train one (config, replicate) and evaluate the missing suites.

    Runs in a worker process; returns finished CSV lines. A diverged
    training run yields rows with da=nan instead of failing the grid.
    """
    from .core import FactorConfig, read_jsonl
    from .linearize import default_vocab
    from .model import ModelConfig, TrainingDivergedError, predict, train
    from .sqlexec import denotation_match

    factor = FactorConfig.from_dict(payload["factor"])
    cfg = ModelConfig(factor=factor, **payload["model"])
    examples = read_jsonl(payload["train_path"])
    prefix = ",".join(factor.csv_fields()[k] for k in ("T", "M", "PE", "B", "E"))
    rep = payload["replicate"]

    try:
        result = train(examples, cfg, seed=payload["run_seed"],
                       stop_da=payload["stop_da"])
    except TrainingDivergedError:
        return [f"{prefix},{suite},{rep},nan\n" for suite in payload["suites"]]

    vocab = default_vocab()
    lines = []
    for suite in payload["suites"]:
        eval_examples = read_jsonl(payload["eval_paths"][suite])
        preds = predict(result.params, cfg, eval_examples, vocab,
                        batch_size=payload["eval_batch"])
        hits = sum(denotation_match(p, ex.answer)
                   for p, ex in zip(preds, eval_examples))
        da = hits / len(eval_examples) if eval_examples else 0.0
        lines.append(f"{prefix},{suite},{rep},{da:.6f}\n")
    return lines


def _canonicalize_results(results_path: Path) -> int:
    scheme_order = {
        "T": _TOKEN_CHOICES, "M": _MASK_CHOICES, "PE": _PE_CHOICES,
        "B": _BIAS_CHOICES, "E": _EMB_CHOICES,
    }
    with open(results_path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    seen = set()
    unique = []
    for row in rows:
        key = tuple(row.get(k, "") for k in ("T", "M", "PE", "B", "E", "suite", "replicate"))
        if key in seen:
            continue
        seen.add(key)
        unique.append(row)

    def sort_key(row):
        parts = []
        for k in ("T", "M", "PE", "B", "E"):
            order = scheme_order[k]
            v = row.get(k, "")
            parts.append(order.index(v) if v in order else len(order))
        parts.append(row.get("suite", ""))
        try:
            parts.append(int(row.get("replicate", 0)))
        except (TypeError, ValueError):
            parts.append(0)
        return tuple(parts)

    unique.sort(key=sort_key)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=_RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in unique:
        w.writerow({k: row.get(k, "") for k in _RESULT_FIELDS})
    _atomic_write_text(results_path, buf.getvalue())
    return len(unique)


def _cmd_grid(args) -> int:
    plan = _build_plan(args)
    if args.plan_only:
        _print_json(plan)
        return 0

    cap, _err = _apply_thread_cap()
    workers = args.workers
    if cap is not None:
        workers = min(workers, cap)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(outdir / "plan.json",
                       json.dumps(plan, sort_keys=True, indent=2) + "\n")
    paths = _ensure_grid_data(outdir, plan["suites"], args.seed,
                              args.train_n, args.eval_n)
    results_path = outdir / "results.csv"
    done = _read_done_keys(results_path)

    model_kwargs = dict(
        context_len=args.context_len,
        max_positions=max(args.context_len, 512),
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        patience=args.patience,
        eval_every=args.eval_every,
    )
    work = []
    skipped = 0
    for key in plan["configs"]:
        factor = _parse_config_string(key)
        fields = factor.csv_fields()
        for rep in range(1, plan["replicates"] + 1):
            missing = [
                s for s in plan["suites"]
                if (fields["T"], fields["M"], fields["PE"], fields["B"], fields["E"],
                    s, rep) not in done
            ]
            if not missing:
                skipped += 1
                continue
            work.append({
                "factor": factor.to_dict(),
                "replicate": rep,
                "run_seed": _derived_seed(args.seed, f"grid-run-{key}-r{rep}"),
                "model": model_kwargs,
                "stop_da": args.stop_da,
                "suites": missing,
                "train_path": str(paths["train"]),
                "eval_paths": {s: str(paths[f"eval-{s}"]) for s in missing},
                "eval_batch": args.eval_batch,
            })

    if workers > 1 and len(work) > 1:
        import concurrent.futures as cf
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for lines in pool.map(_grid_run_one, work):
                _append_rows(results_path, lines)
    else:
        for payload in work:
            lines = _grid_run_one(payload)
            _append_rows(results_path, lines)

    n_rows = _canonicalize_results(results_path) if results_path.exists() else 0
    _print_json({
        "results": str(results_path),
        "rows": n_rows,
        "runs_done": len(work),
        "runs_skipped": skipped,
        "dropped_configs": plan["dropped_configs"],
    })
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _paired_differences(rows: list[dict]) -> str:
    scheme_order = {
        "T": _TOKEN_CHOICES, "M": _MASK_CHOICES, "PE": _PE_CHOICES,
        "B": _BIAS_CHOICES, "E": _EMB_CHOICES,
    }
    factors = ("T", "M", "PE", "B", "E")
    by_key = {}
    for row in rows:
        key = tuple(row[k] for k in factors) + (row["suite"], row["replicate"])
        by_key[key] = float(row["da"])

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("factor", "left", "right", "n_pairs", "mean_diff", "min_diff", "max_diff"))
    for fi, factor in enumerate(factors):
        levels = sorted({row[factor] for row in rows},
                        key=lambda v: scheme_order[factor].index(v))
        for i, left in enumerate(levels):
            for right in levels[i + 1:]:
                diffs = []
                for key, da_left in by_key.items():
                    if key[fi] != left:
                        continue
                    other = key[:fi] + (right,) + key[fi + 1:]
                    if other in by_key:
                        diffs.append(da_left - by_key[other])
                if diffs:
                    w.writerow((
                        factor, left, right, len(diffs),
                        f"{sum(diffs) / len(diffs):.6f}",
                        f"{min(diffs):.6f}", f"{max(diffs):.6f}",
                    ))
    return buf.getvalue()


def _cmd_report(args) -> int:
    from .core import ValidationError
    from .stats import DegenerateDataError, UnbalancedDesignError, anova

    rows = _read_results_csv(args.results)
    rows, dropped = _drop_failed_rows(rows, "da")
    if dropped:
        sys.stderr.write(f"tabenc: dropped {dropped} failed row(s)\n")
    if not rows:
        raise ValidationError("no usable data rows after dropping failures")
    for field in _RESULT_FIELDS:
        if field not in rows[0]:
            raise ValidationError(f"results file missing column {field!r}")

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    diff_path = outdir / "differences.csv"
    _atomic_write_text(diff_path, _paired_differences(rows))

    varying = [f for f in ("T", "M", "PE", "B", "E")
               if len({row[f] for row in rows}) >= 2]
    anova_path = None
    anova_note = None
    if not varying:
        anova_note = "no factor varies; ANOVA skipped"
    else:
        terms = list(varying)
        terms += [f"{a}*{b}" for i, a in enumerate(varying) for b in varying[i + 1:]]
        report = None
        try:
            report = anova(rows, terms, response="da")
        except UnbalancedDesignError as exc:
            sys.stderr.write(f"tabenc: unbalanced design ({exc}); "
                             f"retrying with allow_unbalanced\n")
            try:
                report = anova(rows, terms, response="da", allow_unbalanced=True)
            except (DegenerateDataError, UnbalancedDesignError) as exc2:
                anova_note = f"ANOVA failed: {exc2}"
        except DegenerateDataError as exc:
            anova_note = f"ANOVA degenerate: {exc}"
        if report is not None:
            anova_path = outdir / "anova.csv"
            _atomic_write_text(anova_path, _anova_csv(report))
    if anova_note:
        sys.stderr.write(f"tabenc: {anova_note}\n")

    _print_json({
        "differences": str(diff_path),
        "anova": str(anova_path) if anova_path else None,
        "note": anova_note,
        "rows": len(rows),
        "dropped_failed": dropped,
    })
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_factor_flags(sp, *, tokens=True, mask=True, pe=True, bias=True, emb=True):
    if tokens:
        sp.add_argument("--tokens", default="T0", choices=_TOKEN_CHOICES)
    if mask:
        sp.add_argument("--mask", default="M0", choices=_MASK_CHOICES)
    if pe:
        sp.add_argument("--pe", default="TPE", choices=_PE_CHOICES)
    if bias:
        sp.add_argument("--bias", default="B0", choices=_BIAS_CHOICES)
    if emb:
        sp.add_argument("--emb", default="E0", choices=_EMB_CHOICES)


def _add_model_flags(sp):
    sp.add_argument("--steps", type=int, default=20000)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--eval-every", type=int, default=500)
    sp.add_argument("--patience", type=int, default=15)
    sp.add_argument("--context-len", type=int, default=512)
    sp.add_argument("--stop-da", type=float, default=None,
                    help="stop as soon as held-out DA reaches this value")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a pre-subcommand --json-errors from being reset by the
    # subparser's default for the same destination
    common.add_argument("--json-errors", action="store_true",
                        default=argparse.SUPPRESS,
                        help="emit errors to stderr as JSON")

    p = argparse.ArgumentParser(
        prog="tabenc", parents=[common],
        description="Table-encoding factor experiments: data, masks, models, analysis.",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    sp = sub.add_parser("gen", parents=[common], help="generate a synthetic QA dataset")
    sp.add_argument("--suite", default="train", choices=_SUITE_CHOICES)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--templates", help="comma-separated template ids (override)")
    sp.add_argument("--rows", help="comma-separated row-count choices")
    sp.add_argument("--cols", help="comma-separated column-count choices")
    sp.add_argument("--value-max", type=int)
    sp.add_argument("--consistency-rate", type=float)
    sp.add_argument("--mix-strength", type=float)
    sp.add_argument("--mix-alphabet", type=int)
    sp.add_argument("--drop-empty", action="store_true",
                    help="drop examples whose answer is empty")
    sp.set_defaults(func=_cmd_gen)

    sp = sub.add_parser("exec", parents=[common], help="run a query against a table file")
    sp.add_argument("--table", required=True)
    sp.add_argument("--query", required=True)
    sp.set_defaults(func=_cmd_exec)

    sp = sub.add_parser("score", parents=[common], help="denotation accuracy of predictions")
    sp.add_argument("--data", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--set-semantics", action="store_true")
    sp.set_defaults(func=_cmd_score)

    sp = sub.add_parser("dump-encoding", parents=[common],
                        help="show the token/role/index channels for one input")
    sp.add_argument("--question", required=True)
    sp.add_argument("--table", required=True)
    _add_factor_flags(sp, mask=False, bias=False)
    sp.add_argument("--max-len", type=int, default=4096)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=_cmd_dump_encoding)

    sp = sub.add_parser("mask", parents=[common], help="build and export an attention mask")
    sp.add_argument("--question", required=True)
    sp.add_argument("--table", required=True)
    _add_factor_flags(sp, pe=False, bias=False, emb=False)
    sp.add_argument("--max-len", type=int, default=4096)
    sp.add_argument("--out", help="write the block tiling to this file")
    sp.add_argument("--show", action="store_true", help="print the dense mask as ASCII")
    sp.set_defaults(func=_cmd_mask)

    sp = sub.add_parser("bench", parents=[common],
                        help="dense vs block-sparse attention wall time")
    sp.add_argument("--lengths", default="1024,2048,4096,8192")
    sp.add_argument("--scheme", default="M3", choices=_MASK_CHOICES)
    sp.add_argument("--trials", type=int, default=7)
    sp.add_argument("--head-dim", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--backward", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=_cmd_bench)

    sp = sub.add_parser("train", parents=[common], help="train the toy encoder-decoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    _add_factor_flags(sp)
    _add_model_flags(sp)
    sp.add_argument("--d-model", type=int, default=128)
    sp.add_argument("--n-heads", type=int, default=4)
    sp.add_argument("--enc-layers", type=int, default=2)
    sp.add_argument("--dec-layers", type=int, default=2)
    sp.add_argument("--ffn-dim", type=int, default=256)
    sp.add_argument("--eval-fraction", type=float, default=0.05)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--set-semantics", action="store_true")
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--pred-out", help="write per-example predictions here")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("anova", parents=[common],
                        help="effect sizes over a results table")
    sp.add_argument("--results", required=True)
    sp.add_argument("--terms", required=True,
                    help="comma-separated factor columns and A*B interactions")
    sp.add_argument("--response", default="da")
    sp.add_argument("--allow-unbalanced", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=_cmd_anova)

    sp = sub.add_parser("grid", parents=[common],
                        help="train/evaluate a factor grid into results.csv")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--configs",
                    help="semicolon-separated T/M/PE/B/E points (default: full legal grid)")
    sp.add_argument("--replicates", type=int, default=2)
    sp.add_argument("--suites", default="train,structure")
    sp.add_argument("--train-n", type=int, default=512)
    sp.add_argument("--eval-n", type=int, default=128)
    _add_model_flags(sp)
    sp.set_defaults(steps=2000, eval_every=200, context_len=1024)
    sp.add_argument("--eval-batch", type=int, default=8)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--plan-only", action="store_true")
    sp.set_defaults(func=_cmd_grid)

    sp = sub.add_parser("report", parents=[common],
                        help="paired level differences and ANOVA from results.csv")
    sp.add_argument("--results", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_report)

    return p


def _emit_error(exc: BaseException, json_mode: bool) -> None:
    if json_mode:
        sys.stderr.write(json.dumps(
            {"error": type(exc).__name__, "message": str(exc)}, sort_keys=True) + "\n")
    else:
        sys.stderr.write(f"tabenc: error: {exc}\n")


def main(argv=None) -> int:
    _cap, env_error = _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    json_mode = getattr(args, "json_errors", False)

    from .core import TabencError, ValidationError

    try:
        if env_error:
            raise ValidationError(env_error)
        return args.func(args)
    except ValidationError as exc:
        _emit_error(exc, json_mode)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError,
            json.JSONDecodeError, csv.Error) as exc:
        _emit_error(exc, json_mode)
        return 2
    except TabencError as exc:
        _emit_error(exc, json_mode)
        return 3
    except BrokenPipeError:
        return 3
    except Exception as exc:  # pragma: no cover - safety net
        if os.environ.get("TABENC_DEBUG"):
            raise
        _emit_error(exc, json_mode)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``crnnrec {train,evaluate,predict,generate-synthetic,prepare-yoochoose}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
The run directory is ``--run-dir``, else ``output.run_dir`` from the config,
else ``$CRNN_RUN_DIR``, else ``./run``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

# single-threaded BLAS by default so runs are bit-reproducible; must precede numpy
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import yaml

from . import checkpoint as ckpt_io
from . import evaluation as E
from . import synthetic as S
from .context import FEATURES, ContextSchema
from .data import (Corpus, Vocab, encode_corpus, item_x_event_type, load_yoochoose, preprocess,
                   read_corpus, split, write_corpus)
from .errors import ConfigurationError as ConfigError, CRNNError, NumericError
from .models import CELLS, INTEGRATIONS, PRESETS, final_state, predict_topk
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
RUN_DIR_ENV = "CRNN_RUN_DIR"

log = logging.getLogger("crnnrec")


# field -> (type, default); REQUIRED marks fields without a default
REQUIRED = object()
SCHEMA = {
    "data": {
        "train": (str, REQUIRED),
        "valid": (str, None),
        "item_x_event_type": (bool, False),
    },
    "context": {
        "features": (list, list(FEATURES)),
        "utc_offset_hours": (float, 0.0),
        "first_event_bucket": (bool, False),
        "event_type_oov": (bool, False),
    },
    "model": {
        "preset": (str, None),
        "cell": (str, None),
        "input_integration": (str, "none"),
        "output_integration": (str, "none"),
        "embed_dim": (int, 100),
        "hidden_dim": (int, 100),
        "share_context_projection": (bool, False),
    },
    "train": {
        "batch_size": (int, 256),
        "iterations": (int, 10000),
        "lr_start": (float, 0.01),
        "lr_end": (float, 0.001),
        "seed": (int, 0),
        "precision": (str, "float64"),
        "clip_norm": (float, None),
        "eval_every": (int, 0),
        "eval_k": (int, 10),
        "log_every": (int, 100),
    },
    "output": {
        "run_dir": (str, None),
    },
}


def _coerce(value, typ, where):
    if value is None:
        return None
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected integer, got {value!r}")
    if not isinstance(value, typ):
        raise ConfigError(f"{where}: expected {typ.__name__}, got {value!r}")
    return value


def _parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or "." not in key:
        raise ConfigError(f"--set expects section.field=value, got {text!r}")
    return key.split(".", 1), yaml.safe_load(raw)


def load_config(path, overrides=()) -> dict:
    """Read and validate a YAML run config; every field gets its default.

    Errors carry ``file:line`` for values that are present but invalid and
    name the field for values that are missing.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    loader = yaml.SafeLoader(text)
    try:
        root = loader.get_single_node()
        if root is not None and not isinstance(root, yaml.MappingNode):
            raise ConfigError(f"{path}:{root.start_mark.line + 1}: top level must be a mapping")
        raw = {}
        for knode, vnode in (root.value if root is not None else []):
            section = knode.value
            if section not in SCHEMA:
                raise ConfigError(f"{path}:{knode.start_mark.line + 1}: unknown section {section!r}")
            if not isinstance(vnode, yaml.MappingNode):
                raise ConfigError(f"{path}:{vnode.start_mark.line + 1}: section {section!r} must be a mapping")
            for fk, fv in vnode.value:
                name = fk.value
                where = f"{path}:{fk.start_mark.line + 1}: {section}.{name}"
                if name not in SCHEMA[section]:
                    raise ConfigError(f"{where}: unknown field")
                value = loader.construct_object(fv, deep=True)
                raw[(section, name)] = _coerce(value, SCHEMA[section][name][0], where)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    finally:
        loader.dispose()
    for ov in overrides:
        (section, name), value = _parse_override(ov)
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"--set {ov}: unknown field {section}.{name}")
        raw[(section, name)] = _coerce(value, SCHEMA[section][name][0], f"--set {section}.{name}")
    cfg = {}
    for section, fields in SCHEMA.items():
        cfg[section] = {}
        for name, (_, default) in fields.items():
            if (section, name) in raw:
                cfg[section][name] = raw[(section, name)]
            elif default is REQUIRED:
                raise ConfigError(f"{path}: missing required field '{section}.{name}'")
            else:
                cfg[section][name] = default
    model = cfg["model"]
    if model["preset"] is None and model["cell"] is None:
        raise ConfigError(f"{path}: missing required field 'model.cell' (or 'model.preset')")
    if model["preset"] is not None:
        if model["preset"] not in PRESETS:
            raise ConfigError(f"{path}: model.preset must be one of {sorted(PRESETS)}")
        model.update({"cell": None, "input_integration": "none", "output_integration": "none"})
        model.update(PRESETS[model["preset"]])
    if model["cell"] not in CELLS:
        raise ConfigError(f"{path}: model.cell must be one of {list(CELLS)}")
    for side in ("input_integration", "output_integration"):
        if model[side] not in INTEGRATIONS:
            raise ConfigError(f"{path}: model.{side} must be one of {list(INTEGRATIONS)}")
    bad = set(cfg["context"]["features"]) - set(FEATURES)
    if bad:
        raise ConfigError(f"{path}: context.features: unknown {sorted(bad)}")
    return cfg


def _run_dir(cfg_dir: str | None, flag: str | None) -> Path:
    path = Path(flag or cfg_dir or os.environ.get(RUN_DIR_ENV) or "run")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _schema(ctx_cfg: dict, event_types) -> ContextSchema:
    return ContextSchema(event_types=tuple(event_types), features=tuple(ctx_cfg["features"]),
                         utc_offset_hours=ctx_cfg["utc_offset_hours"],
                         first_event_bucket=ctx_cfg["first_event_bucket"],
                         event_type_oov=ctx_cfg["event_type_oov"])


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    base = Path(args.config).resolve().parent
    for key in ("train", "valid"):  # relative data paths are relative to the config file
        if cfg["data"][key]:
            cfg["data"][key] = str((base / cfg["data"][key]).resolve())
    run_dir = _run_dir(cfg["output"]["run_dir"], args.run_dir)
    cfg["output"]["run_dir"] = str(run_dir.resolve())
    corpus = read_corpus(cfg["data"]["train"])
    valid = read_corpus(cfg["data"]["valid"]) if cfg["data"]["valid"] else None
    vocab = corpus.vocab
    if cfg["data"]["item_x_event_type"]:
        corpus = item_x_event_type(corpus)
        valid = item_x_event_type(valid) if valid is not None else None
    schema = _schema(cfg["context"], corpus.event_types)
    m, t = cfg["model"], cfg["train"]
    tcfg = TrainConfig(
        batch_size=t["batch_size"], iterations=t["iterations"], lr_start=t["lr_start"],
        lr_end=t["lr_end"], embed_dim=m["embed_dim"], hidden_dim=m["hidden_dim"], seed=t["seed"],
        precision=t["precision"], cell=m["cell"], input_integration=m["input_integration"],
        output_integration=m["output_integration"],
        share_context_projection=m["share_context_projection"], clip_norm=t["clip_norm"],
        eval_every=t["eval_every"], eval_k=t["eval_k"])
    (run_dir / "config.effective.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    ckpt_path = run_dir / "model.ckpt"
    every = max(t["log_every"], 1)

    def progress(rec):
        if rec["step"] % every == 0 or rec["step"] == tcfg.iterations - 1:
            extra = "".join(f" {k} {v:.4f}" for k, v in rec.items() if k.startswith("valid_"))
            print(f"step {rec['step']:>6d}  lr {rec['lr']:.5f}  loss {rec['loss']:.4f}{extra}", flush=True)

    try:
        result = train(corpus, tcfg, schema, valid, ckpt_path, run_dir / "train_log.jsonl",
                       vocab=vocab, on_step=progress, extra={"item_x_event_type": cfg["data"]["item_x_event_type"]})
    except NumericError as exc:
        print(f"error: training diverged: {exc}; last good checkpoint at {ckpt_path}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"final loss {result.log[-1]['loss']:.4f}; checkpoint {ckpt_path}")
    return EXIT_OK


def _load_matching(checkpoint_path, corpus_path):
    ck = ckpt_io.load(checkpoint_path)
    corpus = read_corpus(corpus_path)
    if ck.train.get("item_x_event_type"):
        corpus = item_x_event_type(corpus)
    if tuple(corpus.event_types) != tuple(ck.event_types):
        raise ConfigError(f"corpus event types {list(corpus.event_types)} differ from the "
                          f"checkpoint's {list(ck.event_types)}")
    if corpus.n_items != ck.model.n_items:
        raise ConfigError(f"corpus has {corpus.n_items} items, checkpoint expects {ck.model.n_items}")
    return ck, corpus


def cmd_evaluate(args) -> int:
    ck, corpus = _load_matching(args.checkpoint, args.test)
    baseline = E.EvalReport.load(args.baseline) if args.baseline else None
    records = E.score(ck.model, ck.params, corpus.sessions, ck.schema)
    # a bare --projections prints every axis; all axes are always stored
    shown = list(E.AXES) if args.projections == [] else (args.projections or [])
    name = args.name or Path(args.checkpoint).resolve().parent.name
    report = E.evaluate(records, args.k, E.AXES, args.resamples, seed=args.seed, name=name,
                        event_types=corpus.event_types)
    if args.out:
        out = Path(args.out)
    else:  # next to the checkpoint unless a run directory is named
        out = _run_dir(str(Path(args.checkpoint).parent), args.run_dir) / "eval_report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    reports = [report] + ([baseline] if baseline is not None else [])
    print(E.format_table(reports, baseline))
    for axis in shown:
        print()
        print(E.format_projection(report, axis))
    if baseline is not None:
        cells = E.uplift(report, baseline, seed=args.seed)
        print()
        print(E.format_uplift(cells))
        up = out.with_name(out.stem + ".uplift.json")
        up.write_text(json.dumps({k: {**vars(c), "significant": c.significant} for k, c in cells.items()}))
    if args.plot_dir:
        E.write_plot_data(report, args.plot_dir)
    print(f"\nreport written to {out}")
    return EXIT_OK


def _parse_events(lines):
    events = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ConfigError(f"stdin:{lineno}: expected [session_id] ts item event_type")
        ts, item, et = parts[-3:]
        try:
            ts = float(ts)
        except ValueError:
            raise ConfigError(f"stdin:{lineno}: bad timestamp {ts!r}") from None
        events.append((ts, item, et))
    return events


def _item_index(item: str, ck) -> int:
    if ck.vocab is None:
        idx = int(item) if item.lstrip("-").isdigit() else -1
        if not 0 <= idx < ck.model.n_items:
            raise ConfigError(f"item {item!r} outside [0, {ck.model.n_items}) and no vocabulary to map it")
        return idx
    for key in (item, int(item) if item.lstrip("-").isdigit() else None):
        if key is not None and key in ck.vocab:
            return ck.vocab.encode(key)
    if ck.vocab.oov_index is None:
        raise ConfigError(f"unknown item {item!r} and the vocabulary has no OOV slot")
    log.warning("unknown item %r mapped to OOV", item)
    return ck.vocab.oov_index


def cmd_predict(args) -> int:
    ck = ckpt_io.load(args.checkpoint)
    events = _parse_events(sys.stdin.read().splitlines())
    if not events:
        raise ConfigError("no events on stdin; expected lines of '[session_id] ts item event_type'")
    if ck.train.get("item_x_event_type"):
        raise ConfigError("predict does not support item x event-type checkpoints")
    types = list(ck.event_types)

    def type_index(et):
        return int(et) if et.isdigit() else (types.index(et) if et in types else len(types))

    items = [_item_index(item, ck) for _, item, _ in events]
    ets = [type_index(et) for _, _, et in events]
    ts = [t for t, _, _ in events]
    schema = ck.schema if ck.model.context_dim else None
    contexts = schema.dense(schema.encode_session(ts, ets)) if schema is not None else None
    h = final_state(ck.model, ck.params, items, contexts)
    c_next = None
    if schema is not None:
        next_type = type_index(args.next_event_type) if args.next_event_type else 0
        next_ts = args.next_ts if args.next_ts is not None else ts[-1]
        c_next = schema.dense(np.asarray(schema.encode(next_ts, next_type, ts[-1]).indices))
    top, probs = predict_topk(ck.model, ck.params, h, c_next, args.k)
    for rank, (i, p) in enumerate(zip(top, probs), 1):
        label = ck.vocab.decode(int(i)) if ck.vocab is not None else int(i)
        print(f"{rank}\t{label}\t{p:.6g}")
    return EXIT_OK


def cmd_generate_synthetic(args) -> int:
    if args.spec:
        spec = S.SyntheticSpec.load(args.spec)
    else:
        spec = S.informative_spec(n_items=args.n_items, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec.save(out / "spec.json")
    vocab = Vocab(list(range(spec.n_items)), with_oov=False)
    seeds = np.random.SeedSequence(args.seed).generate_state(3)
    for part, n, seed in (("train", args.train, seeds[0]), ("valid", args.valid, seeds[1]),
                          ("test", args.test, seeds[2])):
        if n <= 0:
            continue
        sessions = S.generate_synthetic(spec, n, seed=int(seed), id_prefix=part[:2])
        write_corpus(Corpus(sessions, spec.n_items, spec.event_types, vocab), out / f"{part}.tsv")
    bayes = {f"recall@{k}": S.bayes_recall_at_k(spec, k) for k in (1, 5, 10, 20)}
    bayes.update({f"recall@{k}_without_context": S.bayes_recall_at_k(spec, k, False) for k in (1, 5, 10, 20)})
    (out / "bayes.json").write_text(json.dumps(bayes, indent=1))
    print(json.dumps(bayes, indent=1))
    return EXIT_OK


def cmd_prepare_yoochoose(args) -> int:
    sessions, report = load_yoochoose(args.clicks, args.buys)
    print(f"read {report.rows} rows, skipped {report.malformed} malformed")
    if args.max_sessions:
        sessions = sessions[-args.max_sessions:]
    day = 86400.0
    train_s, valid_s, test_s = split(sessions, "time", valid_seconds=args.valid_days * day,
                                     test_seconds=args.test_days * day)
    train_s, vocab = preprocess(train_s, args.min_count, args.max_len)
    valid_s, _ = preprocess(valid_s, args.min_count, args.max_len, vocab)
    test_s, _ = preprocess(test_s, args.min_count, args.max_len, vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    types = ("view", "sale")
    for part, ss in (("train", train_s), ("valid", valid_s), ("test", test_s)):
        write_corpus(encode_corpus(ss, vocab, types), out / f"{part}.tsv")
        print(f"{part}: {len(ss)} sessions")
    print(f"{vocab.size} items including OOV")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crnnrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="override a config field (repeatable)")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Recall@K report for a checkpoint on a test corpus")
    p.add_argument("checkpoint")
    p.add_argument("test")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--projections", nargs="*", choices=E.AXES, metavar="AXIS",
                   help="print projection tables (all axes when given without names)")
    p.add_argument("--baseline", help="report JSON to compute uplift against")
    p.add_argument("--resamples", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name")
    p.add_argument("--out", help="report path (default: <run dir>/eval_report.json)")
    p.add_argument("--plot-dir", help="write per-projection plot data here")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="top-K next items for a session read from stdin")
    p.add_argument("checkpoint")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--next-event-type", help="event type assumed for the predicted event")
    p.add_argument("--next-ts", type=float, help="timestamp assumed for the predicted event")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("generate-synthetic", help="write a context-dependent synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="synthetic spec JSON (default: a random informative spec)")
    p.add_argument("--n-items", type=int, default=100)
    p.add_argument("--train", type=int, default=20000)
    p.add_argument("--valid", type=int, default=2000)
    p.add_argument("--test", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate_synthetic)

    p = sub.add_parser("prepare-yoochoose", help="convert YooChoose CSVs to the corpus format")
    p.add_argument("clicks")
    p.add_argument("buys")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--valid-days", type=float, default=7)
    p.add_argument("--test-days", type=float, default=7)
    p.add_argument("--max-sessions", type=int, help="keep only the most recent N sessions")
    p.set_defaults(func=cmd_prepare_yoochoose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CRNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

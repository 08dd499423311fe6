"""Command-line entry point: ``bnrhn {train,decode,score,diagnose,gradcheck,compare,synth}``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 numerical abort.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import capmetrics
from .cells import ConfigurationError, RhnParams
from .dataio import (
    CheckpointError,
    DataError,
    DatasetSpec,
    load_checkpoint,
    read_jsonl,
    save_checkpoint,
    synth_dataset,
    write_jsonl,
)
from .diagnostics import (
    gershgorin_discs,
    temporal_jacobian,
    write_discs_csv,
    write_jacobian_csv,
    write_trace_csv,
    GradTrace,
)
from .training import (
    MODEL_KINDS,
    RUN_CSV_HEADER,
    NonFiniteLossError,
    TrainConfig,
    backward_unroll,
    forward_unroll,
    greedy_decode_batch,
    make_batch,
    model_grad_check,
    train,
    write_run_csv,
)
from .vocab import START

log = logging.getLogger("bnrhn")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# experiment configuration

DATA_KEYS = {
    "dataset": str,
    "synth_n": int,
    "synth_seed": int,
    "synth_feature_width": int,
    "synth_noise": float,
    "synth_min_len": int,
    "synth_max_len": int,
    "out_dir": str,
}
DATA_DEFAULTS = {
    "dataset": "",
    "synth_n": 200,
    "synth_seed": 0,
    "synth_feature_width": 32,
    "synth_noise": 0.1,
    "synth_min_len": 5,
    "synth_max_len": 9,
    "out_dir": "runs",
}


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_clip(text):
    low = text.strip().lower()
    if low == "auto":
        return "auto"
    if low in ("none", "off", ""):
        return None
    return float(text)


def _train_parsers():
    parsers = {}
    for f in fields(TrainConfig):
        if f.name == "clip":
            parsers[f.name] = _parse_clip
        elif f.type in (bool, "bool"):
            parsers[f.name] = _parse_bool
        elif f.type in (int, "int"):
            parsers[f.name] = int
        elif f.type in (float, "float"):
            parsers[f.name] = float
        else:
            parsers[f.name] = str
    return parsers


def parse_config_text(text, source="config"):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs[key] = value
    return pairs


def resolve_config(pairs):
    """Validate raw string pairs; returns ``(TrainConfig, data_options)``.

    Unknown keys and unparsable values raise UsageError naming the field.
    """
    parsers = _train_parsers()
    train_kwargs = {}
    data = dict(DATA_DEFAULTS)
    for key, value in pairs.items():
        if key in parsers:
            try:
                train_kwargs[key] = parsers[key](value)
            except ValueError as exc:
                raise UsageError(f"field {key!r}: {exc}") from None
        elif key in DATA_KEYS:
            try:
                data[key] = DATA_KEYS[key](value)
            except ValueError as exc:
                raise UsageError(f"field {key!r}: {exc}") from None
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        cfg = TrainConfig(**train_kwargs)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    return cfg, data


def config_snapshot(cfg, data):
    lines = []
    for k, v in sorted(cfg.to_dict().items()):
        lines.append(f"{k} = {'none' if v is None else v}")
    for k, v in sorted(data.items()):
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _load_dataset(data):
    if data["dataset"]:
        return read_jsonl(data["dataset"])
    spec = DatasetSpec(
        n_samples=data["synth_n"],
        feature_width=data["synth_feature_width"],
        min_len=data["synth_min_len"],
        max_len=data["synth_max_len"],
        seed=data["synth_seed"],
        noise=data["synth_noise"],
    )
    return synth_dataset(spec)


def _overrides(items):
    pairs = {}
    for item in items:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"override must look like --key=value, got {item!r}")
        key, value = item[2:].split("=", 1)
        pairs[key.replace("-", "_")] = value
    return pairs


# --------------------------------------------------------------------------
# commands


def cmd_train(args, extra):
    pairs = {}
    if args.config:
        with open(args.config) as fh:
            pairs.update(parse_config_text(fh.read(), args.config))
    pairs.update(_overrides(extra))
    cfg, data = resolve_config(pairs)
    snapshot = config_snapshot(cfg, data)
    digest = hashlib.sha256(snapshot.encode()).hexdigest()[:12]
    run_dir = os.path.join(data["out_dir"], digest)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(snapshot)
    try:
        dataset = _load_dataset(data)
    except (DataError, ValueError, OSError) as exc:
        raise UsageError(f"dataset: {exc}") from None
    try:
        report = train(dataset, cfg)
    except NonFiniteLossError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_run_csv(report, os.path.join(run_dir, "run.csv"))
    save_checkpoint(report.params, cfg.to_dict(), report.vocab, os.path.join(run_dir, "checkpoint.json"))
    final = report.records[-1].loss if report.records else float("nan")
    print(f"{run_dir}\tsteps={len(report.records)}\tfinal_loss={final:.6g}\twall_clock={report.wall_clock:.1f}s")
    return EXIT_OK


def cmd_decode(args, extra):
    try:
        params, cfg, vocab = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    samples = read_jsonl(args.dataset)
    out = {}
    if samples:
        if samples[0].feature.shape[0] != params.feature_width:
            raise UsageError(
                f"dataset feature width {samples[0].feature.shape[0]} does not match checkpoint width {params.feature_width}"
            )
        max_len = args.max_len or int(cfg.get("max_len", 16))
        captions = greedy_decode_batch(np.stack([s.feature for s in samples]), params, vocab, max_len)
        out = {s.id: " ".join(c) for s, c in zip(samples, captions)}
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
    return EXIT_OK


def cmd_score(args, extra):
    with open(args.candidates) as fh:
        cands = json.load(fh)
    with open(args.references) as fh:
        refs = json.load(fh)
    missing = sorted(set(cands) - set(refs))
    if missing:
        raise UsageError(f"candidate ids without references: {', '.join(missing)}")
    ids = sorted(cands)
    c_tok = [capmetrics.tokenize(cands[i]) for i in ids]
    r_tok = []
    for i in ids:
        r = refs[i]
        r_tok.append([capmetrics.tokenize(x) for x in ([r] if isinstance(r, str) else r)])
    scores = capmetrics.score_corpus(c_tok, r_tok) if ids else {f"bleu_{n}": 0.0 for n in range(1, 5)} | {"rouge_l": 0.0}
    text = json.dumps(scores, indent=1, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def _operating_point(params, samples, index):
    if samples:
        feature = samples[index].feature[None, :]
    else:
        feature = np.zeros((1, params.feature_width))
    s = np.tanh(feature @ params.W_img + params.b_img)
    x = params.embed[[START]]
    return s, x


def cmd_diagnose(args, extra):
    try:
        params, cfg, vocab = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    samples = read_jsonl(args.dataset) if args.dataset else []
    if samples and not 0 <= args.sample < len(samples):
        raise UsageError(f"--sample {args.sample} out of range for {len(samples)} samples")
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    if args.mode in ("jacobian", "gersh"):
        if not isinstance(params.cell, RhnParams):
            raise UsageError("temporal Jacobian diagnostics need an RHN checkpoint")
        s, x = _operating_point(params, samples, args.sample)
        J = temporal_jacobian(params.cell, s, x, method=args.method)
        if args.mode == "jacobian":
            other = "finite_diff" if args.method == "analytic" else "analytic"
            J2 = temporal_jacobian(params.cell, s, x, method=other)
            diff = float(np.max(np.abs(J - J2)))
            path = os.path.join(out_dir, "jacobian.csv")
            write_jacobian_csv(J, path)
            print(f"{path}\tmax_abs_diff_{args.method}_vs_{other}={diff:.3e}")
            return EXIT_OK if diff < 1e-5 else EXIT_CHECK
        discs = gershgorin_discs(J)
        path = os.path.join(out_dir, "discs.csv")
        write_discs_csv(discs, path)
        print(f"{path}\tmax_radius={max(d.radius for d in discs):.3e}\tmax_center_offset={max(abs(d.center - 1) for d in discs):.3e}")
        return EXIT_OK
    # gradtrace
    if not samples:
        raise UsageError("gradtrace needs --dataset to supply a caption")
    sample = samples[args.sample]
    batch = make_batch([sample.id], sample.feature[None, :], [vocab.encode(sample.references[0])], vocab)
    _, cache = forward_unroll(batch, params, "infer")
    norms = []
    backward_unroll(cache, params, trace=norms)
    trace = GradTrace(norms=norms)
    path = os.path.join(out_dir, "trace.csv")
    write_trace_csv(trace, path)
    print(f"{path}\tmax_min_ratio={trace.ratio():.6g}")
    return EXIT_OK


def cmd_gradcheck(args, extra):
    kinds = MODEL_KINDS if args.model == "all" else (args.model,)
    fault = 0.1 if args.inject_fault else 0.0
    ok = True
    for kind in kinds:
        for depth in (1, 2, 3) if kind != "lstm" else (1,):
            rep = model_grad_check(kind, depth, seed=args.seed, fault=fault)
            name, idx, ana, num = rep.worst
            status = "PASS" if rep.passed else "FAIL"
            print(
                f"{status}\t{kind}\tD={depth}\tmax_rel_err={rep.max_rel_err:.3e}\tcoords={rep.n_checked}"
                f"\tworst={name}{list(idx)} analytic={ana:.6e} numeric={num:.6e}"
            )
            ok &= rep.passed
    return EXIT_OK if ok else EXIT_CHECK


def read_run_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != RUN_CSV_HEADER:
        raise UsageError(f"{path}: header must be {','.join(RUN_CSV_HEADER)}")
    return [(int(r[0]), float(r[3])) for r in rows[1:]]


def steps_to_threshold(losses, threshold, smooth=0.0):
    """First step whose (optionally exponentially smoothed) loss is <= threshold."""
    ema = None
    for step, loss in losses:
        ema = loss if ema is None else smooth * ema + (1 - smooth) * loss
        if ema <= threshold:
            return step
    return None


def compare_runs(runs, threshold=None, relative=None, smooth=0.0):
    """Rows ``(label, threshold, steps or None, rank)``; equal step counts share a rank."""
    rows = []
    for label, losses in runs:
        thr = threshold if relative is None else relative * (losses[0][1] if losses else float("nan"))
        rows.append((label, thr, steps_to_threshold(losses, thr, smooth)))
    reached = sorted({r[2] for r in rows if r[2] is not None})
    out = []
    for label, thr, steps in rows:
        rank = 1 + sum(1 for s in reached if s < steps) if steps is not None else None
        out.append((label, thr, steps, rank))
    return out


def cmd_compare(args, extra):
    if len(args.runs) < 2:
        raise UsageError("compare needs at least two run.csv files")
    if (args.threshold is None) == (args.relative is None):
        raise UsageError("give exactly one of --threshold or --relative")
    runs = [(path, read_run_csv(path)) for path in args.runs]
    rows = compare_runs(runs, args.threshold, args.relative, args.smooth)
    out = args.out or "comparison.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "threshold", "steps_to_threshold", "rank"])
        for label, thr, steps, rank in rows:
            w.writerow([label, repr(thr), "not reached" if steps is None else steps, "" if rank is None else rank])
    for label, thr, steps, rank in sorted(rows, key=lambda r: (r[3] is None, r[3] or 0, r[0])):
        print(f"{rank or '-'}\t{label}\t{'not reached' if steps is None else steps}")
    return EXIT_OK


def cmd_synth(args, extra):
    try:
        spec = DatasetSpec(
            n_samples=args.n,
            feature_width=args.feature_width,
            seed=args.seed,
            min_len=args.min_len,
            max_len=args.max_len,
        )
        samples = synth_dataset(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_jsonl(samples, args.out)
    if args.references:
        with open(args.references, "w") as fh:
            json.dump({s.id: [" ".join(r) for r in s.references] for s in samples}, fh, indent=1, sort_keys=True)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bnrhn", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a caption decoder; extra --key=value pairs override the config")
    t.add_argument("config", nargs="?", help="flat key=value config file")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="greedy-decode captions for a JSONL dataset")
    d.add_argument("checkpoint")
    d.add_argument("dataset")
    d.add_argument("out")
    d.add_argument("--max-len", type=int, default=None)
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="BLEU-1..4, ROUGE-L and CIDEr of candidates against references")
    s.add_argument("candidates")
    s.add_argument("references")
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)

    g = sub.add_parser("diagnose", help="temporal Jacobian, Gershgorin discs or gradient-norm trace")
    g.add_argument("checkpoint")
    g.add_argument("--mode", choices=("jacobian", "gersh", "gradtrace"), required=True)
    g.add_argument("--dataset")
    g.add_argument("--sample", type=int, default=0)
    g.add_argument("--method", choices=("analytic", "finite_diff"), default="analytic")
    g.add_argument("--out", help="output directory (default: current directory)")
    g.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("gradcheck", help="finite-difference check of full tiny models")
    c.add_argument("--model", choices=MODEL_KINDS + ("all",), default="all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", action="store_true", help="scale analytic gradients by 1.1")
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("compare", help="steps-to-threshold ranking of run.csv files")
    m.add_argument("runs", nargs="+")
    m.add_argument("--threshold", type=float)
    m.add_argument("--relative", type=float, help="threshold as a fraction of each run's first loss")
    m.add_argument("--smooth", type=float, default=0.0, help="EMA factor applied before thresholding")
    m.add_argument("--out")
    m.set_defaults(func=cmd_compare)

    y = sub.add_parser("synth", help="write a synthetic JSONL captioning dataset")
    y.add_argument("out")
    y.add_argument("--n", type=int, default=200)
    y.add_argument("--feature-width", type=int, default=32)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--min-len", type=int, default=5)
    y.add_argument("--max-len", type=int, default=9)
    y.add_argument("--references", help="also write a references JSON {id: [captions]}")
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if extra and args.command != "train":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

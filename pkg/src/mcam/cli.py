"""``mcam`` command: synth, train, bench and analyze.

Every command writes into ``--out`` and leaves a ``run_manifest.json`` there;
all but synth also write the effective ``config.json``. Settings resolve as
flags > ``--config`` JSON file > built-in defaults. Log verbosity comes from
``MCAM_LOG_LEVEL``.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from datetime import datetime, timezone

import numpy as np

from mcam import __version__, analysis, svg
from mcam.data import (CLASS_NAMES, DEFAULT_SYNTH_SPEC, load_dataset, save_dataset,
                       synth_generate)
from mcam.errors import ConfigurationError, DegenerateSampleError, MCAMError
from mcam.evalstats import paired_t_test
from mcam.models import ATTENTION_NAMES, AttentionKind, EEGNet, config_hash, param_count
from mcam.training import TrainConfig, prepare_subject, train

log = logging.getLogger("mcam")

MANIFEST_NAME = "run_manifest.json"
DEFAULT_PAIRS = "none<m3,cbam<m3,m3<se,m1<m3"
GRADCHECK_TOL = 1e-4


# ---------------------------------------------------------------- plumbing


class RunManifest:
    """Provenance record written once per output directory."""

    def __init__(self, command, out_dir, seed=None, inputs=()):
        self.command = list(command)
        self.out_dir = out_dir
        self.seed = seed
        self.inputs = [os.path.abspath(p) for p in inputs]
        self.config_hash = None
        self.outputs = []
        self.started = time.time()

    def add(self, path):
        self.outputs.append(os.path.relpath(path, self.out_dir))
        return path

    def write(self):
        entries = []
        for rel in sorted(set(self.outputs)):
            with open(os.path.join(self.out_dir, rel), "rb") as fh:
                entries.append({"path": rel, "sha256": hashlib.sha256(fh.read()).hexdigest()})
        doc = {
            "tool": "mcam",
            "version": __version__,
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": entries,
            "wall_clock": {
                "started": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
                "seconds": round(time.time() - self.started, 3),
            },
        }
        _write_json(os.path.join(self.out_dir, MANIFEST_NAME), doc)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _read_config(path):
    if not path:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config file must hold a JSON object")
    return doc


TRAIN_FLAGS = {f.name for f in fields(TrainConfig)}


def resolve_train_config(args, file_cfg, keys=TRAIN_FLAGS):
    """TrainConfig from defaults, then the config file, then explicit flags."""
    unknown = set(file_cfg) - keys - {"attention_list", "pairs", "subjects"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = {k: v for k, v in file_cfg.items() if k in keys}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return TrainConfig(**merged)


def _add_train_flags(p):
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    p.add_argument("--batch", type=int, help="batch size (default 256)")
    p.add_argument("--dropout", type=float, help="dropout rate (default 0.5)")
    p.add_argument("--penalty-weight", dest="penalty_weight", type=float,
                   help="monotonicity penalty weight lambda (default 0.1)")
    p.add_argument("--grid-n", dest="grid_n", type=int, help="penalty grid cells N, even (default 40)")
    p.add_argument("--epochs", type=int, help="epochs per repetition (default 30)")
    p.add_argument("--batches-per-epoch", dest="batches_per_epoch", type=int,
                   help="generator batches per epoch (default 20)")
    p.add_argument("--val-batches", dest="val_batches", type=int,
                   help="balanced validation batches drawn once per repetition (default 2)")
    p.add_argument("--reps", dest="repetitions", type=int, help="repetitions (default 10)")
    p.add_argument("--seed", type=int, help="base seed (default 0)")
    p.add_argument("--exclude-baseline", dest="exclude_baseline", action="store_const", const=True,
                   help="drop the first 3 s of each trial before splitting")
    p.add_argument("--global-norm", dest="per_channel_norm", action="store_const", const=False,
                   help="one baseline scale for all channels instead of one per channel")
    p.add_argument("--config", help="JSON file of defaults (flags win)")


# ---------------------------------------------------------------- synth


def cmd_synth(args):
    spec = dict(DEFAULT_SYNTH_SPEC)
    if args.spec:
        spec.update(_read_config(args.spec))
    if args.subjects is not None:
        spec["subjects"] = args.subjects
    os.makedirs(args.out, exist_ok=True)
    man = RunManifest(args.invocation, args.out, args.seed, [args.spec] if args.spec else [])
    ds = synth_generate(spec, seed=args.seed)
    save_dataset(ds, args.out)
    man.config_hash = config_hash(ds.info["spec"], args.seed)
    for name in sorted(os.listdir(args.out)):
        if name != MANIFEST_NAME:
            man.add(os.path.join(args.out, name))
    man.write()
    print(f"wrote {len(ds.subject_ids)} subjects to {args.out}")
    return 0


# ---------------------------------------------------------------- train


def cmd_train(args):
    cfg = resolve_train_config(args, _read_config(args.config))
    os.makedirs(os.path.join(args.out, "checkpoints"), exist_ok=True)
    man = RunManifest(args.invocation, args.out, cfg.seed, [args.data] + ([args.config] if args.config else []))
    man.config_hash = cfg.hash()
    ds = load_dataset(args.data, subjects=[cfg.subject])
    result = train(cfg, ds)
    names = []
    for r in result.repetitions:
        name = os.path.join("checkpoints", f"rep{r.repetition:02d}.ckpt")
        r.checkpoint.save(man.add(os.path.join(args.out, name)))
        names.append(name)
    man.add(_write_text(os.path.join(args.out, "run_result.json"), result.to_json(names)))
    man.add(_write_json(os.path.join(args.out, "config.json"), cfg.to_dict()))
    man.write()
    agg = result.aggregate()
    print(f"subject {cfg.subject} {cfg.attention}: acc {agg['accuracy']['mean']:.4f}"
          f"±{agg['accuracy']['std']:.4f}  f1 {agg['f1']['mean']:.4f}±{agg['f1']['std']:.4f}")
    return 0


# ---------------------------------------------------------------- bench


def parse_pairs(text):
    pairs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "<" not in item:
            raise ConfigurationError(f"pair {item!r} must look like a<b")
        a, b = (s.strip().lower() for s in item.split("<", 1))
        for x in (a, b):
            AttentionKind.parse(x)
        pairs.append((a, b))
    return pairs


def _pct(m, s):
    return f"{100 * m:.1f}±{100 * s:.1f}"


def summary_csv(rows):
    lines = ["attention,params,accuracy,specificity,f1,accuracy_mean,accuracy_std,"
             "specificity_mean,specificity_std,f1_mean,f1_std"]
    for r in rows:
        lines.append(",".join([r["attention"], str(r["params"]),
                               _pct(r["accuracy_mean"], r["accuracy_std"]),
                               _pct(r["specificity_mean"], r["specificity_std"]),
                               _pct(r["f1_mean"], r["f1_std"])]
                              + [repr(float(r[k])) for k in ("accuracy_mean", "accuracy_std",
                                                              "specificity_mean", "specificity_std",
                                                              "f1_mean", "f1_std")]))
    return "\n".join(lines) + "\n"


def bench_tables(per_subject, variants, pairs):
    """Summary rows pooled over all (subject, repetition) runs; paired t-tests on subject means.

    ``per_subject[label][sid]`` is a list of per-repetition metric dicts.
    Returns (summary rows, t-test rows, first degenerate-sample error or None).
    """
    t2 = []
    for v in variants:
        runs = [r for sid in sorted(per_subject[v]) for r in per_subject[v][sid]]
        row = {"attention": v, "params": param_count(TrainConfig().backbone(), AttentionKind.parse(v))}
        for key in ("accuracy", "specificity", "f1"):
            vals = np.array([r[key] for r in runs])
            row[f"{key}_mean"], row[f"{key}_std"] = float(vals.mean()), float(vals.std())
        t2.append(row)
    t1, problem = [], None
    for a, b in pairs:
        if a not in per_subject or b not in per_subject:
            continue
        sids = sorted(set(per_subject[a]) & set(per_subject[b]))
        fa = [float(np.mean([r["f1"] for r in per_subject[a][s]])) for s in sids]
        fb = [float(np.mean([r["f1"] for r in per_subject[b][s]])) for s in sids]
        row = {"h0": f"mu_{a} = mu_{b}", "h1": f"mu_{a} < mu_{b}", "a": a, "b": b, "n": len(sids)}
        try:
            row.update(paired_t_test(fa, fb))
        except (DegenerateSampleError, MCAMError) as exc:
            row["note"] = str(exc)
            problem = problem or exc
        t1.append(row)
    return t2, t1, problem


def ttest_csv(rows):
    lines = ["h0,h1,n,t,p,mean_diff,note"]
    for r in rows:
        num = [repr(float(r[k])) if k in r else "" for k in ("t", "p", "mean_diff")]
        note = r.get("note", "").replace('"', "'")
        lines.append(",".join([r["h0"], r["h1"], str(r["n"])] + num + [f'"{note}"' if note else ""]))
    return "\n".join(lines) + "\n"


def cmd_bench(args):
    file_cfg = _read_config(args.config)
    base = resolve_train_config(args, file_cfg)
    variants = [v.strip().lower() for v in
                (args.attention_list or ",".join(file_cfg.get("attention_list", ATTENTION_NAMES))).split(",")]
    for v in variants:
        AttentionKind.parse(v)
    pairs = parse_pairs(args.pairs or file_cfg.get("pairs", DEFAULT_PAIRS))
    os.makedirs(args.out, exist_ok=True)
    man = RunManifest(args.invocation, args.out, base.seed, [args.data] + ([args.config] if args.config else []))
    subjects = args.subjects or file_cfg.get("subjects")
    ds = load_dataset(args.data, subjects=subjects)
    per_subject, runs = {v: {} for v in variants}, []
    for sid in ds.subject_ids:
        for v in variants:
            cfg = TrainConfig(**{**base.to_dict(), "attention": v, "subject": sid})
            res = train(cfg, ds)
            per_subject[v][sid] = [{"accuracy": r.accuracy, "specificity": r.specificity, "f1": r.f1}
                                   for r in res.repetitions]
            runs.append({"subject": sid, "attention": v, "config_hash": cfg.hash(),
                         "repetitions": per_subject[v][sid]})
    t2, t1, problem = bench_tables(per_subject, variants, pairs)
    effective = {**base.to_dict(), "attention_list": variants,
                 "pairs": [f"{a}<{b}" for a, b in pairs], "subjects": ds.subject_ids}
    effective.pop("attention")
    effective.pop("subject")
    man.config_hash = config_hash(effective)
    man.add(_write_text(os.path.join(args.out, "summary.csv"), summary_csv(t2)))
    man.add(_write_text(os.path.join(args.out, "ttests.csv"), ttest_csv(t1)))
    man.add(_write_json(os.path.join(args.out, "bench_runs.json"), {"runs": runs}))
    man.add(_write_json(os.path.join(args.out, "config.json"), effective))
    man.write()
    print(summary_csv(t2), end="")
    print(ttest_csv(t1), end="")
    if problem is not None:
        print(f"error: {problem}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- analyze


def _model_names(ckpts, paths):
    labels = [c.kind.label for c in ckpts]
    names = []
    for lab, p in zip(labels, paths):
        stem = os.path.splitext(os.path.basename(p))[0]
        names.append(lab if labels.count(lab) == 1 else f"{lab}/{stem}")
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    return names


def _test_split(args, ckpt):
    meta = ckpt.metadata
    cfg = TrainConfig(subject=args.subject, exclude_baseline=bool(meta.get("exclude_baseline", False)),
                      per_channel_norm=bool(meta.get("per_channel_norm", True)))
    ds = load_dataset(args.data, subjects=[args.subject])
    return prepare_subject(ds, cfg)


def cmd_analyze(args):
    os.makedirs(args.out, exist_ok=True)
    inputs = list(getattr(args, "checkpoints", None) or []) + ([args.data] if getattr(args, "data", None) else [])
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "invocation")}
    man = RunManifest(args.invocation, args.out, getattr(args, "seed", None), inputs)
    man.config_hash = config_hash(opts)
    status = ANALYSES[args.analysis](args, man)
    man.add(_write_json(os.path.join(args.out, "config.json"), opts))
    man.write()
    return status


def _load(args):
    ckpts = analysis.load_checkpoints(args.checkpoints)
    return ckpts, _model_names(ckpts, args.checkpoints)


def an_sweep(args, man):
    ckpts, names = _load(args)
    split = _test_split(args, ckpts[0])
    models = {n: EEGNet.from_checkpoint(c) for n, c in zip(names, ckpts)}
    cutoffs = [float(c) for c in args.cutoffs.split(",")]
    rep = analysis.sweep(models, split.test_windows, split.test_labels, cutoffs)
    man.add(_write_text(os.path.join(args.out, "sweep.csv"), rep.to_csv()))
    man.add(_write_text(os.path.join(args.out, "sweep_recall.csv"), rep.recall_csv()))
    series = {n: (rep.cutoffs, rep.accuracy[n]) for n in names}
    man.add(_write_text(os.path.join(args.out, "sweep.svg"), svg.line_chart(
        series, "Accuracy under lowpass filtering", "cutoff (Hz)", "accuracy", (0.0, 1.0))))
    print(rep.to_csv(), end="")
    return 0


def an_morph(args, man):
    ckpts, names = _load(args)
    split = _test_split(args, ckpts[0])
    models = {n: EEGNet.from_checkpoint(c) for n, c in zip(names, ckpts)}
    anchors = analysis.select_anchors(models, split.test_windows, split.test_labels)
    windows = [split.test_windows[i] for i in anchors]
    out = {}
    for n, m in models.items():
        rep = analysis.morph_report(m, windows, args.grid_step, anchors)
        out[n] = rep.to_dict()
        polys = {CLASS_NAMES[i]: [(rho, th) for rho, th, _ in rep.vertices[i]] for i in range(rep.n_classes)}
        safe = n.replace("/", "_").replace("#", "_")
        man.add(_write_text(os.path.join(args.out, f"morph_{safe}.svg"),
                            svg.polar_polygons(polys, f"Crossing values ({n})")))
        print(f"{n}: S = {np.round(rep.scores, 2).tolist()}  std = {rep.std:.3f}")
    man.add(_write_json(os.path.join(args.out, "morph.json"), out))
    return 0


def an_scalp(args, man):
    ckpts, _ = _load(args)
    rep = analysis.scalp_stats(ckpts)
    man.add(_write_text(os.path.join(args.out, "scalp.csv"), rep.to_csv()))
    man.add(_write_text(os.path.join(args.out, "scalp.svg"), svg.heatmap(
        rep.mean.tolist(), [f"k{i}" for i in range(rep.mean.shape[0])], rep.channel_names,
        f"Mean normalised spatial weights over {rep.n_checkpoints} checkpoints")))
    print(f"scalp statistics over {rep.n_checkpoints} checkpoints")
    return 0


def an_trace_f(args, man):
    ckpts, names = _load(args)
    traces = [analysis.trace_f(c, args.points) for c in ckpts]
    t = traces[0][0]
    lines = [",".join(["t"] + names)]
    for i in range(t.size):
        lines.append(",".join([repr(float(t[i]))] + [repr(float(f[i])) for _, f in traces]))
    man.add(_write_text(os.path.join(args.out, "trace_f.csv"), "\n".join(lines) + "\n"))
    man.add(_write_text(os.path.join(args.out, "trace_f.svg"), svg.line_chart(
        {n: (t.tolist(), f.tolist()) for n, (_, f) in zip(names, traces)},
        "Learned MCAM map", "C_ij", "A_ij")))
    print(f"traced {len(ckpts)} maps on {t.size} points")
    return 0


def an_gradcheck(args, man):
    kinds = [k.strip().lower() for k in args.kinds.split(",")]
    for k in kinds:
        AttentionKind.parse(k)
    errs = {}
    for k in kinds:
        errs[k] = analysis.model_grad_check(k, seed=args.seed, batch=args.batch, eps=args.eps)
        print(f"{k:5s} max relative error {errs[k]:.3e} {'ok' if errs[k] < GRADCHECK_TOL else 'FAIL'}")
    man.add(_write_json(os.path.join(args.out, "gradcheck.json"),
                        {"tolerance": GRADCHECK_TOL, "max_relative_error": errs}))
    return 0 if all(e < GRADCHECK_TOL for e in errs.values()) else 1


ANALYSES = {"sweep": an_sweep, "morph": an_morph, "scalp": an_scalp,
            "trace-f": an_trace_f, "gradcheck": an_gradcheck}


# ---------------------------------------------------------------- parser


def _attention(value):
    try:
        return AttentionKind.parse(value).label
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser():
    ap = argparse.ArgumentParser(prog="mcam", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mcam {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic DEAP-shaped dataset")
    p.add_argument("--spec", help="JSON synthetic spec (missing keys take defaults)")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--subjects", type=int, help="override the spec's subject count")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="repeated training on one subject")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subject", type=int, help="subject id (default 1)")
    p.add_argument("--attention", type=_attention,
                   help=f"attention module: {', '.join(ATTENTION_NAMES)} (default none)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="train every variant on every subject, then tabulate")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--attention-list", dest="attention_list",
                   help=f"comma-separated variants (default {','.join(ATTENTION_NAMES)})")
    p.add_argument("--pairs", help=f"t-test pairs a<b, comma-separated (default {DEFAULT_PAIRS})")
    p.add_argument("--subjects", type=int, nargs="+", help="subset of subject ids (default all)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="sensitivity analyses and gradient check")
    asub = p.add_subparsers(dest="analysis", required=True)
    for name, helptext in (("sweep", "accuracy under brick-wall lowpass filtering"),
                           ("morph", "crossing values along sample interpolations")):
        q = asub.add_parser(name, help=helptext)
        q.add_argument("--data", required=True, help="dataset directory")
        q.add_argument("--subject", type=int, default=1, help="subject whose test windows are used")
        q.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files")
        q.add_argument("--out", required=True, help="output directory")
        if name == "sweep":
            q.add_argument("--cutoffs", default=",".join(f"{c:g}" for c in analysis.DEFAULT_CUTOFFS),
                           help="comma-separated cutoffs in Hz")
        else:
            q.add_argument("--grid-step", dest="grid_step", type=float, default=0.01,
                           help="interpolation grid step (default 0.01)")
    q = asub.add_parser("scalp", help="spatial filter statistics across checkpoints")
    q.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files")
    q.add_argument("--out", required=True, help="output directory")
    q = asub.add_parser("trace-f", help="learned MCAM map on a grid over [-1, 1]")
    q.add_argument("--checkpoints", nargs="+", required=True, help="MCAM checkpoint files")
    q.add_argument("--points", type=int, default=1001, help="grid points (default 1001)")
    q.add_argument("--out", required=True, help="output directory")
    q = asub.add_parser("gradcheck", help="finite-difference check of every attention kind")
    q.add_argument("--kinds", default=",".join(ATTENTION_NAMES), help="comma-separated kinds")
    q.add_argument("--seed", type=int, default=0, help="init and input seed (default 0)")
    q.add_argument("--batch", type=int, default=4, help="batch size (default 4)")
    q.add_argument("--eps", type=float, default=1e-5, help="finite-difference step (default 1e-5)")
    q.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None):
    level = os.environ.get("MCAM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.invocation = ["mcam"] + argv
    try:
        return args.func(args)
    except MCAMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

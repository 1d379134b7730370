"""Command-line front end: ``mixtopic <subcommand> ...``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or validation error.
Every run writes ``<prefix>.manifest.json`` listing its flags and outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .corpus import parse_corpus, parse_meta, write_corpus, write_meta
from .errors import MixTopicError, ModelFormatError, NumericalError, ParseError, SchemaError, ValidationError
from .estimates import (
    DEFAULT_SWEEPS, TopicEstimates, infer_mixtures, lab_topic_score, point_estimates, read_mixtures,
    write_lab_scores, write_mixtures, write_topic_features,
)
from .evaluation import (
    COMBINERS, CvPlan, heldout_predictive_loglik, missing_lab_cv, run_cv, write_metric_csv,
    write_summary_csv,
)
from .inference import TrainConfig, patient_records, train, write_trace
from .modelio import load_model, save_model
from .mortality import (
    LOSSES, embedding_cv, fit_l1_logistic, prospective_eval, read_labels, select_reg,
    top_predictive_topics, write_coefficients, write_pr, write_roc, write_scores,
)
from .simulate import SimConfig, read_truth_sidecar, simulate, write_simulation

logger = logging.getLogger("mixtopic")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = (ValidationError, ParseError, SchemaError, ModelFormatError)


def default_threads():
    env = os.environ.get("MIXTOPIC_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValidationError(f"MIXTOPIC_THREADS={env!r} is not an integer") from None
        if n < 1:
            raise ValidationError("MIXTOPIC_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


class _WarningCounter(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


class Run:
    """Tracks outputs of one invocation; removes them if the run fails."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = []
        self.outputs = []
        self.schema_hash = None
        self.dropped = 0
        self.extra = {}
        self.t0 = time.perf_counter()

    def out(self, path):
        self.outputs.append(str(path))
        return str(path)

    def cleanup(self):
        for p in self.outputs + [p + ".tmp" for p in self.outputs]:
            if os.path.exists(p):
                os.remove(p)

    def manifest(self, path, warnings):
        flags = {k: v for k, v in vars(self.args).items() if k != "func"}
        doc = {
            "subcommand": self.args.command,
            "argv": self.argv,
            "flags": flags,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
            "schema_hash": self.schema_hash,
            "wall_time": time.perf_counter() - self.t0,
            "dropped_rows": self.dropped,
            "warnings": warnings,
            **self.extra,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, default=str)


def _threads(args):
    return args.threads if args.threads is not None else default_threads()


def _train_config(args, K):
    return TrainConfig(
        K=K, max_iters=args.iters, tol=args.tol, min_iters=args.min_iters, seed=args.seed,
        nmar=args.nmar, mixview=args.mixview, hyper_update_every=args.hyper_every,
        hyper_burnin=args.burnin, threads=_threads(args), shards=args.shards,
        beta_mode=args.beta_mode,
    )


def _load_corpus(run, meta, data, schema=None, strict=True):
    if schema is None:
        schema = parse_meta(meta)
        run.inputs.append(meta)
    corpus = parse_corpus(data, schema, strict=strict)
    run.inputs.append(data)
    run.schema_hash = schema.hash
    run.dropped += corpus.dropped
    if corpus.dropped:
        logger.warning("%d rows with unknown types, features, tests or values ignored", corpus.dropped)
    return corpus


def _load_estimates(run, path):
    obj = load_model(path)
    run.inputs.append(path)
    run.schema_hash = obj.schema.hash
    return obj if isinstance(obj, TopicEstimates) else point_estimates(obj)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args, run):
    corpus = _load_corpus(run, args.meta, args.data)
    resume = None
    if args.resume:
        resume = load_model(args.resume)
        run.inputs.append(args.resume)
    model = train(corpus, _train_config(args, args.topics), resume=resume)
    save_model(model, run.out(args.out))
    # timings go to the manifest so the trace file is reproducible
    write_trace(model.trace, run.out(args.out + ".trace.csv"), timings=False)
    run.extra["train_seconds"] = float(sum(r.seconds for r in model.trace if r.seconds == r.seconds))
    if args.plot:
        from .plotting import plot_trace

        plot_trace(model.trace, run.out(args.out + ".trace.png"))
    run.extra["iterations"] = model.iteration
    run.extra["final_loglik"] = model.trace[-1].loglik if model.trace else model.initial_loglik
    return args.out


def cmd_simulate(args, run):
    cfg = SimConfig.from_json(args.config)
    run.inputs.append(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    prefix = args.out_prefix
    for suffix in (".meta", ".data", ".truth", ".params.npz"):
        run.out(prefix + suffix)
    corpus, truth = simulate(cfg)
    write_simulation(prefix, corpus, truth)
    with open(run.out(prefix + ".config.json"), "w") as fh:
        json.dump(cfg.to_json_dict(), fh, indent=2)
    run.schema_hash = corpus.schema.hash
    run.extra["seed"] = cfg.seed
    return prefix


def cmd_infer(args, run):
    est = _load_estimates(run, args.model)
    corpus = _load_corpus(run, None, args.data, schema=est.schema, strict=False)
    theta = infer_mixtures(patient_records(corpus), est, args.sweeps, _threads(args))
    write_mixtures(corpus.patient_ids, theta, run.out(args.out))
    return args.out


def _plan(args):
    d = {"n_folds": args.folds, "seed": args.seed, "split_fraction": args.split}
    if args.plan:
        with open(args.plan) as fh:
            d.update(json.load(fh))
    return CvPlan(int(d["n_folds"]), int(d["seed"]), None, float(d["split_fraction"]))


def cmd_evaluate(args, run):
    prefix = args.out
    if args.model:
        # score an existing model on a held-out corpus
        est = _load_estimates(run, args.model)
        corpus = _load_corpus(run, None, args.data, schema=est.schema, strict=False)
        res = heldout_predictive_loglik(
            est, patient_records(corpus), args.split, args.seed, args.combiner, args.sweeps,
            _threads(args),
        )
        with open(run.out(prefix + ".heldout.csv"), "w") as fh:
            fh.write("patient_id,loglik,included\n")
            for pid, v, inc in zip(corpus.patient_ids, res.per_patient, res.included):
                fh.write(f"{int(pid)},{float(v)!r},{int(inc)}\n")
        run.extra["mean_loglik"] = res.mean
        return prefix
    if not args.meta or not args.topics:
        raise ValidationError("evaluate needs --model, or --meta with --topics for a K sweep")
    corpus = _load_corpus(run, args.meta, args.data)
    plan = _plan(args)
    ks = args.topics
    cfgs = [_train_config(args, k) for k in ks]
    labels = [f"K={k}" for k in ks]
    if args.truth:
        targets = read_truth_sidecar(args.truth, corpus)
        run.inputs.append(args.truth)
        checkpoints = tuple(range(args.checkpoint_every, args.iters + 1, args.checkpoint_every)) \
            if args.checkpoint_every else ()
        result, curves = missing_lab_cv(corpus, targets, plan, cfgs, labels, checkpoints,
                                        args.combiner, args.sweeps, _threads(args))
        with open(run.out(prefix + ".curves.csv"), "w") as fh:
            fh.write("config,fold,iteration,metric\n")
            for label, per_fold in curves.items():
                for f, curve in per_fold.items():
                    for it, s in curve:
                        fh.write(f"{label},{f},{it},{float(s)!r}\n")
        if args.plot:
            from .plotting import plot_missing_curves

            plot_missing_curves(curves, run.out(prefix + ".curves.png"))
    else:
        result = run_cv(corpus, plan, cfgs, labels, args.combiner, args.sweeps, _threads(args))
    write_metric_csv(result, run.out(prefix + ".metrics.csv"))
    write_summary_csv(result, run.out(prefix + ".summary.csv"))
    if result.failed:
        run.extra["failed_folds"] = result.failed
    if result.rows:
        run.extra["best"] = result.best()
    if args.plot and result.rows:
        from .plotting import plot_k_sweep

        summary = result.summary()
        pos = [ks[labels.index(r[0])] for r in summary]
        plot_k_sweep(summary, run.out(prefix + ".ksweep.png"), ks=pos)
    return prefix


def cmd_predict(args, run):
    est = _load_estimates(run, args.model)
    if args.embeddings:
        ids, theta = read_mixtures(args.embeddings)
        run.inputs.append(args.embeddings)
    elif args.data:
        corpus = _load_corpus(run, None, args.data, schema=est.schema, strict=False)
        ids = corpus.patient_ids
        theta = infer_mixtures(patient_records(corpus), est, args.sweeps, _threads(args))
    else:
        raise ValidationError("predict needs --embeddings or --data")
    if theta.shape[1] != est.K:
        raise ValidationError(f"embeddings have {theta.shape[1]} columns, model has K={est.K}")
    ids, labels = read_labels(args.labels, ids)
    run.inputs.append(args.labels)
    prefix = args.out
    plan = CvPlan(args.folds, args.seed)
    res = embedding_cv(theta, labels, plan, args.reg, args.loss, ids)
    write_scores(res, run.out(prefix + ".scores.csv"))
    write_roc(res.metrics, run.out(prefix + ".roc.csv"))
    write_pr(res.metrics, run.out(prefix + ".pr.csv"))
    reg = args.reg
    if reg is None:
        reg, _ = select_reg(theta, labels, seed=args.seed, loss=args.loss)
    final = fit_l1_logistic(theta, labels, reg, loss=args.loss)
    write_coefficients(final, run.out(prefix + ".coef.csv"))
    pos, neg = top_predictive_topics(final, est, args.top_n, args.top_features)
    with open(run.out(prefix + ".top_topics.csv"), "w") as fh:
        fh.write("direction,rank,topic,weight,kind,type_id,item_id,item_weight\n")
        for direction, ranked in (("positive", pos), ("negative", neg)):
            for rank, pt in enumerate(ranked, start=1):
                head = f"{direction},{rank},{pt.topic + 1},{pt.weight!r}"
                for type_id, feats in pt.report.features.items():
                    for fid, w in feats:
                        fh.write(f"{head},feature,{type_id},{fid},{w!r}\n")
                for lid, s in pt.report.labs:
                    fh.write(f"{head},lab,,{lid},{s!r}\n")
    run.extra.update(auroc=res.metrics.auroc, auprc=res.metrics.auprc, reg=reg)
    if args.plot:
        from .plotting import plot_roc_pr

        plot_roc_pr(res.metrics, run.out(prefix + ".rocpr.png"))
    if args.test_data:
        if not args.test_labels:
            raise ValidationError("--test-data needs --test-labels")
        tcorp = _load_corpus(run, None, args.test_data, schema=est.schema, strict=False)
        tids, tlabels = read_labels(args.test_labels, tcorp.patient_ids)
        run.inputs.append(args.test_labels)
        pres = prospective_eval(est, final, patient_records(tcorp), tlabels, args.sweeps,
                                _threads(args), tids)
        write_scores(pres, run.out(prefix + ".prospective.scores.csv"))
        write_roc(pres.metrics, run.out(prefix + ".prospective.roc.csv"))
        write_pr(pres.metrics, run.out(prefix + ".prospective.pr.csv"))
        run.extra.update(prospective_auroc=pres.metrics.auroc, prospective_auprc=pres.metrics.auprc)
        if args.plot:
            from .plotting import plot_roc_pr

            plot_roc_pr(pres.metrics, run.out(prefix + ".prospective.rocpr.png"))
    return prefix


def cmd_topics(args, run):
    est = _load_estimates(run, args.model)
    prefix = args.out
    write_topic_features(est, run.out(prefix + ".features.csv"), args.top_n)
    if est.schema.L:
        write_lab_scores(est, run.out(prefix + ".labs.csv"), args.value - 1, args.top_n)
        if args.plot:
            from .plotting import plot_lab_heatmap

            score = lab_topic_score(est, args.value - 1)
            ids = [ls.lab_id for ls in est.schema.labs]
            plot_lab_heatmap(score, run.out(prefix + ".labs.png"), ids)
    return prefix


def cmd_replay(args, run):
    with open(args.manifest) as fh:
        doc = json.load(fh)
    run.inputs.append(args.manifest)
    argv = doc.get("argv")
    if not argv:
        raise ValidationError(f"{args.manifest}: no argv recorded")
    return main(argv)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _int_list(text):
    try:
        vals = [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _training_flags(p):
    p.add_argument("--iters", type=int, default=100, help="maximum training iterations")
    p.add_argument("--tol", type=float, default=1e-5, help="relative log-likelihood change to stop at")
    p.add_argument("--min-iters", type=int, default=50,
                   help="iterations before the stopping rule is checked")
    p.add_argument("--burnin", type=int, default=50, help="iterations before hyperparameter updates")
    p.add_argument("--hyper-every", type=int, default=1,
                   help="hyperparameter update period (0 disables)")
    p.add_argument("--beta-mode", choices=("type", "feature"), default="type",
                   help="one feature-prior concentration per type, or one per feature")
    p.add_argument("--shards", type=_positive_int, default=None,
                   help="E-step shard count (defaults to the thread count)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--nmar", dest="nmar", action="store_true", default=True)
    g.add_argument("--mar", dest="nmar", action="store_false")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mixview", dest="mixview", action="store_true", default=True)
    g.add_argument("--labs-only", dest="mixview", action="store_false")


def _common(p, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads (default: MIXTOPIC_THREADS or all cores)")
    p.add_argument("--plot", action="store_true", help="also render figures next to the outputs")


def build_parser():
    ap = argparse.ArgumentParser(prog="mixtopic", description="Mixed-type EHR topic models.")
    ap.add_argument("--version", action="version", version=f"mixtopic {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a topic model")
    p.add_argument("--meta", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--topics", "-K", type=int, required=True)
    p.add_argument("--out", required=True, help="model file path")
    p.add_argument("--resume", help="continue training this model")
    _training_flags(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="draw a synthetic corpus")
    p.add_argument("--config", required=True, help="JSON simulation config")
    p.add_argument("--out-prefix", required=True)
    _common(p, seed_default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="infer patient mixtures with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sweeps", type=_positive_int, default=DEFAULT_SWEEPS)
    p.add_argument("--out", required=True, help="mixture CSV path")
    _common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="held-out likelihood and K sweeps")
    p.add_argument("--model", help="score this model instead of running CV")
    p.add_argument("--meta")
    p.add_argument("--data", required=True)
    p.add_argument("--topics", "-K", type=_int_list, help="K values, e.g. 10,25,40")
    p.add_argument("--truth", help="truth sidecar: score masked lab values instead")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="record the masked-lab score every N iterations")
    p.add_argument("--plan", help="JSON with n_folds, seed, split_fraction")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--split", type=float, default=0.5)
    p.add_argument("--combiner", choices=COMBINERS, default=None,
                   help="lab term (default as-written; conditional when --truth is given)")
    p.add_argument("--sweeps", type=_positive_int, default=DEFAULT_SWEEPS)
    p.add_argument("--out", required=True, help="output prefix")
    _training_flags(p)
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="outcome prediction from mixtures")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", help="mixture CSV from infer")
    p.add_argument("--data", help="corpus to infer mixtures from instead")
    p.add_argument("--labels", required=True, help="CSV patient_id,label")
    p.add_argument("--test-data", help="early-record corpus for prospective scoring")
    p.add_argument("--test-labels")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--reg", type=float, default=None, help="fixed L1 penalty (default: nested CV)")
    p.add_argument("--loss", choices=LOSSES, default="logistic")
    p.add_argument("--top-n", type=int, default=3, help="predictive topics per direction")
    p.add_argument("--top-features", type=int, default=10)
    p.add_argument("--sweeps", type=_positive_int, default=DEFAULT_SWEEPS)
    p.add_argument("--out", required=True, help="output prefix")
    _common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("topics", help="export top features and lab scores per topic")
    p.add_argument("--model", required=True)
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--value", type=_positive_int, default=2, help="lab value scored (1-based)")
    p.add_argument("--out", required=True, help="output prefix")
    _common(p)
    p.set_defaults(func=cmd_topics)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return ap


def _manifest_path(args):
    prefix = getattr(args, "out", None) or getattr(args, "out_prefix", None)
    return None if prefix is None else prefix + ".manifest.json"


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "evaluate" and args.combiner is None:
        args.combiner = "conditional" if args.truth else "as-written"
    if getattr(args, "topics", None) is not None:
        ks = args.topics if isinstance(args.topics, list) else [args.topics]
        if any(k < 1 for k in ks):
            print("mixtopic: error: --topics must be >= 1", file=sys.stderr)
            return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay":
        try:
            return cmd_replay(args, Run(args, argv))
        except (OSError, ValueError, MixTopicError) as exc:
            print(f"mixtopic: error: {exc}", file=sys.stderr)
            return EXIT_USAGE

    counter = _WarningCounter()
    root = logging.getLogger()
    root.addHandler(counter)
    run = Run(args, argv)
    manifest = _manifest_path(args)
    try:
        if manifest:
            d = os.path.dirname(manifest)
            if d:
                os.makedirs(d, exist_ok=True)
        args.func(args, run)
        if manifest:
            run.outputs.append(manifest)
            run.manifest(manifest, counter.messages)
    except USAGE_ERRORS as exc:
        run.cleanup()
        print(f"mixtopic: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, MixTopicError, OSError, np.linalg.LinAlgError) as exc:
        run.cleanup()
        print(f"mixtopic: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except BaseException:
        run.cleanup()
        raise
    finally:
        root.removeHandler(counter)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

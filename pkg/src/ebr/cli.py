"""Command-line pipelines: synth, ingest, train, embed, index build, search, sweep, eval.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""
import argparse
import json
import logging
import os
import sys

from . import __version__, evalharness, querylang
from .errors import (DimensionMismatch, EbrError, InvalidArgument, QuerySyntaxError,
                     QueryValidationError, TrainingDiverged, UnknownEmbeddingKey)
from .index import Index, read_jsonl_documents, write_jsonl_documents
from .quant import AnnConfig

log = logging.getLogger("ebr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
_USAGE_ERRORS = (InvalidArgument, QuerySyntaxError, QueryValidationError, UnknownEmbeddingKey,
                 DimensionMismatch, FileNotFoundError, IsADirectoryError, NotADirectoryError)


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment. Keys use flag spelling."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise UsageError(f"{path}:{lineno}: expected key=value")
            out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


# -- helpers -------------------------------------------------------------------------

def _records(corpus_docs):
    from .trainer.features import FeatureRecord

    out = {}
    for d in corpus_docs:
        if d.features:
            out[d.doc_id] = FeatureRecord.from_json(d.features)
    return out


def _load_corpus(path):
    return [d for _, d in read_jsonl_documents(path)]


def _read_record(path):
    from .trainer.features import FeatureRecord

    with open(path, encoding="utf-8") as f:
        try:
            return FeatureRecord.from_json(json.load(f))
        except (ValueError, KeyError, TypeError) as exc:
            raise InvalidArgument(f"{path}: bad feature record: {exc}") from None


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _infer_model_config(args, records):
    """Channel layout from the data: text fields, categorical vocabularies, dense dims."""
    from .trainer.model import ModelConfig

    text, cat, dense = set(), {}, {}
    for r in records:
        text.update(r.text_fields)
        for ch, items in r.categorical.items():
            cat[ch] = max(cat.get(ch, 0), 1 + max((int(i) for i, _ in items), default=0))
        for ch, v in r.dense.items():
            if dense.setdefault(ch, v.shape[0]) != v.shape[0]:
                raise InvalidArgument(f"dense channel {ch!r} has inconsistent dims")
    return ModelConfig(tuple(sorted(text)), tuple(sorted(cat.items())), tuple(sorted(dense.items())),
                       args.table_dim, tuple(args.hidden), args.output_dim, args.word_buckets)


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args):
    from .trainer import synthetic as syn
    from .trainer.train import examples_from_sessions

    cfg = syn.SyntheticConfig(num_docs=args.num_docs, num_train_sessions=args.train_sessions,
                              num_eval_sessions=args.eval_sessions, seed=args.seed)
    world = syn.make_world(cfg)
    docs = syn.corpus_documents(world)
    train_s = syn.make_sessions(world, cfg.num_train_sessions)
    eval_s = syn.make_sessions(world, cfg.num_eval_sessions, failure_rate=0.0)
    planted, query = syn.planted_fuzzy_pair(world)
    docs.append(planted)
    os.makedirs(args.out_dir, exist_ok=True)
    p = lambda name: os.path.join(args.out_dir, name)  # noqa: E731
    write_jsonl_documents(p("corpus.jsonl"), docs)
    syn.write_jsonl(p("sessions_train.jsonl"), [s.to_json() for s in train_s])
    syn.write_jsonl(p("sessions_eval.jsonl"), [s.to_json() for s in eval_s])
    examples = examples_from_sessions(train_s, "clicks+hard_positives")
    syn.write_jsonl(p("train.jsonl"), [e.to_json() for e in examples])
    with open(p("query.json"), "w", encoding="utf-8") as f:
        json.dump(query.to_json(), f, sort_keys=True)
        f.write("\n")
    _emit({"documents": len(docs), "train_sessions": len(train_s), "eval_sessions": len(eval_s),
           "examples": len(examples), "planted_id": planted.doc_id})
    return EXIT_OK


def cmd_ingest(args):
    flt = querylang.parse_query(args.filter) if args.filter else None
    idx = Index(filter=flt)
    docs = _load_corpus(args.corpus)
    idx.add_documents(docs)
    idx.save(args.index_dir)
    _emit({"read": len(docs), "indexed": len(idx.snapshot)})
    return EXIT_OK


def cmd_train(args):
    from .evalharness import model_recall, sessions_from_log
    from .trainer import model as mdl
    from .trainer.mining import MiningConfig, mine_offline_hard_negatives, read_session_log
    from .trainer.train import TrainConfig, read_training_data, train

    corpus = _records(_load_corpus(args.corpus))
    data = read_training_data(args.data, corpus)
    mining = MiningConfig(args.positives, args.mining, args.negatives, args.hard_negatives,
                          args.easy_to_hard, tuple(args.rank_window))
    if args.init:
        q0, d0, _ = mdl.load_checkpoint(args.init)
    else:
        cfg = _infer_model_config(args, list(corpus.values()) + [e.query for e in data.examples])
        q0, d0 = mdl.init_towers(cfg, seed=args.seed)
    offline = None
    if args.mining in ("offline_hard", "mixed"):
        miner = args.miner or args.init
        if miner is None and args.mining == "offline_hard":
            raise InvalidArgument("offline_hard needs --miner or --init to rank the corpus")
        if miner is not None:
            mq, md, _ = mdl.load_checkpoint(miner)
            ex = data.select(args.positives)
            corpus_emb = evalharness.embed_corpus(md, corpus)
            offline = mine_offline_hard_negatives(
                mq.encode([e.query for e in ex]), corpus_emb.unit, corpus_emb.ids,
                [{e.positive_id} for e in ex], mining.offline_rank_window,
                mining.hard_negatives_per_positive, seed=args.seed)
    hp = TrainConfig(args.lr, args.batch_size, args.epochs, args.margin, args.seed)
    res = train(q0, d0, mining, data, hp, offline_negatives=offline)
    meta = {"mining": args.mining, "positives": args.positives, "lr": args.lr,
            "batch_size": args.batch_size, "epochs": args.epochs, "margin": args.margin,
            "seed": args.seed, "steps": res.steps}
    mdl.save_checkpoint(args.out, res.model_q, res.model_d, meta)
    metrics = {"loss_curve": res.loss_curve, "final_loss": res.loss_curve[-1] if res.loss_curve
               else None, "steps": res.steps}
    if args.eval_sessions:
        sess = sessions_from_log(read_session_log(args.eval_sessions))
        rec = model_recall(res.model_q, res.model_d, corpus, sess, ks=(1, 10, 100))
        metrics["recall_at_k"] = {str(k): v for k, v in rec.items()}
    with open(args.metrics or f"{args.out}.metrics.json", "w", encoding="utf-8") as f:
        json.dump(metrics, f, sort_keys=True, indent=2)
        f.write("\n")
    _emit(metrics)
    return EXIT_OK


def cmd_embed(args):
    from .trainer.model import load_checkpoint

    _, md, _ = load_checkpoint(args.model)
    docs = _load_corpus(args.corpus)
    recs = _records(docs)
    ids = [d.doc_id for d in docs if d.doc_id in recs]
    skipped = len(docs) - len(ids)
    if skipped:
        log.warning("%d documents without features were not embedded", skipped)
    emb = evalharness.embed_corpus(md, recs) if ids else None
    row = {i: r for r, i in enumerate(emb.ids)} if emb is not None else {}
    for d in docs:
        if d.doc_id in row:
            d.embeddings[args.key] = emb.vectors[row[d.doc_id]]
    write_jsonl_documents(args.out or args.corpus, docs)
    _emit({"embedded": len(ids), "skipped": skipped, "key": args.key})
    return EXIT_OK


def cmd_index_build(args):
    idx = Index.open(args.index_dir)
    if args.corpus:
        vecs = {d.doc_id: d.embeddings[args.key] for d in _load_corpus(args.corpus)
                if args.key in d.embeddings and d.doc_id in idx.snapshot.ordinals}
        if not vecs:
            raise InvalidArgument(f"{args.corpus}: no indexed document has embedding {args.key!r}")
        idx.set_embeddings(args.key, vecs)
    cfg = AnnConfig(args.num_clusters, args.nprobe, args.pq_bytes, args.transform, seed=args.seed,
                    kmeans_iters=args.kmeans_iters, pq_iters=args.pq_iters)
    idx.build_ann(args.key, cfg)
    idx.save(args.index_dir)
    seg = idx.snapshot.ann_segments[args.key]
    _emit({"key": args.key, "config": cfg.label(), "vectors": len(seg),
           "generation": idx.generation})
    return EXIT_OK


def _parse_models(specs):
    out = {}
    for s in specs or ():
        key, sep, path = s.partition("=")
        if not sep or not key or not path:
            raise UsageError(f"--model expects KEY=checkpoint, got {s!r}")
        out[key] = path
    return out


def cmd_search(args):
    from .annsearch import nn_keys
    from .trainer.model import load_checkpoint

    if (args.query is None) == (args.query_file is None):
        raise UsageError("give exactly one of a query string or --query-file")
    text = args.query
    if args.query_file:
        with open(args.query_file, encoding="utf-8") as f:
            text = f.read()
    q = querylang.parse_query(text)
    idx = Index.open(args.index_dir)
    diags = querylang.validate_query(q, set(idx.snapshot.ann_segments))
    if diags:
        raise QueryValidationError(diags)
    keys = nn_keys(q)
    models = _parse_models(args.model)
    embs = {}
    if keys:
        if args.record is None:
            raise UsageError("queries with nn clauses need --record")
        record = _read_record(args.record)
        for k in sorted(keys):
            if k not in models:
                raise UsageError(f"no --model given for embedding key {k!r}")
            mq, _, _ = load_checkpoint(models[k])
            embs[k] = mq.encode([record])[0]
    resp = idx.search(q, embs)
    out = resp.to_json()
    if args.limit is not None:
        out["results"] = out["results"][:args.limit]
    if args.no_timing:
        out.pop("elapsed_us")
    _emit(out)
    return EXIT_OK


def _sweep_inputs(args):
    if args.synthetic:
        x = evalharness.anisotropic_vectors(args.num_vectors, args.dim, seed=args.seed)
        queries = evalharness.anisotropic_vectors(args.num_queries, args.dim, seed=args.seed + 1)
        return evalharness.Corpus([f"v{i:06d}" for i in range(len(x))], x), queries, None
    if not (args.corpus and args.key and args.sessions and args.model):
        raise UsageError("sweep needs --synthetic or all of --corpus --key --sessions --model")
    from .trainer.mining import read_session_log
    from .trainer.model import load_checkpoint

    corpus = evalharness.Corpus.from_documents(_load_corpus(args.corpus), args.key)
    sess = evalharness.sessions_from_log(read_session_log(args.sessions))
    mq, _, _ = load_checkpoint(args.model)
    return corpus, mq.encode([s.query for s in sess]), [s.target_ids for s in sess]


def cmd_sweep(args):
    corpus, queries, targets = _sweep_inputs(args)
    grid = evalharness.SweepGrid(args.num_clusters, args.nprobe, args.pq_bytes, args.transform,
                                 seed=args.seed)
    points = evalharness.run_sweep(grid, corpus, queries, targets, threads=args.threads,
                                   measure_latency=not args.no_latency)
    text = evalharness.sweep_csv(points)
    if args.out:
        from .storage import atomic_write

        atomic_write(args.out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    log.info("sweep: %d points from a %d-point grid", len(points), len(grid))
    return EXIT_OK


def cmd_eval(args):
    from .trainer.mining import read_session_log
    from .trainer.model import load_checkpoint

    mq, md, _ = load_checkpoint(args.model)
    sess = evalharness.sessions_from_log(read_session_log(args.sessions))
    if not sess:
        raise InvalidArgument(f"{args.sessions}: no session has a target")
    ks = tuple(args.k)
    out = {"sessions": len(sess)}
    corpus = _records(_load_corpus(args.corpus))
    rec = evalharness.model_recall(mq, md, corpus, sess, ks)
    out["exact_recall_at_k"] = {str(k): v for k, v in rec.items()}
    if args.index_dir:
        from .querylang import Nn

        idx = Index.open(args.index_dir)
        yq = mq.encode([s.query for s in sess])
        totals = {k: 0.0 for k in ks}
        scanned = 0
        for s, v in zip(sess, yq):
            resp = idx.search(Nn(args.key, top_k=max(ks), nprobe=args.nprobe), {args.key: v})
            scanned += resp.scanned_documents
            for k in ks:
                totals[k] += evalharness.recall_at_k(resp.ids, s.target_ids, k)
        out["ann_recall_at_k"] = {str(k): v / len(sess) for k, v in totals.items()}
        out["mean_scanned_documents"] = scanned / len(sess)
    _emit(out)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ebr", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"ebr {__version__}")
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbosity", type=int, default=1, choices=(0, 1, 2),
                   help="0 warnings, 1 info, 2 debug (stderr)")
    p.add_argument("--threads", type=int, default=1, help="query parallelism in sweeps")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("synth", help="write the bundled synthetic dataset")
    s.add_argument("out_dir")
    s.add_argument("--num-docs", type=int, default=1000)
    s.add_argument("--train-sessions", type=int, default=4000)
    s.add_argument("--eval-sessions", type=int, default=1000)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="index a corpus JSONL file")
    s.add_argument("corpus")
    s.add_argument("index_dir")
    s.add_argument("--filter", help="term-only Boolean query selecting documents to index")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train a two-tower model")
    s.add_argument("--data", required=True, help="training examples JSONL")
    s.add_argument("--corpus", required=True, help="corpus JSONL with features")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--metrics", help="metrics JSON path (default OUT.metrics.json)")
    s.add_argument("--mining", default="random",
                   choices=("random", "non_click_impressions", "online_hard", "offline_hard",
                            "mixed"))
    s.add_argument("--positives", default="clicks",
                   choices=("clicks", "impressions", "clicks+hard_positives"))
    s.add_argument("--negatives", type=int, default=2, help="random negatives per positive")
    s.add_argument("--hard-negatives", type=int, default=2, help="hard negatives per positive")
    s.add_argument("--easy-to-hard", type=float, default=100.0)
    s.add_argument("--rank-window", type=float, nargs=2, default=(0.0101, 0.05),
                   metavar=("LO", "HI"), help="offline mining window as corpus fractions")
    s.add_argument("--miner", help="checkpoint that ranks the corpus for offline mining")
    s.add_argument("--init", help="warm-start checkpoint")
    s.add_argument("--margin", type=float, default=0.1)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--lr", type=float, default=0.5)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--table-dim", type=int, default=16)
    s.add_argument("--hidden", type=_int_list, default=[64])
    s.add_argument("--output-dim", type=int, default=32)
    s.add_argument("--word-buckets", type=int, default=2 ** 12)
    s.add_argument("--eval-sessions", help="session log for recall@K after training")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="write document embeddings into a corpus JSONL")
    s.add_argument("corpus")
    s.add_argument("--model", required=True)
    s.add_argument("--key", required=True)
    s.add_argument("--out", help="output path (default: rewrite CORPUS)")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("index", help="index maintenance")
    isub = s.add_subparsers(dest="index_command", metavar="ACTION")
    isub.required = True
    b = isub.add_parser("build", help="build an ANN segment for one embedding key")
    b.add_argument("index_dir")
    b.add_argument("--key", required=True)
    b.add_argument("--corpus", help="corpus JSONL supplying the embeddings")
    b.add_argument("--num-clusters", type=int, required=True)
    b.add_argument("--nprobe", type=int, default=1)
    b.add_argument("--pq-bytes", type=int, default=0, help="0 stores exact residuals")
    b.add_argument("--transform", default="identity", help="identity, opq, pca or pca:N")
    b.add_argument("--kmeans-iters", type=int, default=25)
    b.add_argument("--pq-iters", type=int, default=20)
    b.set_defaults(func=cmd_index_build)

    s = sub.add_parser("search", help="run a hybrid query")
    s.add_argument("index_dir")
    s.add_argument("query", nargs="?", help="query expression")
    s.add_argument("--query-file")
    s.add_argument("--record", help="query FeatureRecord JSON for nn clauses")
    s.add_argument("--model", action="append", metavar="KEY=CKPT")
    s.add_argument("--limit", type=int)
    s.add_argument("--no-timing", action="store_true", help="omit elapsed_us")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("sweep", help="grid over ANN parameters; writes CSV")
    s.add_argument("--num-clusters", type=_int_list, required=True)
    s.add_argument("--nprobe", type=_int_list, required=True)
    s.add_argument("--pq-bytes", type=_int_list, default=[0])
    s.add_argument("--transform", type=_str_list, default=["identity"])
    s.add_argument("--corpus")
    s.add_argument("--key")
    s.add_argument("--sessions")
    s.add_argument("--model")
    s.add_argument("--synthetic", action="store_true", help="anisotropic synthetic vectors")
    s.add_argument("--num-vectors", type=int, default=10000)
    s.add_argument("--num-queries", type=int, default=500)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--no-latency", action="store_true", help="leave mean_latency_us empty")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("eval", help="recall@K of a model on eval sessions")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--sessions", required=True)
    s.add_argument("--k", type=_int_list, default=[1, 10, 100])
    s.add_argument("--index-dir", help="also measure ANN recall through this index")
    s.add_argument("--key", default="unified")
    s.add_argument("--nprobe", type=int)
    s.set_defaults(func=cmd_eval)
    return p


def _chosen_subparsers(parser, argv):
    """The chain of parsers selected by ``argv`` (top level first)."""
    chain = [parser]
    cur = parser
    for tok in argv:
        acts = [a for a in cur._actions if isinstance(a, argparse._SubParsersAction)]
        if acts and tok in acts[0].choices:
            cur = acts[0].choices[tok]
            chain.append(cur)
    return chain


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        conf = read_config_file(args.config)
        chain = _chosen_subparsers(parser, argv)
        known = {a.dest: a for c in chain for a in c._actions}
        for k, v in conf.items():
            if k not in known or k in ("config", "func", "help"):
                raise UsageError(f"{args.config}: unknown key {k!r}")
            if isinstance(known[k], argparse._StoreTrueAction):
                conf[k] = _bool(v)
        for c in chain:
            mine = {a.dest for a in c._actions}
            c.set_defaults(**{k: v for k, v in conf.items() if k in mine})
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, OSError) as exc:
        print(f"ebr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        level=(logging.WARNING, logging.INFO, logging.DEBUG)[args.verbosity],
                        force=True)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    log.info("resolved config: %s", json.dumps(resolved, default=str, sort_keys=True))
    try:
        return args.func(args)
    except QueryValidationError as exc:
        for d in exc.diagnostics:
            print(f"ebr: {d}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, *_USAGE_ERRORS) as exc:
        print(f"ebr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"ebr: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (EbrError, OSError, ValueError) as exc:
        print(f"ebr: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface.

Every command writes its artifacts plus a manifest (config snapshot, seed,
format versions) into its output directory.  Exit codes: 0 on success, 2 on
configuration errors (including unknown flags, via argparse)."""

import argparse
import csv
import io
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from . import geometry as geometry_mod
from . import scoring as scoring_mod
from . import trainer as trainer_mod
from .ablation import FULL, MixtureMode, ablation_switches, cross_entropy_eval
from .config import ConfigError, config_snapshot, load_config, write_manifest
from .errors import ParseError
from .fileio import atomic_write_text
from .model import BackpackLM, load_checkpoint, norm_pool_weights, save_checkpoint
from .plots import DEFAULT_COLUMNS, plot_metrics


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv) or 0
    except (ConfigError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def build_parser():
    p = argparse.ArgumentParser(prog="senselign")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate the synthetic cipher bitext")
    g.add_argument("--out", required=True)
    g.add_argument("--n-pairs", type=int, default=6000)
    g.add_argument("--seed", type=int, default=1234)
    g.add_argument("--dev-fraction", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_synthetic)

    f = sub.add_parser("filter-data", help="run the bitext filtering pipeline")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--similarity", default="constant",
                   choices=sorted(corpus_mod.SIMILARITY_REGISTRY))
    f.add_argument("--ratio-low", type=float, default=0.6)
    f.add_argument("--ratio-high", type=float, default=1.7)
    f.add_argument("--sim-threshold", type=float, default=0.80)
    f.add_argument("--per-corpus-cap", type=int, default=1_000_000)
    f.add_argument("--target-size", type=int, default=2_000_000)
    f.add_argument("--seed", type=int, default=1234)
    f.set_defaults(func=cmd_filter_data)

    t = sub.add_parser("train", help="run the three-phase adaptation loop")
    t.add_argument("--config", required=True)
    t.add_argument("--ablation", default=None,
                   help="variant name (overrides run.ablation in the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="recall/entropy/perplexity of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--bitext", required=True)
    e.add_argument("--vocab", required=True)
    e.add_argument("--tau-pool", type=float, default=0.7)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate-mixture", help="cross-entropy under mixture overrides")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--bitext", required=True)
    a.add_argument("--vocab", required=True)
    a.add_argument("--mode", action="append", default=None,
                   help="full | top1 | topk:N | uniform (repeatable)")
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate_mixture)

    tp = sub.add_parser("analyze-topology", help="per-word sense-geometry correlation")
    _analysis_args(tp)
    tp.add_argument("--iters", type=int, default=10_000)
    tp.set_defaults(func=cmd_analyze_topology)

    pr = sub.add_parser("analyze-procrustes", help="global orthogonal alignment quality")
    _analysis_args(pr)
    pr.add_argument("--tau-pool", type=float, default=0.7)
    pr.add_argument("--subsample-size", type=int, default=None)
    pr.add_argument("--n-subsamples", type=int, default=5)
    pr.set_defaults(func=cmd_analyze_procrustes)

    s = sub.add_parser("score-mc", help="score multiple-choice items")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--items", required=True)
    s.add_argument("--scheme", default="combined", choices=["cond", "combined"])
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score_mc)

    gs = sub.add_parser("grid-search", help="lambda/alpha grid search on validation items")
    gs.add_argument("--checkpoint", required=True)
    gs.add_argument("--vocab", required=True)
    gs.add_argument("--items", required=True)
    gs.add_argument("--out", required=True)
    gs.set_defaults(func=cmd_grid_search)

    pl = sub.add_parser("plot", help="render metrics columns to SVG charts")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--columns", nargs="*", default=list(DEFAULT_COLUMNS))
    pl.set_defaults(func=cmd_plot)

    ge = sub.add_parser("generate", help="greedy continuation (debug)")
    ge.add_argument("--checkpoint", required=True)
    ge.add_argument("--vocab", required=True)
    ge.add_argument("--prompt", required=True)
    ge.add_argument("--max-new", type=int, default=16)
    ge.set_defaults(func=cmd_generate)
    return p


def _analysis_args(sp):
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--control", default=None, help="control checkpoint for deltas")
    sp.add_argument("--bitext", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--alignments", default=None, help="Pharaoh alignment file")
    sp.add_argument("--word-pairs", default=None,
                    help="TSV: pair_index, src_span, tgt_span (start:end token ranges)")
    sp.add_argument("--min-count", type=int, default=5)
    sp.add_argument("--stop-list", default=None)
    sp.add_argument("--seed", type=int, default=1234)
    sp.add_argument("--out", required=True)


def _require_files(args, names):
    for name in names:
        p = getattr(args, name, None)
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"--{name.replace('_', '-')} {p!r} does not exist",
                              key=name)


# -- commands -------------------------------------------------------------------

def cmd_gen_synthetic(args, argv):
    corpus = corpus_mod.generate_synthetic(args.seed, args.n_pairs)
    os.makedirs(args.out, exist_ok=True)
    corpus_mod.save_bitext_tsv(corpus.pairs, os.path.join(args.out, "corpus.tsv"))
    corpus_mod.save_alignments(corpus.alignments,
                               os.path.join(args.out, "corpus.align"))
    corpus.vocab.save(os.path.join(args.out, "vocab.txt"))
    atomic_write_text(os.path.join(args.out, "cipher.tsv"),
                      "".join(f"{s}\t{t}\n" for s, t in sorted(corpus.cipher.items())))
    train, dev = corpus_mod.split_pairs(corpus.pairs, args.dev_fraction, args.seed)
    corpus_mod.save_bitext_tsv(train, os.path.join(args.out, "train.tsv"))
    corpus_mod.save_bitext_tsv(dev, os.path.join(args.out, "dev.tsv"))
    snapshot = {"gen.n_pairs": args.n_pairs, "gen.dev_fraction": args.dev_fraction,
                "gen.vocab_size": len(corpus.vocab)}
    write_manifest(args.out, "gen-synthetic", snapshot, args.seed, argv)
    print(f"wrote {len(train)} train / {len(dev)} dev pairs to {args.out}")
    return 0


def cmd_filter_data(args, argv):
    _require_files(args, ["input"])
    pairs = corpus_mod.load_bitext_tsv(args.input)
    cfg = corpus_mod.FilterConfig(ratio_low=args.ratio_low, ratio_high=args.ratio_high,
                                  sim_threshold=args.sim_threshold,
                                  per_corpus_cap=args.per_corpus_cap,
                                  target_size=args.target_size, seed=args.seed)
    sim_fn = corpus_mod.SIMILARITY_REGISTRY[args.similarity]
    kept, stats = corpus_mod.filter_pipeline(pairs, cfg, sim_fn)
    os.makedirs(args.out, exist_ok=True)
    corpus_mod.save_bitext_tsv(kept, os.path.join(args.out, "filtered.tsv"))
    atomic_write_text(os.path.join(args.out, "stats.txt"), stats.as_text())
    atomic_write_text(os.path.join(args.out, "stats.csv"), stats.as_csv())
    snapshot = config_snapshot(filter_cfg=cfg,
                               extra={"filter.similarity": args.similarity,
                                      "paths.bitext": args.input})
    write_manifest(args.out, "filter-data", snapshot, args.seed, argv)
    print(stats.as_text(), end="")
    if stats.n_output == 0:
        print("warning: empty survivor set", file=sys.stderr)
    return 0


def cmd_train(args, argv):
    cfg = load_config(args.config)
    vocab = corpus_mod.Vocab.load(cfg.path("vocab", required=True))
    train_pairs = corpus_mod.load_bitext_tsv(cfg.path("train_bitext", required=True))
    dev_path = cfg.path("dev_bitext")
    if dev_path:
        dev_pairs = corpus_mod.load_bitext_tsv(dev_path)
    else:
        frac = cfg.get("options", "dev_fraction", 0.1)
        train_pairs, dev_pairs = corpus_mod.split_pairs(
            train_pairs, frac, cfg.train_config().seed)
    out_dir = cfg.path("out_dir") or "run-out"
    os.makedirs(out_dir, exist_ok=True)

    model_cfg = cfg.model_config(vocab_size=len(vocab))
    train_cfg = cfg.train_config()
    sched_cfg = cfg.schedule_config(total_steps=train_cfg.total_steps)
    variant = args.ablation or cfg.get("run", "ablation", "full")
    sched_cfg, train_cfg = ablation_switches(variant, sched_cfg, train_cfg)

    model = BackpackLM.init(model_cfg, train_cfg.seed)
    result = trainer_mod.train(
        model, train_pairs, dev_pairs, vocab, train_cfg, sched_cfg, out_dir=out_dir,
        sense_pooling=cfg.get("options", "sense_pooling", "norm"),
        retrieval_embedding=cfg.get("options", "retrieval_embedding", "context"),
        entropy_source=cfg.get("options", "entropy_source", "norm_pool"))

    snapshot = config_snapshot(model_cfg=model_cfg, train_cfg=train_cfg,
                               sched_cfg=sched_cfg,
                               extra={"run.ablation": variant,
                                      "paths.vocab": cfg.path("vocab"),
                                      "paths.train_bitext": cfg.path("train_bitext"),
                                      "paths.dev_bitext": dev_path or "(split)"})
    write_manifest(out_dir, "train", snapshot, train_cfg.seed, argv)
    last = result.metrics_rows[-1] if result.metrics_rows else None
    if last:
        print(f"final step {last['step']}: recall_s2t={last['recall_s2t']:.4f} "
              f"recall_t2s={last['recall_t2s']:.4f} entropy={last['entropy_tgt']:.4f} "
              f"ppl={last['ppl_tgt']:.4f}")
    return 0


def _load_model_and_pairs(args):
    _require_files(args, ["checkpoint", "bitext", "vocab"])
    model, _ = load_checkpoint(args.checkpoint)
    vocab = corpus_mod.Vocab.load(args.vocab)
    pairs = corpus_mod.load_bitext_tsv(args.bitext)
    return model, vocab, pairs


def cmd_evaluate(args, argv):
    model, vocab, pairs = _load_model_and_pairs(args)
    ev = trainer_mod.evaluate(model, pairs, vocab, args.tau_pool)
    line = (f"recall_s2t={ev.recall_s2t!r} recall_t2s={ev.recall_t2s!r} "
            f"entropy_tgt={ev.entropy_tgt!r} ppl_tgt={ev.ppl_tgt!r}")
    print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["recall_s2t", "recall_t2s", "entropy_tgt", "ppl_tgt"])
        w.writerow([repr(ev.recall_s2t), repr(ev.recall_t2s),
                    repr(ev.entropy_tgt), repr(ev.ppl_tgt)])
        atomic_write_text(os.path.join(args.out, "eval.csv"), buf.getvalue())
        write_manifest(args.out, "evaluate",
                       {"paths.checkpoint": args.checkpoint,
                        "paths.bitext": args.bitext, "schedule.tau_pool": args.tau_pool},
                       seed=0, argv=argv)
    return 0


def cmd_ablate_mixture(args, argv):
    model, vocab, pairs = _load_model_and_pairs(args)
    modes = [MixtureMode.parse(m) for m in (args.mode or ["full", "top1", "uniform"])]
    rows = []
    for mode in modes:
        ce = cross_entropy_eval(model, pairs, vocab, mode=mode)
        rows.append((mode.label(), ce))
        print(f"cross-entropy[{mode.label()}] = {ce:.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "cross_entropy"])
        for label, ce in rows:
            w.writerow([label, repr(ce)])
        atomic_write_text(os.path.join(args.out, "mixture_ce.csv"), buf.getvalue())
        write_manifest(args.out, "ablate-mixture",
                       {"paths.checkpoint": args.checkpoint,
                        "paths.bitext": args.bitext,
                        "run.mixture_mode": ",".join(m.label() for m in modes)},
                       seed=0, argv=argv)
    return 0


def _load_word_pair_spans(args, pairs):
    """(pair_index, src_span, tgt_span) with spans as (start, end) ranges."""
    if args.word_pairs:
        spans = []
        with open(args.word_pairs, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                cols = line.split("\t")
                if len(cols) != 3:
                    raise ParseError("expected pair_index, src_span, tgt_span",
                                     line_number=lineno)
                spans.append((int(cols[0]), _parse_span(cols[1], lineno),
                              _parse_span(cols[2], lineno)))
        return spans
    if not args.alignments:
        raise ConfigError("need --alignments or --word-pairs", key="alignments")
    links, _ = corpus_mod.load_alignments(args.alignments)
    stop = ()
    if args.stop_list:
        with open(args.stop_list, encoding="utf-8") as f:
            stop = tuple(w.strip() for w in f if w.strip())
    vocab = corpus_mod.Vocab.load(args.vocab)
    occ = geometry_mod.word_pair_occurrences(pairs, links, vocab,
                                             min_count=args.min_count, stop_words=stop)
    return [(pi, (sp, sp + 1), (tp, tp + 1)) for pi, _, _, sp, tp in occ]


def _parse_span(text, lineno):
    if ":" in text:
        s, e = text.split(":", 1)
        span = (int(s), int(e))
    else:
        span = (int(text), int(text) + 1)
    if span[0] < 0 or span[1] <= span[0]:
        raise ParseError(f"bad span {text!r}", line_number=lineno)
    return span


def _span_sense_matrix(model, vocab, words, span):
    mats = []
    for pos in range(span[0], span[1]):
        if pos >= len(words):
            raise geometry_mod.PairDiscarded("span outside sentence")
        mats.append(geometry_mod.sense_matrix_for_word(model, vocab, words[pos]))
    return geometry_mod.pool_subword_senses(mats)


def _collect_sense_pairs(model, vocab, pairs, spans):
    out, discarded = [], 0
    for pi, s_span, t_span in spans:
        try:
            vs = _span_sense_matrix(model, vocab, pairs[pi].src_text.split(), s_span)
            vt = _span_sense_matrix(model, vocab, pairs[pi].tgt_text.split(), t_span)
            out.append(geometry_mod.SenseMatrixPair(vs, vt))
        except geometry_mod.PairDiscarded:
            discarded += 1
    return out, discarded


def cmd_analyze_topology(args, argv):
    model, vocab, pairs = _load_model_and_pairs(args)
    _require_files(args, ["control", "alignments", "word_pairs", "stop_list"])
    spans = _load_word_pair_spans(args, pairs)
    sense_pairs, discarded = _collect_sense_pairs(model, vocab, pairs, spans)
    report = geometry_mod.topology_report(sense_pairs, iters=args.iters, seed=args.seed)
    report.n_discarded += discarded

    lines = [f"word pairs analyzed    {len(report.rhos)}",
             f"pairs discarded        {report.n_discarded}",
             f"undefined correlations {report.n_undefined}",
             f"mean rho               {report.mean_rho:.4f}"]
    if report.bootstrap_mean_rho is not None:
        lines.append(f"bootstrap mean rho     {report.bootstrap_mean_rho:.4f}")

    if args.control:
        control, _ = load_checkpoint(args.control)
        ctrl_pairs, _ = _collect_sense_pairs(control, vocab, pairs, spans)
        ctrl_report = geometry_mod.topology_report(ctrl_pairs)
        n = min(len(report.rhos), len(ctrl_report.rhos))
        boot = geometry_mod.paired_bootstrap(report.rhos[:n], ctrl_report.rhos[:n],
                                             iters=args.iters, seed=args.seed)
        report.control_mean_rho = ctrl_report.mean_rho
        report.delta_vs_control = boot.delta
        report.p_value = boot.p_value
        lines += [f"control mean rho       {ctrl_report.mean_rho:.4f}",
                  f"delta vs control       {boot.delta:.4f}",
                  f"p value                {boot.p_value:.4f}"]

    os.makedirs(args.out, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "rho"])
    for i, rho in enumerate(report.rhos):
        w.writerow([i, repr(rho)])
    atomic_write_text(os.path.join(args.out, "topology.csv"), buf.getvalue())
    atomic_write_text(os.path.join(args.out, "topology_summary.txt"),
                      "\n".join(lines) + "\n")
    write_manifest(args.out, "analyze-topology",
                   {"paths.checkpoint": args.checkpoint, "paths.bitext": args.bitext,
                    "analysis.iters": args.iters, "analysis.min_count": args.min_count},
                   seed=args.seed, argv=argv)
    print("\n".join(lines))
    return 0


def cmd_analyze_procrustes(args, argv):
    model, vocab, pairs = _load_model_and_pairs(args)
    _require_files(args, ["control", "alignments", "word_pairs", "stop_list"])
    spans = _load_word_pair_spans(args, pairs)

    def embeddings(m):
        t_rows, e_rows, discarded = [], [], 0
        for pi, s_span, t_span in spans:
            try:
                vs = _span_sense_matrix(m, vocab, pairs[pi].src_text.split(), s_span)
                vt = _span_sense_matrix(m, vocab, pairs[pi].tgt_text.split(), t_span)
                import senselign.tensor as tt
                pi_s = norm_pool_weights(tt.Tensor(vs[None, None]), args.tau_pool).data[0, 0]
                pi_t = norm_pool_weights(tt.Tensor(vt[None, None]), args.tau_pool).data[0, 0]
                e_rows.append(geometry_mod.mixture_embedding(vs, pi_s))
                t_rows.append(geometry_mod.mixture_embedding(vt, pi_t))
            except geometry_mod.PairDiscarded:
                discarded += 1
        return np.asarray(t_rows), np.asarray(e_rows), discarded

    t_rows, e_rows, discarded = embeddings(model)
    if len(t_rows) == 0:
        raise ConfigError("no usable aligned word pairs for the analysis")
    report = geometry_mod.procrustes_align(t_rows, e_rows,
                                           subsample_size=args.subsample_size,
                                           n_subsamples=args.n_subsamples, seed=args.seed)
    report.n_discarded = discarded
    lines = [f"aligned word pairs     {report.n_pairs}",
             f"pairs discarded        {report.n_discarded}",
             f"mean cosine            {report.mean_cosine:.4f}",
             f"rank deficient         {report.rank_deficient}"]
    if report.subsample_means:
        lines.append("subsample means        "
                     + " ".join(f"{m:.4f}" for m in report.subsample_means))
    if args.control:
        control, _ = load_checkpoint(args.control)
        ct, ce, _ = embeddings(control)
        ctrl = geometry_mod.procrustes_align(ct, ce, subsample_size=args.subsample_size,
                                             n_subsamples=args.n_subsamples, seed=args.seed)
        lines += [f"control mean cosine    {ctrl.mean_cosine:.4f}",
                  f"delta vs control       {report.mean_cosine - ctrl.mean_cosine:.4f}"]

    os.makedirs(args.out, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    w.writerow(["mean_cosine", repr(report.mean_cosine)])
    w.writerow(["n_pairs", report.n_pairs])
    for i, m in enumerate(report.subsample_means):
        w.writerow([f"subsample_{i}", repr(m)])
    atomic_write_text(os.path.join(args.out, "procrustes.csv"), buf.getvalue())
    atomic_write_text(os.path.join(args.out, "procrustes_summary.txt"),
                      "\n".join(lines) + "\n")
    np.save(os.path.join(args.out, "rotation.npy"), report.q)
    write_manifest(args.out, "analyze-procrustes",
                   {"paths.checkpoint": args.checkpoint, "paths.bitext": args.bitext,
                    "analysis.tau_pool": args.tau_pool},
                   seed=args.seed, argv=argv)
    print("\n".join(lines))
    return 0


def cmd_score_mc(args, argv):
    _require_files(args, ["checkpoint", "vocab", "items"])
    model, _ = load_checkpoint(args.checkpoint)
    vocab = corpus_mod.Vocab.load(args.vocab)
    items = scoring_mod.load_mc_items_tsv(args.items)
    params = scoring_mod.ScoreParams(scheme=args.scheme, lam=args.lam, alpha=args.alpha)
    acc = scoring_mod.accuracy(model, vocab, items, params)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "mc_results.csv"),
                      scoring_mod.results_csv(model, vocab, items, params))
    write_manifest(args.out, "score-mc",
                   config_snapshot(score=params,
                                   extra={"paths.items": args.items,
                                          "paths.checkpoint": args.checkpoint}),
                   seed=0, argv=argv)
    print(f"accuracy = {acc:.4f} over {len(items)} items")
    return 0


def cmd_grid_search(args, argv):
    _require_files(args, ["checkpoint", "vocab", "items"])
    model, _ = load_checkpoint(args.checkpoint)
    vocab = corpus_mod.Vocab.load(args.vocab)
    items = scoring_mod.load_mc_items_tsv(args.items)
    best, rows = scoring_mod.grid_search(model, vocab, items)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "grid.csv"), scoring_mod.grid_csv(rows))
    best_acc = max(acc for _, _, _, acc in rows)
    line = (f"best: scheme={best.scheme} lambda={best.lam} alpha={best.alpha} "
            f"accuracy={best_acc:.4f}")
    atomic_write_text(os.path.join(args.out, "best.txt"), line + "\n")
    write_manifest(args.out, "grid-search",
                   config_snapshot(score=best, extra={"paths.items": args.items}),
                   seed=0, argv=argv)
    print(line)
    return 0


def cmd_plot(args, argv):
    _require_files(args, ["metrics"])
    paths = plot_metrics(args.metrics, args.out, columns=tuple(args.columns))
    write_manifest(args.out, "plot",
                   {"paths.metrics": args.metrics,
                    "plot.columns": ",".join(args.columns)}, seed=0, argv=argv)
    for p in paths:
        print(p)
    return 0


def cmd_generate(args, argv):
    _require_files(args, ["checkpoint", "vocab"])
    model, _ = load_checkpoint(args.checkpoint)
    vocab = corpus_mod.Vocab.load(args.vocab)
    prompt_ids = corpus_mod.tokenize(args.prompt, vocab, append_eos=False)
    if not prompt_ids:
        prompt_ids = [vocab.eos_id]
    out_ids = model.generate_greedy(prompt_ids, args.max_new, eos_id=vocab.eos_id)
    print(corpus_mod.detokenize(out_ids, vocab))
    return 0


if __name__ == "__main__":
    sys.exit(main())

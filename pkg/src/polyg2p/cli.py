"""Command-line pipeline: corpus generation, pretraining, head and baseline
training, prediction, evaluation, and figure-data export.

Every subcommand writes its artifacts plus a manifest (config snapshot, seed,
and content hashes of the inputs it read) into the output directory.
Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baseline as B
from . import corpus as C
from . import encoder as E
from . import evalviz as V
from . import heads as H
from .checkpoint import CheckpointError, load_into, param_fingerprint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, module_seed

log = logging.getLogger("polyg2p")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(config: RunConfig, subcommand: str, inputs, outputs) -> None:
    manifest = {
        "subcommand": subcommand,
        "seed": config.seed,
        "config": config.snapshot(),
        "inputs": {str(p): _sha256(Path(p)) for p in sorted(str(x) for x in inputs)},
        "outputs": sorted(str(p) for p in outputs),
    }
    path = config.outdir / f"{subcommand.replace('-', '_')}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")


def _read_lines(path: Path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")


def _load_corpus(path: Path) -> list[C.AnnotatedSentence]:
    return C.parse_corpus(_read_lines(path))


def _load_dictionary(path: Path) -> C.PronunciationDictionary:
    return C.parse_dictionary(_read_lines(path))


def _instances(corpus) -> list[H.TrainInstance]:
    return [H.TrainInstance(s.chars, s.targets[0][0], s.chars[s.targets[0][0]],
                            s.targets[0][1])
            for s in corpus]


def _metrics_tsv(history, columns) -> str:
    lines = ["\t".join(columns)]
    for row in history:
        cells = []
        for col in columns:
            value = row[col]
            cells.append(str(value) if isinstance(value, int) else f"{value:.6f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


# ---- subcommands -----------------------------------------------------------

def cmd_gen_synth(config: RunConfig, args) -> int:
    spec = config.synth_spec()
    corpus = C.generate_synthetic(spec, seed=module_seed(config, "synth"))
    corpus_path = config.path("corpus", "corpus.tsv")
    dict_path = config.path("dictionary", "dictionary.tsv")
    pairs_path = config.path("pairs", "pretrain_pairs.tsv")
    corpus_path.write_text(C.serialize_corpus(corpus.sentences), encoding="utf-8")
    dict_path.write_text(C.serialize_dictionary(corpus.dictionary), encoding="utf-8")
    pairs_path.write_text(
        "".join(f"{a}\t{b}\n" for a, b in corpus.sentence_pairs()), encoding="utf-8")
    _write_manifest(config, "gen-synth", [], [corpus_path, dict_path, pairs_path])
    log.info("wrote %d sentences, %d dictionary entries, %d pairs",
             len(corpus.sentences), len(corpus.dictionary.entries),
             sum(len(d) - 1 for d in corpus.documents))
    return EXIT_OK


def _load_pairs(config: RunConfig, corpus_path: Path) -> list[tuple[str, str]]:
    pairs_path = config.paths.get("pairs")
    default_pairs = config.outdir / "pretrain_pairs.tsv"
    if pairs_path is None and default_pairs.exists():
        pairs_path = default_pairs
    if pairs_path is not None:
        pairs = []
        for lineno, raw in enumerate(_read_lines(pairs_path), start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{pairs_path}:{lineno}: expected two tab-separated sentences")
            pairs.append((parts[0], parts[1]))
        return pairs
    corpus = _load_corpus(corpus_path)
    return E.build_sentence_pairs([s.chars for s in corpus])


def cmd_pretrain(config: RunConfig, args) -> int:
    corpus_path = config.path("corpus", "corpus.tsv")
    pairs = _load_pairs(config, corpus_path)
    corpus = _load_corpus(corpus_path)
    vocab = E.Vocabulary.from_texts([s.chars for s in corpus]
                                    + [t for pair in pairs for t in pair])
    model = E.EncoderModel(config.encoder_config(vocab.size),
                           seed=module_seed(config, "pretrain"))
    history = E.pretrain(model, vocab, pairs, config.pretrain_config(),
                         seed=module_seed(config, "pretrain"))
    vocab_path = config.path("vocab", "vocab.tsv")
    encoder_path = config.path("encoder", "encoder.ckpt")
    history_path = config.outdir / "pretrain_history.tsv"
    summary_path = config.outdir / "pretrain_summary.json"
    vocab.save(vocab_path)
    save_checkpoint(encoder_path, model.parameters())
    history_path.write_text(
        _metrics_tsv([{k: row[k] for k in ("epoch", "mlm_loss", "nsp_loss")}
                      for row in history],
                     ["epoch", "mlm_loss", "nsp_loss"]), encoding="utf-8")
    summary = {
        "initial_mlm_loss": history[0]["mlm_loss"],
        "final_mlm_loss": history[-1]["mlm_loss"],
        "mlm_ratio": history[-1]["mlm_loss"] / history[0]["mlm_loss"],
        "final_nsp_accuracy": history[-1]["nsp_accuracy"],
        "encoder_fingerprint": param_fingerprint(model.parameters()),
    }
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    _write_manifest(config, "pretrain", [corpus_path],
                    [vocab_path, encoder_path, history_path, summary_path])
    return EXIT_OK


def _load_encoder(config: RunConfig, vocab: E.Vocabulary) -> E.EncoderModel:
    encoder_path = config.path("encoder", "encoder.ckpt")
    model = E.EncoderModel(config.encoder_config(vocab.size), seed=0)
    load_into(model.parameters(), encoder_path)
    model.freeze()
    return model


def _corpus_inventory(config: RunConfig):
    corpus_path = config.path("corpus", "corpus.tsv")
    dict_path = config.path("dictionary", "dictionary.tsv")
    corpus = _load_corpus(corpus_path)
    dictionary = _load_dictionary(dict_path)
    inventory = C.build_inventory(corpus, dictionary,
                                  config.sections["eval"]["min_count"])
    return corpus, dictionary, inventory, [corpus_path, dict_path]


def _holdout_split(instances, folds: C.FoldAssignment | None, dev_fold: int, rng):
    if folds is not None:
        dev_idx = set(folds.indices(dev_fold % folds.k))
        train = [inst for i, inst in enumerate(instances) if i not in dev_idx]
        dev = [instances[i] for i in sorted(dev_idx)]
        return train, dev
    order = rng.permutation(len(instances))
    n_dev = max(1, len(instances) // 10)
    dev = [instances[i] for i in order[:n_dev]]
    train = [instances[i] for i in order[n_dev:]]
    return train, dev


def cmd_train_head(config: RunConfig, args) -> int:
    corpus, dictionary, inventory, inputs = _corpus_inventory(config)
    vocab = E.Vocabulary.load(config.path("vocab", "vocab.tsv"))
    encoder = _load_encoder(config, vocab)
    arch = args.arch or config.sections["head"]["arch"]
    head_config = config.head_config(encoder.config.d_model, arch=arch)
    registry = H.HeadRegistry.from_inventory(head_config, inventory,
                                             seed=module_seed(config, "head"))
    instances = [inst for inst in _instances(corpus) if inst.char in inventory.candidates]
    rng = np.random.default_rng(module_seed(config, "head"))
    train_set, dev_set = _holdout_split(instances, None, 0, rng)
    history = H.train_head(registry, encoder, vocab, train_set, dev_set,
                           config.head_train_config(),
                           seed=module_seed(config, "head"))
    head_path = config.path("head", f"head_{arch}.ckpt")
    meta_path = head_path.with_suffix(".json")
    metrics_path = config.outdir / f"head_{arch}_metrics.tsv"
    save_checkpoint(head_path, registry.parameters())
    meta_path.write_text(json.dumps({
        "arch": arch,
        "feature_dim": head_config.feature_dim,
        "trunk_width": head_config.trunk_width,
        "dropout": head_config.dropout,
        "lstm_layers": head_config.lstm_layers,
        "tf_blocks": head_config.tf_blocks,
        "tf_heads": head_config.tf_heads,
        "candidates": registry.candidates,
        "encoder_fingerprint": param_fingerprint(encoder.parameters()),
    }, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    metrics_path.write_text(
        _metrics_tsv(history, ["epoch", "train_loss", "dev_acc"]), encoding="utf-8")
    _write_manifest(config, "train-head",
                    inputs + [config.path("vocab", "vocab.tsv"),
                              config.path("encoder", "encoder.ckpt")],
                    [head_path, meta_path, metrics_path])
    return EXIT_OK


def _load_head(config: RunConfig, encoder: E.EncoderModel, arch: str) -> H.HeadRegistry:
    head_path = config.path("head", f"head_{arch}.ckpt")
    meta_path = head_path.with_suffix(".json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read head metadata: {exc}")
    head_config = H.HeadConfig(arch=meta["arch"], feature_dim=meta["feature_dim"],
                               trunk_width=meta["trunk_width"], dropout=meta["dropout"],
                               lstm_layers=meta["lstm_layers"],
                               tf_blocks=meta["tf_blocks"], tf_heads=meta["tf_heads"])
    registry = H.HeadRegistry(head_config, seed=0)
    for char, candidates in meta["candidates"].items():
        registry.register(char, candidates)
    load_into(registry.parameters(), head_path)
    return registry


def cmd_train_baseline(config: RunConfig, args) -> int:
    corpus, dictionary, inventory, inputs = _corpus_inventory(config)
    lexicon = {}
    if "lexicon" in config.paths:
        lexicon = B.parse_lexicon(_read_lines(config.paths["lexicon"]))
        inputs.append(config.paths["lexicon"])
    labels = sorted({lb for cands in inventory.candidates.values() for lb in cands})
    baseline_config = config.baseline_config(labels + [B.NOT_POLYPHONE])
    chars = {ch for s in corpus for ch in s.chars}
    model = B.BaselineModel(baseline_config, chars, lexicon,
                            seed=module_seed(config, "baseline"))
    instances = [(s.chars, s.targets[0][0], s.targets[0][1]) for s in corpus
                 if s.chars[s.targets[0][0]] in inventory.candidates]
    rng = np.random.default_rng(module_seed(config, "baseline"))
    train_set, dev_set = _holdout_split(instances, None, 0, rng)
    history = B.train_baseline(model, train_set, dev_set,
                               config.baseline_train_config(),
                               seed=module_seed(config, "baseline"))
    baseline_path = config.path("baseline", "baseline.ckpt")
    meta_path = baseline_path.with_suffix(".json")
    metrics_path = config.outdir / "baseline_metrics.tsv"
    save_checkpoint(baseline_path, model.parameters())
    meta_path.write_text(json.dumps({
        "labels": baseline_config.labels,
        "char_vocab": model.char_vocab,
        "lexicon": lexicon,
        "char_width": baseline_config.char_width,
        "pos_width": baseline_config.pos_width,
        "context": baseline_config.context,
        "hidden": baseline_config.hidden,
        "layers": baseline_config.layers,
    }, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    metrics_path.write_text(
        _metrics_tsv(history, ["epoch", "train_loss", "dev_acc"]), encoding="utf-8")
    _write_manifest(config, "train-baseline", inputs,
                    [baseline_path, meta_path, metrics_path])
    return EXIT_OK


def cmd_predict(config: RunConfig, args) -> int:
    _, dictionary, inventory, _ = _corpus_inventory(config)
    vocab = E.Vocabulary.load(config.path("vocab", "vocab.tsv"))
    encoder = _load_encoder(config, vocab)
    arch = args.arch or config.sections["head"]["arch"]
    registry = _load_head(config, encoder, arch)
    predictor = H.make_predictor(registry, encoder, vocab)
    for raw in (args.input or sys.stdin):
        sentence = raw.strip()
        if not sentence:
            continue
        prons = C.g2p_route(sentence, dictionary, inventory, predictor)
        print(" ".join(prons))
    return EXIT_OK


def _method_factories(config: RunConfig, corpus, dictionary, inventory, vocab,
                      encoder, cache, collect_attention):
    """Predictor factories keyed by method name for cross-validation."""

    def head_factory(arch):
        def factory(train, dev, fold):
            head_config = config.head_config(encoder.config.d_model, arch=arch)
            registry = H.HeadRegistry.from_inventory(
                head_config, inventory, seed=module_seed(config, "head") + fold)
            train_insts = [H.TrainInstance(s, p, c, lb) for s, p, c, lb in train]
            dev_insts = [H.TrainInstance(s, p, c, lb) for s, p, c, lb in dev]
            H.train_head(registry, encoder, vocab, train_insts, dev_insts,
                         config.head_train_config(),
                         seed=module_seed(config, "head") + fold, cache=cache)
            if arch == "transformer" and collect_attention is not None:
                collect_attention[fold] = registry

            def predictor(sentence, position, char):
                probs = registry.probabilities(cache[sentence], position + 1, char)
                return registry.candidates[char][int(np.argmax(probs))]

            return predictor
        return factory

    def baseline_factory(train, dev, fold):
        labels = sorted({lb for cands in inventory.candidates.values() for lb in cands})
        baseline_config = config.baseline_config(labels + [B.NOT_POLYPHONE])
        chars = {ch for s in corpus for ch in s.chars}
        model = B.BaselineModel(baseline_config, chars, {},
                                seed=module_seed(config, "baseline") + fold)
        B.train_baseline(model, [(s, p, lb) for s, p, _, lb in train],
                         [(s, p, lb) for s, p, _, lb in dev],
                         config.baseline_train_config(),
                         seed=module_seed(config, "baseline") + fold)
        return lambda sentence, position, char: model.predict_label(sentence, position)

    return {
        "baseline": baseline_factory,
        "bert+fc": head_factory("fc"),
        "bert+lstm": head_factory("lstm"),
        "bert+transformer": head_factory("transformer"),
    }


def cmd_eval(config: RunConfig, args) -> int:
    corpus, dictionary, inventory, inputs = _corpus_inventory(config)
    method = args.method or config.sections["eval"]["method"]
    methods = list(V.METHODS) if method == "all" else [method]
    unknown = [m for m in methods if m not in V.METHODS]
    if unknown:
        raise ConfigError(f"unknown eval method {unknown[0]!r}; choose from {V.METHODS} or 'all'")

    samples = [(s.chars, s.targets[0][0], s.chars[s.targets[0][0]], s.targets[0][1])
               for s in corpus if s.chars[s.targets[0][0]] in inventory.candidates]
    kept = [s for s in corpus if s.chars[s.targets[0][0]] in inventory.candidates]
    k = config.sections["eval"]["k"]
    folds_path = config.paths.get("folds")
    if folds_path is not None:
        folds = C.parse_folds(_read_lines(folds_path))
        inputs.append(folds_path)
        if len(folds.assignment) != len(samples):
            raise DataError(f"fold file covers {len(folds.assignment)} samples, "
                            f"corpus has {len(samples)} in-inventory samples")
    else:
        folds = C.stratified_kfold(kept, inventory, k, seed=module_seed(config, "folds"))
        folds_path = config.outdir / "folds.tsv"
        folds_path.write_text(C.serialize_folds(folds), encoding="utf-8")

    needs_encoder = any(m.startswith("bert+") for m in methods)
    vocab = encoder = cache = None
    if needs_encoder:
        vocab = E.Vocabulary.load(config.path("vocab", "vocab.tsv"))
        encoder = _load_encoder(config, vocab)
        inputs += [config.path("vocab", "vocab.tsv"), config.path("encoder", "encoder.ckpt")]
        cache = H.FeatureCache(encoder, vocab)
        cache.warm([s for s, _, _, _ in samples])

    s_ctx = config.sections["eval"]["attention_context"]
    attention_registries: dict[int, H.HeadRegistry] = {}
    factories = _method_factories(config, corpus, dictionary, inventory, vocab,
                                  encoder, cache, attention_registries)
    reports = {}
    attention_sums = None
    attention_n = 0
    masked_sums = None

    for m in methods:
        attention_registries.clear()

        def fold_hook(fold, predictor, test):
            nonlocal attention_sums, attention_n, masked_sums
            registry = attention_registries.get(fold)
            if registry is None:
                return
            amap = V.extract_attention(
                lambda sentence, position: (registry.first_block_attention(cache[sentence]),
                                            position + 1),
                [(s, p) for s, p, _, _ in test], s_ctx)
            total = amap.weights * amap.n_instances
            attention_sums = total if attention_sums is None else attention_sums + total
            masked = amap.masked_counts
            masked_sums = masked if masked_sums is None else masked_sums + masked
            attention_n += amap.n_instances

        reports[m] = V.cross_validate(factories[m], samples, folds,
                                      fold_hook=fold_hook if m == "bert+transformer" else None)
        log.info("method %s: mean accuracy %.4f +- %.4f", m, reports[m].mean,
                 reports[m].stddev)

    accuracy_path = config.outdir / "accuracy.tsv"
    accuracy_path.write_text(V.format_accuracy_tsv(reports), encoding="utf-8")
    outputs = [accuracy_path, folds_path]

    if attention_sums is not None:
        amap = V.CroppedAttentionMap(attention_sums / attention_n, s_ctx,
                                     attention_n, masked_sums)
        attn_path = config.outdir / "attention_map.tsv"
        attn_path.write_text(V.format_attention_tsv(amap), encoding="utf-8")
        stats_path = config.outdir / "attention_stats.tsv"
        stats_path.write_text(V.format_locality_tsv({
            "attention_locality_spearman": V.attention_locality(amap),
            "center_weight": float(amap.weights[s_ctx, s_ctx]),
            "instances": float(attention_n),
        }), encoding="utf-8")
        outputs += [attn_path, stats_path]

    _write_manifest(config, "eval", inputs, outputs)
    return EXIT_OK


def cmd_attention(config: RunConfig, args) -> int:
    corpus, dictionary, inventory, inputs = _corpus_inventory(config)
    vocab = E.Vocabulary.load(config.path("vocab", "vocab.tsv"))
    encoder = _load_encoder(config, vocab)
    registry = _load_head(config, encoder, "transformer")
    cache = H.FeatureCache(encoder, vocab)
    instances = [(s.chars, s.targets[0][0]) for s in corpus
                 if s.chars[s.targets[0][0]] in inventory.candidates]
    if args.limit:
        instances = instances[:args.limit]
    cache.warm([s for s, _ in instances])
    s_ctx = config.sections["eval"]["attention_context"]
    amap = V.extract_attention(
        lambda sentence, position: (registry.first_block_attention(cache[sentence]),
                                    position + 1),
        instances, s_ctx)
    attn_path = config.outdir / "attention_map.tsv"
    stats_path = config.outdir / "attention_stats.tsv"
    attn_path.write_text(V.format_attention_tsv(amap), encoding="utf-8")
    stats_path.write_text(V.format_locality_tsv({
        "attention_locality_spearman": V.attention_locality(amap),
        "center_weight": float(amap.weights[s_ctx, s_ctx]),
        "instances": float(amap.n_instances),
    }), encoding="utf-8")
    _write_manifest(config, "attention",
                    inputs + [config.path("vocab", "vocab.tsv"),
                              config.path("encoder", "encoder.ckpt"),
                              config.path("head", "head_transformer.ckpt")],
                    [attn_path, stats_path])
    return EXIT_OK


def cmd_pca(config: RunConfig, args) -> int:
    corpus, dictionary, inventory, inputs = _corpus_inventory(config)
    vocab = E.Vocabulary.load(config.path("vocab", "vocab.tsv"))
    encoder = _load_encoder(config, vocab)
    char = args.char
    if char is None:
        raise ConfigError("pca requires --char CHARACTER")
    if char not in inventory.candidates:
        raise DataError(f"character {char!r} is not in the polyphone inventory")
    rows = [(s.chars, s.targets[0][0], s.targets[0][1]) for s in corpus
            if s.chars[s.targets[0][0]] == char]
    if args.limit:
        rows = rows[:args.limit]
    if len(rows) < 2:
        raise DataError(f"need at least 2 samples of {char!r} for a projection")
    cache = H.FeatureCache(encoder, vocab)
    cache.warm([s for s, _, _ in rows])
    feats = np.stack([cache[s][p + 1] for s, p, _ in rows])
    coords, ratios = V.pca_project(feats)
    pca_path = config.outdir / f"pca_{ord(char):04x}.tsv"
    text = V.format_pca_tsv([lb for _, _, lb in rows], coords)
    header = (f"# features of {len(rows)} instances of U+{ord(char):04X}; "
              f"explained variance {ratios[0]:.6f} {ratios[1]:.6f}\n")
    pca_path.write_text(header + text, encoding="utf-8")
    _write_manifest(config, "pca",
                    inputs + [config.path("vocab", "vocab.tsv"),
                              config.path("encoder", "encoder.ckpt")],
                    [pca_path])
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "pretrain": cmd_pretrain,
    "train-head": cmd_train_head,
    "train-baseline": cmd_train_baseline,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "attention": cmd_attention,
    "pca": cmd_pca,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polyg2p",
        description="Polyphone disambiguation G2P pipeline")
    parser.add_argument("--config", help="INI config file (preset defaults otherwise)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name in ("train-head", "predict"):
            p.add_argument("--arch", choices=H.ARCHITECTURES,
                           help="head architecture (default from config)")
        if name == "predict":
            p.add_argument("--input", type=argparse.FileType("r", encoding="utf-8"),
                           help="sentences file, one per line (default stdin)")
        if name == "eval":
            p.add_argument("--method", help="baseline | bert+fc | bert+lstm | "
                                            "bert+transformer | all")
        if name in ("attention", "pca"):
            p.add_argument("--limit", type=int, default=0,
                           help="cap the number of instances")
        if name == "pca":
            p.add_argument("--char", help="polyphonic character to project")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        config = load_config(args.config, args.overrides)
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.outdir = Path(args.out)
        config.outdir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.subcommand](config, args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except C.InternalConsistencyError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (C.CorpusError, C.RoutingError, DataError, E.VocabularyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

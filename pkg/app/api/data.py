import argparse
from pathlib import Path

import structlog

from app.dependencies import RunDirectory, get_oracle, get_unpaired, require_paths, style_of
from app.errors import ConfigError, DatasetError
from app.schemas import Dataset, RunConfig, Split
from app.services.classifier import filter_paraphrase_pairs, frozen, load_classifier
from app.services.corpus import load_pairs, load_unpaired, write_pairs
from app.services.lexicon import build_synthetic_corpus, load_antonyms, load_lexicon
from app.services.pipeline import direction_name, generate_pseudo_pairs, select_high_quality_pairs
from app.services.seq2seq import load_checkpoint

logger = structlog.get_logger(__name__)


def register(subparsers, parent: argparse.ArgumentParser) -> None:
    p = subparsers.add_parser("make-pairs", parents=[parent], help="antonym-swap synthetic pairs")
    p.add_argument("--input", action="append", default=[], help="unpaired `{split}.{style}` file (repeatable)")
    p.add_argument("--output", help="pair file (default <out>/pairs/synthetic.tsv)")
    p.set_defaults(handler=make_pairs)

    p = subparsers.add_parser("filter-paraphrases", parents=[parent], help="classifier-filtered paraphrase subset")
    p.add_argument("--pairs", help="paraphrase TSV (default data.paraphrases)")
    p.add_argument("--classifier", help="classifier checkpoint (default <out>/checkpoints/classifier.pt)")
    p.add_argument("--output", help="pair file (default <out>/pairs/paraphrases.filtered.tsv)")
    p.set_defaults(handler=filter_paraphrases)

    p = subparsers.add_parser("select-pairs", parents=[parent], help="generate and gate pseudo-pairs for offline training")
    p.add_argument("--model-a", help="s1->s2 checkpoint (default <out>/checkpoints/ibt_a.pt)")
    p.add_argument("--model-b", help="s2->s1 checkpoint (default <out>/checkpoints/ibt_b.pt)")
    p.add_argument("--classifier", help="classifier checkpoint (default <out>/checkpoints/classifier.pt)")
    p.set_defaults(handler=select_pairs)


def make_pairs(args, config: RunConfig, run: RunDirectory) -> int:
    """Build the lexicon-synthetic pair corpus"""
    require_paths(config.data.lexicon, config.data.antonyms, what="lexical resource")
    lexicon = load_lexicon(config.data.lexicon)
    antonyms = load_antonyms(config.data.antonyms)

    if args.input:
        corpora = [
            load_unpaired(p, style_of(p), lowercase=config.data.lowercase, max_len=config.data.max_len)
            for p in args.input
        ]
    else:
        corpora = [get_unpaired(config, Split.TRAIN, style) for style in config.style.as_tuple()]
    items = [item for corpus in corpora for item in corpus.items]
    unpaired = Dataset(items=tuple(items), split=Split.TRAIN)

    pairs = build_synthetic_corpus(lexicon, antonyms, unpaired, config.data.cutoff, styles=config.style)
    output = Path(args.output) if args.output else run.pairs / "synthetic.tsv"
    write_pairs(pairs, output)
    print(f"{len(pairs)} synthetic pairs from {len(unpaired)} sentences -> {output}")
    return 0


def filter_paraphrases(args, config: RunConfig, run: RunDirectory) -> int:
    """Keep paraphrase pairs the classifier reads as source-style -> target-style"""
    source = args.pairs or config.data.paraphrases
    if not source:
        raise ConfigError("no paraphrase bank: pass --pairs or set data.paraphrases")
    classifier_path = args.classifier or run.checkpoint("classifier")
    require_paths(source, classifier_path)

    clf = load_classifier(classifier_path)
    pairs = load_pairs(
        source, config.style.source, config.style.target, lowercase=config.data.lowercase, max_len=config.data.max_len
    )
    kept = filter_paraphrase_pairs(clf, pairs, config.sigma)
    output = Path(args.output) if args.output else run.pairs / "paraphrases.filtered.tsv"
    write_pairs(kept, output, with_scores=True)
    print(f"kept {len(kept)} of {len(pairs)} pairs at sigma={config.sigma} -> {output}")
    return 0


def select_pairs(args, config: RunConfig, run: RunDirectory) -> int:
    """Generate scored pseudo-pairs from both IBT models and keep the high-quality ones"""
    paths = {
        "a": args.model_a or run.checkpoint("ibt_a"),
        "b": args.model_b or run.checkpoint("ibt_b"),
    }
    classifier_path = args.classifier or run.checkpoint("classifier")
    require_paths(*paths.values(), classifier_path)

    clf = load_classifier(classifier_path)
    oracle = get_oracle(config.metric.oracle, lowercase=config.metric.oracle_lowercase)
    for path in paths.values():
        model = load_checkpoint(path)
        if model.styles is None:
            raise DatasetError(f"{path}: checkpoint has no transfer direction")
        sources = get_unpaired(config, Split.TRAIN, model.styles.source)
        with frozen(clf, f"select-pairs {direction_name(model.styles)}"):
            generated = generate_pseudo_pairs(
                model,
                sources,
                clf,
                oracle,
                sample_count=config.selection.sample_count,
                max_len=config.ibt.max_len,
                seed=config.seed,
            )
        selected = select_high_quality_pairs(generated, config.selection)
        name = f"{model.styles.source}-{model.styles.target}"
        write_pairs(generated, run.pairs / f"generated.{name}.tsv", with_scores=True)
        write_pairs(selected, run.pairs / f"selected.{name}.tsv", with_scores=True)
        print(f"{direction_name(model.styles)}: selected {len(selected)} of {len(generated)} generated pairs")
    return 0

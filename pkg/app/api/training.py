import argparse
from pathlib import Path
from typing import List, Optional

import structlog

from app.dependencies import RunDirectory, get_oracle, get_references, get_unpaired, require_paths
from app.errors import DatasetError
from app.schemas import Dataset, RunConfig, Split
from app.services.classifier import classifier_accuracy, frozen, load_classifier, save_classifier, train_classifier
from app.services.corpus import load_pairs
from app.services.pipeline import (
    ModelPair,
    TrainingLog,
    ValidationSplit,
    direction_name,
    further_pretrain,
    ibt_train,
    offline_train,
)
from app.services.seq2seq import build_model, load_checkpoint, save_checkpoint

logger = structlog.get_logger(__name__)


def register(subparsers, parent: argparse.ArgumentParser) -> None:
    p = subparsers.add_parser("train-classifier", parents=[parent], help="train the frozen style classifier")
    p.set_defaults(handler=train_style_classifier)

    p = subparsers.add_parser("pretrain", parents=[parent], help="further pre-training on static pairs")
    p.add_argument("--pairs", action="append", default=[], help="pair TSV (repeatable; default <out>/pairs/synthetic.tsv)")
    p.set_defaults(handler=pretrain)

    p = subparsers.add_parser("ibt-train", parents=[parent], help="iterative back-translation with rewards")
    p.add_argument("--model", help="starting checkpoint (default <out>/checkpoints/pretrained.pt; pass base.pt to skip pre-training)")
    p.add_argument("--classifier", help="classifier checkpoint (default <out>/checkpoints/classifier.pt)")
    p.set_defaults(handler=ibt)

    p = subparsers.add_parser("train-offline", parents=[parent], help="offline training on selected pairs")
    p.add_argument("--base", help="base checkpoint (default <out>/checkpoints/base.pt)")
    p.add_argument("--pairs-a", help="s1->s2 pairs (default <out>/pairs/selected.<s1>-<s2>.tsv)")
    p.add_argument("--pairs-b", help="s2->s1 pairs (default <out>/pairs/selected.<s2>-<s1>.tsv)")
    p.add_argument("--classifier", help="classifier checkpoint (default <out>/checkpoints/classifier.pt)")
    p.set_defaults(handler=train_offline)


def _labeled(config: RunConfig, split: Split, required: bool = True) -> Dataset:
    corpora = [get_unpaired(config, split, style, required=required) for style in config.style.as_tuple()]
    return Dataset(items=tuple(item for corpus in corpora for item in corpus.items), split=split)


def train_style_classifier(args, config: RunConfig, run: RunDirectory) -> int:
    """Train the style classifier and report its accuracy per split"""
    train = _labeled(config, Split.TRAIN)
    valid = _labeled(config, Split.VALID, required=False)
    test = _labeled(config, Split.TEST, required=False)

    clf = train_classifier(train, valid, config.classifier, styles=config.style, progress=args.progress)
    path = save_classifier(clf, run.checkpoint("classifier"))

    for name, dataset in (("train", train), ("valid", valid), ("test", test)):
        if len(dataset):
            print(f"{name} accuracy: {classifier_accuracy(clf, dataset):.4f}")
    print(f"classifier saved -> {path} (fingerprint {clf.fingerprint()[:12]})")
    return 0


def pretrain(args, config: RunConfig, run: RunDirectory) -> int:
    """Build the base model and further pre-train it on static pairs"""
    pair_paths = args.pairs or [run.pairs / "synthetic.tsv"]
    require_paths(*pair_paths, what="pair file")

    items = []
    for path in pair_paths:
        dataset = load_pairs(
            path, config.style.source, config.style.target, lowercase=config.data.lowercase, max_len=config.data.max_len
        )
        items.extend(dataset.items)
    pairs = Dataset(items=tuple(items), split=Split.TRAIN)
    if not len(pairs):
        raise DatasetError("pre-training pairs are empty")

    train = _labeled(config, Split.TRAIN, required=False)
    sentences = [*train.utterances(), *(p.source for p in items), *(p.target for p in items)]
    base = build_model(config.backbone, sentences)
    save_checkpoint(base, run.checkpoint("base"))

    log = TrainingLog()
    model = further_pretrain(base, pairs, config.pretrain, log=log, progress=args.progress)
    path = save_checkpoint(model, run.checkpoint("pretrained"))
    log.write(run.stage_log("pretrain"))
    print(f"pre-trained on {len(pairs)} pairs -> {path}")
    return 0


def _validation(config: RunConfig) -> Optional[ValidationSplit]:
    parts: List[Dataset] = []
    for style in config.style.as_tuple():
        refs = get_references(config, Split.VALID, style, required=False)
        parts.append(refs if refs is not None else get_unpaired(config, Split.VALID, style, required=False))
    if not all(len(part) for part in parts):
        return None
    return ValidationSplit(s1=parts[0], s2=parts[1])


def ibt(args, config: RunConfig, run: RunDirectory) -> int:
    """Iterative back-translation between the two direction models"""
    model_path = args.model or run.checkpoint("pretrained")
    classifier_path = args.classifier or run.checkpoint("classifier")
    require_paths(model_path, classifier_path)

    start = load_checkpoint(model_path)
    clf = load_classifier(classifier_path)
    oracle = get_oracle(config.metric.oracle, lowercase=config.metric.oracle_lowercase) if config.reward.learned else None

    models = ModelPair.from_pretrained(start, config.style)
    log = TrainingLog()
    with frozen(clf, "ibt-train"):
        trained, log = ibt_train(
            models,
            get_unpaired(config, Split.TRAIN, config.style.source),
            get_unpaired(config, Split.TRAIN, config.style.target),
            _validation(config),
            clf,
            config.ibt,
            oracle=oracle,
            log=log,
            progress=args.progress,
        )

    save_checkpoint(trained.model_a, run.checkpoint("ibt_a"))
    save_checkpoint(trained.model_b, run.checkpoint("ibt_b"))
    log.write(run.logs_tsv)
    print(f"IBT finished: {direction_name(trained.model_a.styles)}, {direction_name(trained.model_b.styles)} -> {run.checkpoints}")
    return 0


def train_offline(args, config: RunConfig, run: RunDirectory) -> int:
    """Train fresh copies of the base model on the selected pairs of each direction"""
    styles = config.style
    base_path = args.base or run.checkpoint("base")
    jobs = [
        ("offline_a", styles, Path(args.pairs_a or run.pairs / f"selected.{styles.source}-{styles.target}.tsv")),
        ("offline_b", styles.reversed(), Path(args.pairs_b or run.pairs / f"selected.{styles.target}-{styles.source}.tsv")),
    ]
    require_paths(base_path, *(path for _, _, path in jobs))

    rewards = config.reward
    clf = None
    if rewards.sc0 or rewards.sc1:
        classifier_path = args.classifier or run.checkpoint("classifier")
        require_paths(classifier_path)
        clf = load_classifier(classifier_path)
    oracle = get_oracle(config.metric.oracle, lowercase=config.metric.oracle_lowercase) if rewards.learned else None

    base = load_checkpoint(base_path)
    log = TrainingLog()
    for name, direction, path in jobs:
        pairs = load_pairs(
            path, direction.source, direction.target, lowercase=config.data.lowercase, max_len=config.data.max_len
        )
        with frozen(clf, f"train-offline {direction_name(direction)}"):
            model = offline_train(base, pairs, rewards, clf, oracle, config.offline, log=log, progress=args.progress)
        saved = save_checkpoint(model, run.checkpoint(name))
        print(f"{direction_name(direction)}: trained on {len(pairs)} pairs -> {saved}")
    log.write(run.stage_log("offline"))
    return 0

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

import structlog
import torch

from app.dependencies import RunDirectory, get_oracle, get_references, require_paths
from app.errors import ConfigError, DatasetError
from app.schemas import RunConfig, Split, Utterance
from app.services.classifier import load_classifier
from app.services.corpus import detokenize, load_unpaired, read_lines, tokenize, truncate, write_utterances
from app.services.lexicon import load_antonyms, load_lexicon, swap_baseline
from app.services.metrics import (
    DirectionOutputs,
    correlation_matrix,
    evaluate_directions,
    format_report,
    read_system_scores,
    write_report,
)
from app.services.pipeline import direction_name, reference_sets
from app.services.seq2seq import greedy_decode_batch, load_checkpoint, sample_decode_batch

logger = structlog.get_logger(__name__)


def register(subparsers, parent: argparse.ArgumentParser) -> None:
    p = subparsers.add_parser("generate", parents=[parent], help="transfer arbitrary input")
    p.add_argument("--model", help="direction checkpoint (default <out>/checkpoints/ibt_a.pt)")
    p.add_argument("--input", help="one sentence per line")
    p.add_argument("--text", action="append", default=[], help="sentence to transfer (repeatable)")
    p.add_argument("--output", help="write outputs here instead of stdout")
    p.add_argument("--sample", action="store_true", help="ancestral sampling instead of greedy decoding")
    p.add_argument("--lexicon-baseline", action="store_true", help="antonym swap instead of a model")
    p.set_defaults(handler=generate)

    p = subparsers.add_parser("evaluate", parents=[parent], help="BLEU / ACC / HM report on a test split")
    p.add_argument("--split", default=Split.TEST.value, choices=[s.value for s in Split])
    p.add_argument("--outputs-a", help="system outputs for s1 -> s2, aligned with {split}.<s1> or {split}.src")
    p.add_argument("--outputs-b", help="system outputs for s2 -> s1, aligned with {split}.<s2>")
    p.add_argument("--model-a", help="s1->s2 checkpoint to decode with")
    p.add_argument("--model-b", help="s2->s1 checkpoint to decode with")
    p.add_argument("--copy-input", action="store_true", help="evaluate the input-copy baseline")
    p.add_argument("--lexicon-baseline", action="store_true", help="evaluate the antonym-swap baseline")
    p.add_argument("--classifier", help="classifier checkpoint (default <out>/checkpoints/classifier.pt)")
    p.set_defaults(handler=evaluate)

    p = subparsers.add_parser("correlate", parents=[parent], help="Pearson matrix over system-level metric scores")
    p.add_argument("--scores", required=True, help="TSV: one row per system, one column per metric")
    p.set_defaults(handler=correlate)


def _inputs(args, config: RunConfig) -> List[Utterance]:
    if args.input:
        require_paths(args.input, what="input file")
        dataset = load_unpaired(
            args.input, config.style.source, split=Split.TEST, lowercase=config.data.lowercase, max_len=config.data.max_len
        )
        return dataset.utterances()
    if args.text:
        return [
            truncate(tokenize(text, lowercase=config.data.lowercase), config.data.max_len, source="--text")
            for text in args.text
        ]
    raise ConfigError("nothing to transfer: pass --input or --text")


def generate(args, config: RunConfig, run: RunDirectory) -> int:
    """Decode arbitrary input with a trained direction model or the lexicon baseline"""
    sources = _inputs(args, config)
    if args.lexicon_baseline:
        require_paths(config.data.lexicon, config.data.antonyms, what="lexical resource")
        outputs = swap_baseline(
            load_lexicon(config.data.lexicon), load_antonyms(config.data.antonyms), sources, config.data.cutoff
        )
    else:
        model_path = args.model or run.checkpoint("ibt_a")
        require_paths(model_path)
        model = load_checkpoint(model_path)
        if args.sample:
            generator = torch.Generator().manual_seed(config.seed)
            outputs = [o.sampled for o in sample_decode_batch(model, sources, config.ibt.max_len, generator=generator)]
        else:
            outputs = greedy_decode_batch(model, sources, config.ibt.max_len)

    if args.output:
        path = write_utterances(outputs, args.output)
        print(f"{len(outputs)} outputs -> {path}")
    else:
        for line in outputs:
            print(detokenize(line))
    return 0


def _system(args) -> str:
    chosen = [
        name
        for name, on in (
            ("outputs", args.outputs_a or args.outputs_b),
            ("models", args.model_a or args.model_b),
            ("copy-input", args.copy_input),
            ("lexicon-baseline", args.lexicon_baseline),
        )
        if on
    ]
    if len(chosen) > 1:
        raise ConfigError(f"pick one system to evaluate, got {', '.join(chosen)}")
    return chosen[0] if chosen else "models"


def _read_outputs(path: str, lowercase: bool) -> List[Utterance]:
    # blank lines are empty outputs and keep their slot
    outputs = []
    for _, line in read_lines(path):
        outputs.append(tokenize(line, lowercase=lowercase) if line.strip() else Utterance(tokens=()))
    return outputs


def _explicit(args, system: str, index: int) -> bool:
    if system == "outputs":
        return (args.outputs_a, args.outputs_b)[index] is not None
    if system == "models":
        return (args.model_a, args.model_b)[index] is not None
    return False


def _outputs(
    args, config: RunConfig, run: RunDirectory, system: str, index: int, sources: List[Utterance]
) -> Optional[List[Utterance]]:
    if system == "copy-input":
        return list(sources)
    if system == "lexicon-baseline":
        require_paths(config.data.lexicon, config.data.antonyms, what="lexical resource")
        return swap_baseline(
            load_lexicon(config.data.lexicon), load_antonyms(config.data.antonyms), sources, config.data.cutoff
        )
    if system == "outputs":
        path = (args.outputs_a, args.outputs_b)[index]
        if path is None:
            return None
        require_paths(path, what="system output file")
        return _read_outputs(path, config.data.lowercase)

    path = (args.model_a, args.model_b)[index]
    if path is None and not (args.model_a or args.model_b):
        path = run.checkpoint(("ibt_a", "ibt_b")[index])
    if path is None:
        return None
    require_paths(path)
    return greedy_decode_batch(load_checkpoint(path), sources, config.ibt.max_len)


def evaluate(args, config: RunConfig, run: RunDirectory) -> int:
    """Score one system against the references of both directions"""
    system = _system(args)
    classifier_path = args.classifier or run.checkpoint("classifier")
    require_paths(classifier_path)
    clf = load_classifier(classifier_path)
    oracle = get_oracle(config.metric.oracle, lowercase=config.metric.oracle_lowercase)
    split = Split(args.split)

    parts = []
    for index, direction in enumerate((config.style, config.style.reversed())):
        found = get_references(config, split, direction.source, required=_explicit(args, system, index))
        if found is None:
            logger.warning("direction_skipped", direction=direction_name(direction), reason="no reference files")
            continue
        refs = reference_sets(found)
        sources = [r.source for r in refs]
        outputs = _outputs(args, config, run, system, index, sources)
        if outputs is None:
            continue
        if len(outputs) != len(refs):
            raise DatasetError(f"{direction_name(direction)}: {len(outputs)} outputs but {len(refs)} test sentences")
        parts.append(DirectionOutputs(direction_name(direction), outputs, refs, direction.target))

    meta: Dict[str, str] = {
        "system": system,
        "split": split.value,
        "backbone": config.backbone.kind.value,
        "oracle": oracle.name,
        "seed": str(config.seed),
    }
    report = evaluate_directions(parts, clf, [oracle], bleu_lowercase=config.metric.bleu_lowercase, config=meta)
    path = write_report(report, run.report_tsv)
    print(format_report(report))
    print(f"report -> {path}", file=sys.stderr)
    return 0


def correlate(args, config: RunConfig, run: RunDirectory) -> int:
    """Pearson correlation between every pair of metric columns"""
    require_paths(args.scores, what="score file")
    matrix = correlation_matrix(read_system_scores(args.scores))
    path = Path(run.root) / "correlation.tsv"
    matrix.to_csv(path, sep="\t", float_format="%.6f")
    print(matrix.to_string(float_format=lambda v: f"{v:.4f}"))
    return 0

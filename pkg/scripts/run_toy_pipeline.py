"""Run the whole toy pipeline through the CLI, stage by stage.

make-pairs -> train-classifier -> filter-paraphrases -> pretrain -> ibt-train
-> select-pairs -> train-offline -> evaluate (IBT models, then offline models)

Usage: python scripts/run_toy_pipeline.py [--config config/run.conf] [--out run] [--seed 0] [--set key=value]
Generate the data first with scripts/make_toy_task.py.
"""

import argparse
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from app.main import run  # noqa: E402


def stages(out):
    checkpoints = out / "checkpoints"
    pairs = out / "pairs"
    offline = [
        "--model-a", str(checkpoints / "offline_a.pt"),
        "--model-b", str(checkpoints / "offline_b.pt"),
        "--classifier", str(checkpoints / "classifier.pt"),
    ]
    return [
        (["make-pairs"], out),
        (["train-classifier"], out),
        (["filter-paraphrases"], out),
        (["pretrain", "--pairs", str(pairs / "synthetic.tsv"), "--pairs", str(pairs / "paraphrases.filtered.tsv")], out),
        (["ibt-train"], out),
        (["select-pairs"], out),
        (["train-offline"], out),
        (["evaluate"], out),
        (["evaluate", *offline], out / "offline"),
    ]


def run_pipeline(config, out, seed, overrides=(), progress=False):
    """Run every stage in order; returns the first non-zero exit code, else 0."""
    out = Path(out)
    for stage, target in stages(out):
        argv = [*stage, "--config", str(config), "--out", str(target), "--seed", str(seed)]
        for setting in overrides:
            argv += ["--set", setting]
        if progress:
            argv.append("--progress")
        print(f"== {stage[0]} ({target})", flush=True)
        code = run(argv)
        if code != 0:
            print(f"stage {stage[0]} failed with exit code {code}")
            return code
    return 0


def main():
    parser = argparse.ArgumentParser(description="Toy end-to-end pipeline")
    parser.add_argument("--config", default="config/run.conf")
    parser.add_argument("--out", default="run")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    parser.add_argument("--progress", action="store_true")
    args = parser.parse_args()

    code = run_pipeline(args.config, args.out, args.seed, args.set, args.progress)
    if code != 0:
        sys.exit(code)
    print(f"toy pipeline finished: {args.out}")


if __name__ == "__main__":
    main()

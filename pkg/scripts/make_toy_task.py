"""Generate the toy two-style marker task described in config/toy_task.yaml.

Writes, under --out (default data/toy):
  {train,valid,test}.{s1,s2}       unpaired corpora
  {valid,test}.{style}.ref0/ref1   rewrites into the opposite style
  paraphrases.tsv                  generic paraphrase bank (mixed directions)
  marker_lexicon.tsv               marker polarity scores for make-pairs
  marker_antonyms.tsv              marker -> opposite-style variants

Usage: python scripts/make_toy_task.py [--spec config/toy_task.yaml] [--out data/toy] [--seed 13]
"""

import argparse
import re
from pathlib import Path

import numpy as np
import yaml

SLOT_RE = re.compile(r"\{(\w+)\}")


def load_spec(path):
    with open(path, "r", encoding="utf-8") as f:
        spec = yaml.safe_load(f)
    for key in ("styles", "sizes", "markers", "slots", "templates"):
        if key not in spec:
            raise SystemExit(f"{path}: missing '{key}'")
    return spec


class ToyTask:
    def __init__(self, spec, seed):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.s1 = spec["styles"]["source"]
        self.s2 = spec["styles"]["target"]

    def draw(self):
        """A template with its non-marker slots filled in."""
        template = self.spec["templates"][self.rng.integers(len(self.spec["templates"]))]
        values = {}
        for slot in SLOT_RE.findall(template):
            if slot in self.spec["slots"] and slot not in values:
                options = self.spec["slots"][slot]
                values[slot] = options[self.rng.integers(len(options))]
        return template, values

    def render(self, template, values, style, pick="random"):
        def fill(match):
            slot = match.group(1)
            if slot in values:
                return values[slot]
            variants = self.spec["markers"][slot][style]
            if pick == "first":
                return variants[0]
            if pick == "last":
                return variants[-1]
            return variants[self.rng.integers(len(variants))]

        return SLOT_RE.sub(fill, template)

    def other(self, style):
        return self.s2 if style == self.s1 else self.s1

    def paraphrase_pair(self):
        template, values = self.draw()
        source_style = self.s1 if self.rng.random() < 0.5 else self.s2
        target_style = self.other(source_style) if self.rng.random() < 0.5 else source_style
        source = self.render(template, values, source_style)
        synonyms = self.spec.get("synonyms", {})
        swapped = {k: synonyms.get(v, v) for k, v in values.items()}
        target = self.render(template, swapped, target_style)
        return source, target


def write_lines(path, lines):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def write_task(spec, out, seed):
    """Write every toy-task file under `out`; returns the task."""
    task = ToyTask(spec, seed)
    out = Path(out)
    sizes = spec["sizes"]

    for style in (task.s1, task.s2):
        lines = [task.render(*task.draw(), style) for _ in range(sizes["train"])]
        write_lines(out / f"train.{style}", lines)

    for split in ("valid", "test"):
        for style in (task.s1, task.s2):
            sources, ref0, ref1 = [], [], []
            for _ in range(sizes[split]):
                template, values = task.draw()
                sources.append(task.render(template, values, style))
                ref0.append(task.render(template, values, task.other(style), pick="first"))
                ref1.append(task.render(template, values, task.other(style), pick="last"))
            write_lines(out / f"{split}.{style}", sources)
            write_lines(out / f"{split}.{style}.ref0", ref0)
            write_lines(out / f"{split}.{style}.ref1", ref1)

    pairs = [task.paraphrase_pair() for _ in range(sizes.get("paraphrases", 0))]
    write_lines(out / "paraphrases.tsv", [f"{a}\t{b}" for a, b in pairs])

    lexicon, antonyms = [], []
    for marker in spec["markers"].values():
        for word in marker[task.s1]:
            lexicon.append(f"{word}\t0.0\t0.9")
            antonyms.append(f"{word}\t{','.join(marker[task.s2])}")
        for word in marker[task.s2]:
            lexicon.append(f"{word}\t0.9\t0.0")
            antonyms.append(f"{word}\t{','.join(marker[task.s1])}")
    write_lines(out / "marker_lexicon.tsv", lexicon)
    write_lines(out / "marker_antonyms.tsv", antonyms)
    return task


def main():
    parser = argparse.ArgumentParser(description="Generate the toy marker task")
    parser.add_argument("--spec", default="config/toy_task.yaml")
    parser.add_argument("--out", default="data/toy")
    parser.add_argument("--seed", type=int, default=13)
    args = parser.parse_args()

    task = write_task(load_spec(args.spec), args.out, args.seed)
    print(f"toy task written to {args.out} ({task.s1} / {task.s2}, seed {args.seed})")


if __name__ == "__main__":
    main()

"""Export SentiWordNet scores and WordNet antonyms to the TSV formats
load_lexicon / load_antonyms read.

Every sense is written as its own lexicon row (word, pos, neg); the loader keeps
the most polar sense per surface form. Antonyms are listed in synset/lemma order,
so the first one matches the first WordNet lemma antonym.

Usage: python scripts/export_lexicon.py [--out-dir config] [--download]
"""

import argparse
from pathlib import Path

import nltk
from nltk.corpus import sentiwordnet as swn
from nltk.corpus import wordnet as wn


def export_lexicon(path):
    rows = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write("# word\tpos_score\tneg_score\n")
        for senti in swn.all_senti_synsets():
            pos, neg = senti.pos_score(), senti.neg_score()
            if pos == 0 and neg == 0:
                continue
            for lemma in senti.synset.lemmas():
                word = lemma.name().lower()
                if "_" in word:
                    continue
                f.write(f"{word}\t{pos}\t{neg}\n")
                rows += 1
    return rows


def export_antonyms(path):
    antonyms = {}
    for synset in wn.all_synsets():
        for lemma in synset.lemmas():
            word = lemma.name().lower()
            if "_" in word:
                continue
            for antonym in lemma.antonyms():
                other = antonym.name().lower()
                if "_" in other or other == word:
                    continue
                listed = antonyms.setdefault(word, [])
                if other not in listed:
                    listed.append(other)
    with open(path, "w", encoding="utf-8") as f:
        f.write("# word\tantonym1,antonym2,...\n")
        for word in sorted(antonyms):
            f.write(f"{word}\t{','.join(antonyms[word])}\n")
    return len(antonyms)


def main():
    parser = argparse.ArgumentParser(description="Export SentiWordNet / WordNet lexical resources")
    parser.add_argument("--out-dir", default="config")
    parser.add_argument("--download", action="store_true", help="fetch the nltk corpora first")
    args = parser.parse_args()

    if args.download:
        for corpus in ("wordnet", "sentiwordnet", "omw-1.4"):
            nltk.download(corpus, quiet=True)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = export_lexicon(out / "sentiwordnet_lexicon.tsv")
    words = export_antonyms(out / "wordnet_antonyms.tsv")
    print(f"lexicon rows: {rows}, words with antonyms: {words} -> {out}")


if __name__ == "__main__":
    main()

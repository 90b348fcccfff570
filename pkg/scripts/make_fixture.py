"""Regenerate the bundled fixture dataset and vocabulary.

    python scripts/make_fixture.py

Writes src/fidfilter/data/{fixture.jsonl,vocab.txt}. Output is deterministic.
"""
import json
import random
from collections import Counter
from pathlib import Path

from fidfilter.tokenizer import Tokenizer

DATA = Path(__file__).resolve().parents[1] / "src" / "fidfilter" / "data"
VOCAB_WORDS = 512 - 3 - 256

FACTS = [
    ("why is the sky blue", "sky", "sunlight is scattered by air molecules and blue light is scattered more than red light",
     "blue light scatters more in the air"),
    ("how do plants make food", "photosynthesis", "plants use sunlight water and carbon dioxide to make sugar in their leaves",
     "plants use sunlight to turn water and carbon dioxide into sugar"),
    ("why do we have seasons", "seasons", "the earth is tilted so each half gets more direct sunlight for part of the year",
     "the tilt of the earth changes how much sunlight each half gets"),
    ("how does a rainbow form", "rainbow", "light bends inside rain drops and splits into many colors",
     "rain drops bend and split light into colors"),
    ("why does ice float on water", "ice", "water expands when it freezes so ice is less dense than liquid water",
     "ice is less dense than water because water expands when it freezes"),
    ("how do bees make honey", "honey", "bees collect nectar from flowers and store it in the hive where water evaporates",
     "bees store flower nectar in the hive until it thickens"),
    ("why do cats purr", "cats", "cats purr by moving muscles in the throat often when they are calm or healing",
     "cats move throat muscles to purr when calm"),
    ("how does the moon cause tides", "tides", "the pull of the moon on the ocean makes the water rise on the near and far side",
     "the moon pulls on the ocean and makes the water rise"),
    ("why do leaves change color", "leaves", "in autumn trees stop making green pigment so yellow and red colors show",
     "trees stop making green pigment in autumn"),
    ("how do birds fly", "birds", "wings push air down and the shape of the wing makes lift as the bird moves forward",
     "wings push air down and make lift"),
]

DISTRACTORS = [
    ("city", "the old city has a large market near the river and many small streets"),
    ("music", "people play music with many instruments such as the drum and the piano"),
    ("history", "the king built a stone castle on the hill many years ago"),
    ("sport", "the team won the game after a long season of hard training"),
    ("food", "bread is made from flour water salt and yeast and baked in an oven"),
    ("travel", "the train leaves the station early in the morning and arrives at night"),
    ("ocean", "fish swim in large groups near the coral reef in warm water"),
    ("computer", "a computer stores data in memory and runs programs very fast"),
]


def main():
    rng = random.Random(0)
    rows = []
    for q, title, gold, answer in FACTS:
        distract = rng.sample(DISTRACTORS, 3)
        passages = [{"title": title, "text": gold, "is_gold": True}]
        passages += [{"title": t, "text": c, "is_gold": False} for t, c in distract]
        rng.shuffle(passages)
        rows.append({"question": q, "passages": passages, "answer": answer})

    counts = Counter()
    for r in rows:
        for w in (r["question"] + " " + r["answer"]).split():
            counts[w] += 1
        for p in r["passages"]:
            counts.update(f"{p['title']} {p['text']}".split())
    words = ["question:", "title:", "context:"] + [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    words = list(dict.fromkeys(words))
    filler = 0
    while len(words) < VOCAB_WORDS:
        words.append(f"w{filler:03d}")
        filler += 1
    words = words[:VOCAB_WORDS]
    DATA.mkdir(parents=True, exist_ok=True)
    Tokenizer(words).save(DATA / "vocab.txt")
    with open(DATA / "fixture.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    print(f"{len(rows)} queries, {len(words)} vocab words")


if __name__ == "__main__":
    main()

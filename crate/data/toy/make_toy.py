"""Regenerates the toy corpus and STS-style pair files in this directory."""

import random
from pathlib import Path

SUBJECTS = ["man", "woman", "child", "dog", "cat", "boy", "girl", "chef", "farmer", "teacher", "bird", "horse",
            "baby", "student", "doctor", "player", "monkey", "rabbit"]
VERBS = ["playing", "eating", "cutting", "reading", "riding", "cooking", "watching",
         "carrying", "painting", "cleaning", "holding", "chasing", "throwing", "washing",
         "buying", "selling", "kicking", "drawing"]
OBJECTS = ["guitar", "apple", "onion", "book", "bike", "soup", "movie", "box", "picture",
           "ball", "fish", "bread", "flower", "car", "kite", "cake", "letter", "hat", "drum",
           "phone", "rope", "tomato", "carrot", "window"]
ADJECTIVES = ["small", "young", "old", "happy", "red", "big", "tall", "tired", "little", "busy"]
PLACES = ["in the park", "on the street", "at home", "near the river", "in the garden",
          "at school", "on the beach", "in the kitchen", "under the tree", "by the lake"]
DETS = ["a", "the"]


def draw(rng):
    return {
        "det": rng.choice(DETS),
        "adj": rng.choice(ADJECTIVES + [""] * 3),
        "subj": rng.choice(SUBJECTS),
        "verb": rng.choice(VERBS),
        "odet": rng.choice(DETS),
        "obj": rng.choice(OBJECTS),
        "place": rng.choice(PLACES + [""] * 4),
    }


def render(s):
    words = [s["det"]]
    if s["adj"]:
        words.append(s["adj"])
    words += [s["subj"], "is", s["verb"], s["odet"], s["obj"]]
    if s["place"]:
        words.append(s["place"])
    return " ".join(words) + " ."


CORE = [("subj", SUBJECTS), ("verb", VERBS), ("obj", OBJECTS)]


def pair(rng):
    a = draw(rng)
    b = dict(a)
    changes = rng.choice([0, 0, 1, 1, 2, 3])
    for slot, pool in rng.sample(CORE, changes):
        b[slot] = rng.choice([x for x in pool if x != a[slot]])
    # cosmetic edits barely move the score
    cosmetic = 0
    if rng.random() < 0.5:
        b["adj"] = rng.choice(ADJECTIVES + [""])
        cosmetic += b["adj"] != a["adj"]
    if rng.random() < 0.5:
        b["place"] = rng.choice(PLACES + [""])
        cosmetic += b["place"] != a["place"]
    gold = 5.0 - 1.5 * changes - 0.25 * cosmetic + rng.uniform(-0.2, 0.2)
    gold = round(min(5.0, max(0.0, gold)), 2)
    return gold, render(a), render(b)


def main():
    here = Path(__file__).parent
    rng = random.Random(20240521)
    sentences = []
    seen = set()
    while len(sentences) < 200:
        s = render(draw(rng))
        if s not in seen:
            seen.add(s)
            sentences.append(s)
    (here / "corpus.txt").write_text("\n".join(sentences) + "\n")
    for name, n in [("dev.tsv", 40), ("test.tsv", 60)]:
        rows = [pair(rng) for _ in range(n)]
        (here / name).write_text("".join(f"{g}\t{a}\t{b}\n" for g, a, b in rows))


if __name__ == "__main__":
    main()

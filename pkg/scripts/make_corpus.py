#!/usr/bin/env python3
"""Regenerate the bundled byte-level corpus (data/corpus.txt).

Synthetic field-journal documents from a seeded template grammar. Each
document fixes a protagonist, a home place, and a small color/object palette
that recur throughout, so remembering far-away context genuinely helps
next-byte prediction; sentence-level choices keep the entropy non-trivial.
Documents are separated by blank lines (the corpus reader's convention).
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

NAMES = [
    "Mara", "Teodor", "Ines", "Rowan", "Selma", "Dario", "Petra", "Anselm",
    "Noor", "Casimir", "Odile", "Bram", "Yuki", "Lorenz", "Sable", "Ferd",
    "Greta", "Holst", "Imre", "Juna", "Kaspar", "Liv", "Matteo", "Nadia",
]
PLACES = [
    "harbor", "orchard", "mill", "lighthouse", "quarry", "meadow", "station",
    "granary", "bridge", "cloister", "market", "boathouse", "kiln", "weir",
    "signal tower", "salt flat",
]
OBJECTS = [
    "lantern", "ledger", "compass", "kettle", "spool", "anchor", "bellows",
    "barometer", "sextant", "whetstone", "hourglass", "padlock", "telescope",
    "tuning fork", "ink bottle", "rope coil", "grindstone", "weather vane",
    "signal flag", "carriage clock",
]
COLORS = [
    "amber", "slate", "crimson", "ochre", "viridian", "ivory", "cobalt",
    "umber", "silver", "moss green", "charcoal", "pale gold",
]
TIMES = ["dawn", "noon", "dusk", "midnight", "first light", "high tide",
         "low tide", "the evening bell"]
WEATHER = ["fog", "drizzle", "a north wind", "still air", "sleet", "haze",
           "warm rain", "frost"]

TEMPLATES = [
    "{name} walked to the {place} at {time}.",
    "The {object} by the {place} looked {color} under {weather}.",
    "{name} noted {number} crates beside the {object}.",
    "At {time}, {name} checked the {object} twice.",
    "{weather} settled over the {place} before {time}.",
    "{name} traded a {color} {object} for {number} candles.",
    "The ledger says the {place} held {number} barrels.",
    "{name} repaired the {object} and painted it {color}.",
    "Nothing moved near the {place} except {weather}.",
    "{name} measured the {object} again: {number} marks.",
    "By {time} the {place} smelled of tar and {weather}.",
    "A {color} ribbon marked the path from the {place}.",
]


def make_document(rng: np.random.Generator, min_bytes: int, max_bytes: int) -> str:
    name = NAMES[rng.integers(len(NAMES))]
    home = PLACES[rng.integers(len(PLACES))]
    palette = list(rng.choice(COLORS, size=3, replace=False))
    kit = list(rng.choice(OBJECTS, size=4, replace=False))
    target = int(rng.integers(min_bytes, max_bytes))

    header = f"Journal of {name}, keeper of the {home}.\n"
    parts = [header]
    length = len(header)
    sentences_in_par = 0
    while length < target:
        template = TEMPLATES[rng.integers(len(TEMPLATES))]
        sentence = template.format(
            name=name,
            place=home if rng.random() < 0.6 else PLACES[rng.integers(len(PLACES))],
            object=kit[rng.integers(len(kit))],
            color=palette[rng.integers(len(palette))],
            time=TIMES[rng.integers(len(TIMES))],
            weather=WEATHER[rng.integers(len(WEATHER))],
            number=int(rng.integers(2, 60)),
        )
        parts.append(sentence + " ")
        length += len(sentence) + 1
        sentences_in_par += 1
        if sentences_in_par >= int(rng.integers(4, 9)):
            parts.append("\n")
            sentences_in_par = 0
            length += 1
    parts.append(f"Signed, {name}.")
    return "".join(parts)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).parent.parent / "data" / "corpus.txt"))
    ap.add_argument("--seed", type=int, default=20240901)
    ap.add_argument("--docs", type=int, default=640)
    ap.add_argument("--min-bytes", type=int, default=1600)
    ap.add_argument("--max-bytes", type=int, default=3200)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    docs = [make_document(rng, args.min_bytes, args.max_bytes)
            for _ in range(args.docs)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n\n".join(docs) + "\n", encoding="utf-8")
    total = sum(len(d) for d in docs)
    print(f"wrote {len(docs)} documents, {total} bytes -> {out}")


if __name__ == "__main__":
    main()

"""Synthetic intent/slot corpus generator.

Produces a small template-based corpus in the same three-file layout as the
public datasets, with multi-token slot values so chunk metrics and the
uncoordinated-slot analysis have something to bite on. Used by the test
suite and the README quickstart; not a stand-in for the real corpora.
"""

from __future__ import annotations

from pathlib import Path
from random import Random

CITIES = [
    "boston", "denver", "seattle", "austin", "atlanta", "oakland", "memphis",
    "tampa", "san francisco", "new york", "salt lake city", "las vegas",
]
DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday",
        "sunday", "today", "tomorrow"]
TIMES = ["5 am", "noon", "7 pm", "half past nine", "9 in the morning", "midnight"]
AIRLINES = ["delta", "united", "american airlines", "alaska airlines"]
ARTISTS = ["taylor swift", "miles davis", "the rolling stones", "adele",
           "daft punk", "johnny cash"]
GENRES = ["jazz", "rock", "classical", "hip hop", "country"]
DISHES = ["pad thai", "cheese pizza", "sushi", "butter chicken", "greek salad"]
COUNTS = ["two", "three", "four", "five", "six"]
CONDITIONS = ["rain", "snow", "wind"]

# A template is (intent, parts); a part is a literal phrase (tagged O) or a
# (slot_type, choices) pair whose sampled value becomes one B-/I- chunk.
TEMPLATES = [
    ("find_flight", ["show me flights from", ("from_city", CITIES), "to", ("to_city", CITIES)]),
    ("find_flight", ["i need a", ("airline", AIRLINES), "flight to", ("to_city", CITIES),
                     "on", ("day", DAYS)]),
    ("find_flight", ["book a flight from", ("from_city", CITIES), "to", ("to_city", CITIES),
                     "leaving at", ("time", TIMES)]),
    ("get_weather", ["what is the weather in", ("city", CITIES), ("day", DAYS)]),
    ("get_weather", ["will it", ("condition", CONDITIONS), "in", ("city", CITIES),
                     "on", ("day", DAYS)]),
    ("play_music", ["play some", ("genre", GENRES), "music"]),
    ("play_music", ["play", ("artist", ARTISTS), "for me"]),
    ("play_music", ["put on", ("genre", GENRES), "by", ("artist", ARTISTS)]),
    ("book_restaurant", ["book a table for", ("count", COUNTS), "people in",
                         ("city", CITIES), "at", ("time", TIMES)]),
    ("set_alarm", ["set an alarm for", ("time", TIMES), "on", ("day", DAYS)]),
    ("cancel_alarm", ["cancel my", ("day", DAYS), "alarm"]),
    ("add_to_list", ["add", ("dish", DISHES), "to my shopping list"]),
    ("add_to_list", ["put", ("count", COUNTS), ("dish", DISHES), "on the list"]),
]


def sample_utterance(rng: Random) -> tuple[list[str], list[str], str]:
    intent, parts = rng.choice(TEMPLATES)
    tokens: list[str] = []
    tags: list[str] = []
    for part in parts:
        if isinstance(part, str):
            words = part.split()
            tokens.extend(words)
            tags.extend(["O"] * len(words))
        else:
            slot_type, choices = part
            words = rng.choice(choices).split()
            tokens.extend(words)
            tags.append(f"B-{slot_type}")
            tags.extend(f"I-{slot_type}" for _ in words[1:])
    return tokens, tags, intent


def _write_split(split_dir: Path, rows: list[tuple[list[str], list[str], str]]) -> None:
    split_dir.mkdir(parents=True, exist_ok=True)
    (split_dir / "seq.in").write_text(
        "".join(" ".join(t) + "\n" for t, _, _ in rows), encoding="utf-8"
    )
    (split_dir / "seq.out").write_text(
        "".join(" ".join(s) + "\n" for _, s, _ in rows), encoding="utf-8"
    )
    (split_dir / "label").write_text(
        "".join(i + "\n" for _, _, i in rows), encoding="utf-8"
    )


def generate_corpus(
    out_dir: str | Path,
    n_train: int = 2000,
    n_valid: int = 300,
    n_test: int = 300,
    seed: int = 0,
) -> dict:
    """Write train/valid/test splits under out_dir; returns size stats."""
    out_dir = Path(out_dir)
    rng = Random(seed)
    sizes = {"train": n_train, "valid": n_valid, "test": n_test}
    for split, n in sizes.items():
        _write_split(out_dir / split, [sample_utterance(rng) for _ in range(n)])
    return {"out_dir": str(out_dir), **sizes}

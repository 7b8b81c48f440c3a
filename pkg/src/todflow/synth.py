"""Synthetic desk-scale corpora: pre-training dialogs, intent sets, e2e tasks.

Everything here is template-generated with a seeded RNG so runs are
reproducible.  The pre-training dialogs map each context to exactly one
response, which makes them suitable for overfit-style training checks.  The
end-to-end corpus pairs a small two-domain entity database with goals whose
optimal policy is to name the matching entity and echo a placeholder for
every requested slot.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from .metrics import slot_placeholder

FOODS = ("indian", "italian", "chinese", "thai", "mexican")
AREAS = ("north", "south", "east", "west", "centre")
STARS = ("two", "three", "four", "five")
REQUESTABLE = ("phone", "address", "postcode")

_INTENTS = {
    "book_table": ("restaurant", "table", "dinner", "menu", "cuisine"),
    "find_hotel": ("hotel", "room", "stay", "suite", "lodging"),
    "get_weather": ("weather", "rain", "sunny", "forecast", "temperature"),
}

_FILLER = (
    "hi there could you help me",
    "good afternoon i am after some help",
    "hello i hope you can assist",
    "hey i still need some help today",
    "greetings please point me somewhere",
)

_TAIL = (
    "that would be great thanks",
    "i would appreciate it",
    "please let me know",
    "thanks so much",
)


def _entity_name(food: str, area: str) -> str:
    return f"{food}_{area}_house"


# ---------------------------------------------------------------------------
# Pre-training corpus
# ---------------------------------------------------------------------------


def make_pretrain_dialogs(
    n_dialogs: int,
    seed: int = 0,
    foods: tuple = FOODS,
    areas: tuple = AREAS,
    stars: tuple = STARS,
) -> list[dict]:
    """Labeled two-domain dialogs; every context determines a unique response.

    Alternates restaurant and hotel dialogs (an empty ``stars`` drops the
    hotel domain); most dialogs append a request pair answered with
    delexicalized ``value_<slot>`` placeholders, so the pre-training
    vocabulary covers the downstream generation targets.
    """
    rng = random.Random(seed)
    rest_combos = [(f, a) for f in foods for a in areas]
    hotel_combos = [(s, a) for s in stars for a in areas]
    rng.shuffle(rest_combos)
    rng.shuffle(hotel_combos)
    records = []
    used = {"restaurant": 0, "hotel": 0}
    for i in range(n_dialogs):
        if i % 2 == 0 or not hotel_combos:
            food, area = rest_combos[used["restaurant"] % len(rest_combos)]
            used["restaurant"] += 1
            name = _entity_name(food, area)
            query = f"i want a {food} restaurant in the {area} for dinner"
            query_slots = [{"slot": "food", "value": food},
                           {"slot": "area", "value": area}]
            offer = f"{name} is a nice {food} restaurant in the {area}"
            domain = "restaurant"
            req_slot = "phone"
        else:
            star, area = hotel_combos[used["hotel"] % len(hotel_combos)]
            used["hotel"] += 1
            name = _hotel_name(star, area)
            query = f"i need a {star} star hotel room in the {area} to stay"
            query_slots = [{"slot": "stars", "value": star},
                           {"slot": "area", "value": area}]
            offer = f"{name} is a lovely {star} star hotel in the {area}"
            domain = "hotel"
            req_slot = ("address", "postcode")[i % 4 == 3]
        turns = [
            {
                "speaker": "user",
                "text": query,
                "annotations": [
                    {"domain": domain, "intent": "inform", "slots": query_slots}
                ],
            },
            {
                "speaker": "system",
                "text": offer,
                "annotations": [
                    {
                        "domain": domain,
                        "intent": "recommend",
                        "slots": [{"slot": "name", "value": name}],
                    }
                ],
            },
        ]
        if i % 3 != 0:  # extend most dialogs with a request pair
            placeholder = slot_placeholder(req_slot)
            turns += [
                {
                    "speaker": "user",
                    "text": f"great please give me the {req_slot} of it",
                    "annotations": [
                        {
                            "domain": domain,
                            "intent": "request",
                            "slots": [{"slot": req_slot, "value": None}],
                        }
                    ],
                },
                {
                    "speaker": "system",
                    "text": f"the {req_slot} of {name} is {placeholder} .",
                    "annotations": [
                        {
                            "domain": domain,
                            "intent": "inform",
                            "slots": [{"slot": req_slot, "value": placeholder}],
                        }
                    ],
                },
            ]
        records.append({"dialog_id": f"synth-{i:04d}", "turns": turns})
    return records


def make_unlabeled_dialogs(n_dialogs: int, seed: int = 0) -> list[dict]:
    """Small-talk dialogs without annotations.

    The reply pool deliberately touches the intent-task vocabulary (weather,
    booking, lodging) plus the shared filler phrases; templates are cycled,
    not sampled, so a corpus of a few dozen dialogs covers every template and
    a vocabulary built over both corpora covers the classification texts.
    """
    rng = random.Random(seed)
    openers = (
        "hello how are you doing today",
        "good morning nice to see you again",
        "hey long time no talk my friend",
        "hi what have you been up to lately",
    ) + _FILLER
    replies = (
        "i am doing quite well thank you for asking",
        "pretty good overall just a little busy these days",
        "the weather is sunny today but the forecast says rain this afternoon",
        "the temperature dropped after lunch so i stayed in my room",
        "we booked a table for dinner and really loved the menu and the cuisine",
        "i found a quiet suite for the stay , lovely lodging overall",
        "everything is fine here thanks for checking in",
    ) + _TAIL
    records = []
    for i in range(n_dialogs):
        records.append(
            {
                "dialog_id": f"chat-{i:04d}",
                "turns": [
                    {"speaker": "user", "text": openers[i % len(openers)]},
                    {"speaker": "system", "text": replies[i % len(replies)]},
                ],
            }
        )
    rng.shuffle(records)
    return records


def write_jsonl(records: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Intent corpus
# ---------------------------------------------------------------------------


def make_intent_examples(n: int, seed: int = 0) -> list[dict]:
    """Keyword-separable three-intent utterances padded with shared filler.

    Keywords rotate round-robin within each class so every keyword gets even
    coverage; only the filler context is sampled.
    """
    rng = random.Random(seed)
    labels = sorted(_INTENTS)
    per_class_count = {label: 0 for label in labels}
    records = []
    for i in range(n):
        label = labels[i % len(labels)]
        pool = _INTENTS[label]
        keyword = pool[per_class_count[label] % len(pool)]
        per_class_count[label] += 1
        text = f"{rng.choice(_FILLER)} i really need the {keyword} {rng.choice(_TAIL)}"
        records.append({"text": text, "label": label})
    return records


# ---------------------------------------------------------------------------
# End-to-end corpus
# ---------------------------------------------------------------------------


def _hotel_name(stars: str, area: str) -> str:
    return f"{stars}_star_{area}_lodge"


def make_database(
    foods: tuple = FOODS, areas: tuple = AREAS, stars: tuple = STARS
) -> list[dict]:
    entities = []
    for food in foods:
        for area in areas:
            entities.append(
                {"name": _entity_name(food, area), "food": food, "area": area}
            )
    for star in stars:
        for area in areas:
            entities.append(
                {"name": _hotel_name(star, area), "stars": star, "area": area}
            )
    return entities


def make_e2e_dataset(
    n_dialogs: int,
    seed: int = 0,
    foods: tuple = FOODS,
    areas: tuple = AREAS,
    stars: tuple = STARS,
) -> dict:
    """Goal-driven two-domain dialogs with delexicalized responses.

    The user states two constraints and requests one or two slots; the gold
    response names the matching entity and emits the placeholder for every
    requested slot, so a policy that copies the request achieves full success.
    Narrowing ``foods``/``areas``/``stars`` shrinks the entity pool (an empty
    ``stars`` drops the hotel domain entirely).
    """
    rng = random.Random(seed)
    database = make_database(foods, areas, stars)
    dialogs = []
    for i in range(n_dialogs):
        area = rng.choice(areas)
        if i % 2 == 0 or not stars:
            food = rng.choice(foods)
            name = _entity_name(food, area)
            constraints = {"food": food, "area": area}
            query = f"i need a {food} restaurant in the {area}"
            offer = f"{name} is a {food} restaurant in the {area}"
        else:
            star = rng.choice(stars)
            name = _hotel_name(star, area)
            constraints = {"stars": star, "area": area}
            query = f"i need a {star} star hotel in the {area}"
            offer = f"{name} is a {star} star hotel in the {area}"
        requested = rng.sample(REQUESTABLE, rng.choice((1, 2)))
        req_text = " and the ".join(requested)
        answer = " and ".join(
            f"the {slot} is {slot_placeholder(slot)}" for slot in requested
        )
        dialogs.append(
            {
                "dialog_id": f"e2e-{i:04d}",
                "turns": [
                    {
                        "speaker": "user",
                        "text": f"{query} please give me the {req_text}",
                    },
                    {
                        "speaker": "system",
                        "text": f"{offer} . {answer}",
                    },
                ],
                "goal": {
                    "constraints": constraints,
                    "requested": sorted(requested),
                },
            }
        )
    return {"database": database, "dialogs": dialogs}


def write_e2e_dataset(dataset: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset, fh, indent=2)
        fh.write("\n")

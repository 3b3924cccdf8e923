#!/usr/bin/env python3
"""Generate the bundled sample corpus: short children's stories built from a
small seeded grammar. The output is original text released to the public
domain, so it can ship with the repository for smoke tests.

    python3 tools/make_sample_corpus.py --bytes 200000 --seed 7 > data/sample_corpus.txt
"""
import argparse
import random

NAMES = ["Lily", "Tom", "Mia", "Ben", "Sara", "Max", "Anna", "Sam", "Lucy", "Jack",
         "Emma", "Leo", "Zoe", "Finn", "Ruby", "Noah"]
ANIMALS = ["cat", "dog", "bird", "frog", "bunny", "duck", "fox", "bear", "mouse", "owl"]
PLACES = ["park", "garden", "forest", "beach", "farm", "river", "hill", "kitchen",
          "school", "meadow"]
THINGS = ["ball", "kite", "box", "hat", "book", "cake", "toy car", "red cup", "blue boat",
          "little drum", "shiny stone", "big apple"]
ADJ = ["happy", "sad", "small", "big", "kind", "brave", "shy", "silly", "quiet", "curious"]
WEATHER = ["sunny", "rainy", "windy", "cold", "warm", "bright"]
FEEL = ["happy", "scared", "proud", "tired", "excited", "sorry", "glad", "surprised"]
VERBS = ["play", "run", "jump", "sing", "dance", "read", "hide", "swim", "draw", "build"]

OPENERS = [
    "Once upon a time, there was a {adj} {animal} named {name}.",
    "One {weather} day, {name} went to the {place}.",
    "There was a {adj} girl named {name}. She loved to {verb}.",
    "There was a {adj} boy named {name}. He liked to {verb} every day.",
    "Once, in a little house near the {place}, lived a {animal} called {name}.",
]
MIDDLES = [
    "{name} found a {thing} under a tree.",
    "{name} wanted to {verb} with the {thing}, but it was too high.",
    "The {animal} saw {name} and said, \"Can I {verb} with you?\"",
    "{name} said, \"Let's go to the {place} and {verb}!\"",
    "It was {weather} outside, so {name} took the {thing}.",
    "Suddenly, the {thing} fell into the {place2}.",
    "{name} felt {feel} and did not know what to do.",
    "A {adj} {animal} came to help.",
    "They looked for the {thing} all over the {place}.",
    "{name}'s mom said, \"Be careful and share with your friends.\"",
    "The {animal} was {feel} because it lost its {thing}.",
    "{name} and the {animal} tried to {verb} together.",
]
ENDINGS = [
    "In the end, {name} and the {animal} became best friends.",
    "{name} learned that sharing makes everyone {feel}.",
    "They went home and had a big {thing} for dinner. The end.",
    "From that day on, {name} always took care of the {thing}.",
    "{name} smiled and said, \"Thank you!\" Everyone was {feel}.",
    "At night, {name} slept and dreamed about the {place}.",
]


def fill(template, rng, cast):
    return template.format(
        name=cast["name"], animal=cast["animal"], place=cast["place"],
        place2=rng.choice(PLACES), thing=cast["thing"], adj=rng.choice(ADJ),
        weather=rng.choice(WEATHER), feel=rng.choice(FEEL), verb=rng.choice(VERBS))


def story(rng):
    cast = {"name": rng.choice(NAMES), "animal": rng.choice(ANIMALS),
            "place": rng.choice(PLACES), "thing": rng.choice(THINGS)}
    lines = [fill(rng.choice(OPENERS), rng, cast)]
    for _ in range(rng.randint(3, 7)):
        lines.append(fill(rng.choice(MIDDLES), rng, cast))
    lines.append(fill(rng.choice(ENDINGS), rng, cast))
    return " ".join(lines)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--bytes", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    out, size = [], 0
    while size < args.bytes:
        s = story(rng)
        out.append(s)
        size += len(s) + 2
    print("\n\n".join(out))


if __name__ == "__main__":
    main()

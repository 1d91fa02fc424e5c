"""Seeded synthetic English-like corpus for desk-scale runs.

Sentences come from a small set of grammar templates with topic-conditioned,
Zipf-weighted word choice, so the stream has learnable local structure (an
autoregressive model beats the unigram baseline by a wide margin) and a closed
vocabulary comfortably under 512 types.
"""

import numpy as np

DETERMINERS = ["the", "a", "this", "that", "each", "every", "some", "another", "no", "any"]

SHARED_ADJECTIVES = [
    "old", "new", "small", "large", "quiet", "bright", "dark", "heavy", "light", "warm",
    "cold", "strange", "familiar", "distant", "near", "steady", "slow", "rapid", "gentle",
    "rough", "clear", "pale", "deep", "narrow", "wide", "early", "late", "long", "short",
    "hidden", "open", "broken", "simple", "strong", "faint", "fresh", "dry", "wet", "sharp",
]

TOPICS = {
    "nature": {
        "nouns": ["river", "mountain", "forest", "valley", "stone", "cloud", "storm",
                  "meadow", "bird", "wolf", "deer", "branch", "leaf", "shore", "island",
                  "snow", "rain", "wind", "dawn", "dusk", "path", "cliff", "lake", "field",
                  "root", "seed", "garden", "harvest", "trail", "ridge"],
        "verbs_i": ["flowed", "drifted", "settled", "faded", "brightened", "froze",
                    "bloomed", "wandered", "rested", "stirred"],
        "verbs_t": ["crossed", "covered", "followed", "reached", "touched", "shadowed",
                    "circled", "carried", "buried", "fed"],
        "adjs": ["green", "wild", "silent", "frozen", "misty", "golden", "mossy", "windy"],
    },
    "machines": {
        "nouns": ["engine", "signal", "circuit", "valve", "sensor", "motor", "gear",
                  "cable", "battery", "switch", "panel", "pump", "filter", "antenna",
                  "rotor", "piston", "frame", "dial", "lever", "beacon", "chassis", "relay",
                  "turbine", "conduit", "gauge", "socket", "spring", "bearing", "bracket",
                  "manifold"],
        "verbs_i": ["hummed", "spun", "stalled", "vibrated", "overheated", "idled",
                    "sparked", "clicked", "whirred", "failed"],
        "verbs_t": ["powered", "measured", "triggered", "adjusted", "repaired", "ignited",
                    "connected", "regulated", "calibrated", "assembled"],
        "adjs": ["rusty", "precise", "electric", "automatic", "spare", "worn", "sealed",
                 "loud"],
    },
    "market": {
        "nouns": ["merchant", "trader", "price", "cargo", "harbor", "contract", "coin",
                  "ledger", "caravan", "warehouse", "customer", "bargain", "profit", "debt",
                  "shipment", "stall", "auction", "tax", "route", "guild", "invoice",
                  "broker", "wagon", "crate", "receipt", "tariff", "vendor", "market",
                  "dockside", "granary"],
        "verbs_i": ["prospered", "haggled", "waited", "traveled", "declined", "recovered",
                    "negotiated", "profited", "bartered", "arrived"],
        "verbs_t": ["sold", "bought", "weighed", "shipped", "counted", "promised",
                    "delivered", "inspected", "taxed", "stored"],
        "adjs": ["wealthy", "foreign", "busy", "honest", "costly", "cheap", "rare",
                 "crowded"],
    },
    "music": {
        "nouns": ["song", "melody", "drum", "violin", "chorus", "singer", "rhythm",
                  "theater", "audience", "flute", "harp", "note", "verse", "dancer",
                  "trumpet", "ballad", "concert", "stage", "echo", "silence", "tune",
                  "chord", "refrain", "tempo", "orchestra", "bell", "anthem", "duet",
                  "lyric", "cadence"],
        "verbs_i": ["played", "echoed", "swelled", "softened", "paused", "resonated",
                    "hushed", "soared", "lingered", "ended"],
        "verbs_t": ["sang", "composed", "rehearsed", "performed", "conducted", "tuned",
                    "recorded", "repeated", "praised", "remembered"],
        "adjs": ["gentle", "solemn", "joyful", "minor", "ancient", "festive", "mournful",
                 "sweet"],
    },
}

ADVERBS = ["slowly", "quietly", "suddenly", "carefully", "often", "rarely", "finally",
           "barely", "quickly", "gladly", "almost", "again", "together", "alone",
           "everywhere", "nowhere"]

PREPOSITIONS = ["under", "over", "near", "through", "beyond", "behind", "beside",
                "across", "within", "around", "toward", "against", "before", "after"]

OPENERS = ["meanwhile", "afterward", "yesterday", "tonight", "soon", "once", "then",
           "later", "eventually", "sometimes"]

CONNECTIVES = ["and", "but", "while", "because", "until", "although", "so", "yet"]


def _zipf_weights(k: int, a: float = 0.8) -> np.ndarray:
    w = 1.0 / np.arange(1, k + 1) ** a
    return w / w.sum()


class _SentenceSampler:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def pick(self, items):
        return items[self.rng.choice(len(items), p=_zipf_weights(len(items)))]

    def noun_phrase(self, topic):
        words = [self.pick(DETERMINERS)]
        if self.rng.random() < 0.45:
            pool = TOPICS[topic]["adjs"] if self.rng.random() < 0.5 else SHARED_ADJECTIVES
            words.append(self.pick(pool))
        words.append(self.pick(TOPICS[topic]["nouns"]))
        return words

    def clause(self, topic):
        t = TOPICS[topic]
        words = self.noun_phrase(topic)
        if self.rng.random() < 0.5:
            words.append(self.pick(t["verbs_t"]))
            words += self.noun_phrase(topic)
        else:
            words.append(self.pick(t["verbs_i"]))
        if self.rng.random() < 0.35:
            words.append(self.pick(ADVERBS))
        if self.rng.random() < 0.4:
            words.append(self.pick(PREPOSITIONS))
            words += self.noun_phrase(topic)
        return words

    def sentence(self, topic):
        words = []
        if self.rng.random() < 0.2:
            words += [self.pick(OPENERS), ","]
        words += self.clause(topic)
        if self.rng.random() < 0.3:
            words += [self.pick(CONNECTIVES)] if self.rng.random() < 0.5 \
                else [",", self.pick(CONNECTIVES)]
            words += self.clause(topic)
        words.append("." if self.rng.random() < 0.9 else ";")
        return words


def vocabulary() -> set[str]:
    words = set(DETERMINERS) | set(SHARED_ADJECTIVES) | set(ADVERBS) | set(PREPOSITIONS)
    words |= set(OPENERS) | set(CONNECTIVES) | {".", ",", ";"}
    for topic in TOPICS.values():
        for key in ("nouns", "verbs_i", "verbs_t", "adjs"):
            words |= set(topic[key])
    return words


def generate_corpus(num_tokens: int, seed: int = 0) -> str:
    """Roughly num_tokens word/punctuation tokens of topic-structured text."""
    rng = np.random.default_rng(seed)
    sampler = _SentenceSampler(rng)
    topics = list(TOPICS)
    paragraphs = []
    count = 0
    while count < num_tokens:
        topic = topics[rng.integers(len(topics))]
        sentences = []
        for _ in range(rng.integers(3, 9)):
            words = sampler.sentence(topic)
            count += len(words)
            sentences.append(" ".join(words))
        paragraphs.append(" ".join(sentences))
    return "\n".join(paragraphs) + "\n"

"""Average phonetic distance between a test set and a speaker's phone inventory.

Uses a hand-made 3-d embedding table so the numbers can be checked by eye:
phones close to something the speaker already has contribute little, and
unseen sounds far from everything contribute a lot.

    python demos/phone_distance.py
"""

import numpy as np

from polyglot_tts.analysis import avg_phone_dist, phone_distribution
from polyglot_tts.phones import default_rule_table, parse_unified

rules = default_rule_table()
table = {
    "a": np.array([1.0, 0.0, 0.0]),
    "e": np.array([0.9, 0.1, 0.0]),
    "i": np.array([0.7, 0.3, 0.0]),
    "t": np.array([0.0, 1.0, 0.0]),
    "s": np.array([0.0, 0.8, 0.2]),
    "T": np.array([0.0, 0.6, 0.8]),
    "x": np.array([0.0, 0.0, 1.0]),
}

test_set = [parse_unified(s, rules) for s in ('t "a s a', 'T "e s', '"i x a')]
spanish_like = {"a", "e", "i", "t", "s", "T", "x"}
english_like = {"a", "e", "i", "t", "s"}

for uniform in (False, True):
    probs = phone_distribution(test_set, rules, uniform=uniform)
    label = "uniform P(t)" if uniform else "frequency P(t)"
    print(label)
    for name, speaker in (("covers every test phone", spanish_like),
                          ("lacks T and x", english_like)):
        print(f"  speaker that {name}: {avg_phone_dist(probs, speaker, table):.4f}")

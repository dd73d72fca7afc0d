"""A simulated listening test run through the MOS analysis.

Three systems are rated on four voices by twelve listeners. One system is
made genuinely better on two voices; the report should say so and call
everything else equal.

    python demos/mos_analysis.py
"""

import numpy as np

from polyglot_tts import analysis as A

rng = np.random.default_rng(1)
listeners = [f"L{i:02d}" for i in range(12)]
harshness = {s: rng.normal(0, 0.4) for s in listeners}
boost = {("finetuned", "v1"): 0.8, ("finetuned", "v2"): 0.8}

records = []
for voice in ("v1", "v2", "v3", "v4"):
    for system in ("seed", "finetuned", "extended"):
        for k in range(60):
            who = listeners[k % len(listeners)]
            raw = 3.4 + harshness[who] + boost.get((system, voice), 0.0) + rng.normal(0, 0.8)
            records.append(A.RatingRecord(who, f"{voice}-{k}", system, voice,
                                          int(np.clip(round(raw), 1, 5))))

scored = A.zscore_by_subject(records)
per_voice = A.contrasts_by_voice(scored)
summary = A.significance_summary(per_voice, reference="seed")
print("systems compared with 'seed', counted over voices:")
print(summary.table())
print()
print("per voice:")
print(summary.voice_table())

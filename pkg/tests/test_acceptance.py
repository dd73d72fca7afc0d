"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary repeats at the
end of the run. Criteria 6 to 8 share one toy seed-training run driven
through the command line; it takes roughly half an hour on one CPU core.

Run just this suite with ``pytest tests/test_acceptance.py -v``; add
``-m "not slow"`` to skip the shared training run.
"""

import json
import time

import numpy as np
import pytest
import torch

from helpers import (
    TinyProblem,
    brute_force_avg_phone_dist,
    finite_difference_check,
    monte_carlo_kl,
    record_criterion,
)
from polyglot_tts import analysis as A
from polyglot_tts import corpus as C
from polyglot_tts.checkpoint import (
    FORMAT_VERSION, VersionMismatchError, checkpoint_bytes, load_checkpoint, parameter_blocks,
    parse_checkpoint, save_checkpoint,
)
from polyglot_tts.cli import run
from polyglot_tts.model import ModelVariantConfig, build_model, kl_divergence
from polyglot_tts.phones import PhoneKind, default_rule_table, normalize_utterance, parse_unified
from polyglot_tts.synthesis import SynthesisRequest, Synthesizer
from polyglot_tts.training import TrainingSchedule, noam_lr, read_metrics, train_seed

from conftest import tiny_schedule

RULES = default_rule_table()
DESK_STEPS = 5000


# -- 1 -----------------------------------------------------------------------

# every locale line carries a diphthong, an affricate, a syllabic consonant
# and a nasalised vowel, written in that locale's native symbols where it has them
NORMALIZATION_FIXTURE = {
    "en-US": ['h "ej tS b n= "@` ,', 'dZ "ow l= a~ .', 'k "aw ts m= o~', '"oj pf "r= E~ ?'],
    "es-ES": ['"ai tS e rr o l=', 'jj "au ts a~ n=', '"ei dZ o~ m= .', 'p "oi r dz N= i~'],
    "fr-FR": ['b "an tS aI n=', '"on dZ l= aU', 'H "in ts m= eI .', 'un pf r= "OI'],
    "de-DE": ['"ae pf n= a~', 'ts "ao l= o~ ,', '"oy tS m= E~', 'dZ "aI N= e~ !'],
    "pt-BR": ['"6n tS ej l=', 'en "ow dZ n=', 'on "aw ts m=', 'rr "ej pf N= a~'],
}


def test_criterion_01_normalization():
    with record_criterion(1, "normalization: no complex phones, idempotent, stress on vowels"):
        categories = {"diphthong": False, "affricate": False, "syllabic": False, "nasal": False}
        kinds = RULES.kinds
        start = time.perf_counter()
        for locale, lines in NORMALIZATION_FIXTURE.items():
            for raw in lines:
                seq = normalize_utterance(raw, locale, RULES)
                assert not set(seq.symbols) & set(RULES.complex_splits), raw
                assert normalize_utterance(seq, None, RULES) == seq
                assert normalize_utterance(str(seq), None, RULES) == seq
                assert all(seq.tokens[i].kind is PhoneKind.VOWEL for i in seq.stress_indices)
                for tok in raw.split():
                    target = RULES.locale_maps[locale].get(tok.lstrip('"'), tok.lstrip('"'))
                    parts = RULES.complex_splits.get(target)
                    if parts is None:
                        continue
                    if all(kinds[p] is PhoneKind.VOWEL for p in parts):
                        categories["diphthong"] = True
                    elif kinds[parts[0]] is PhoneKind.CLOSURE_NO_RELEASE:
                        categories["affricate"] = True
                    elif parts[0] == "@":
                        categories["syllabic"] = True
                    elif parts[-1] == "N":
                        categories["nasal"] = True
        elapsed = time.perf_counter() - start
        assert all(categories.values()), categories
        assert len(NORMALIZATION_FIXTURE) >= 4
        assert elapsed < 1.0, elapsed


# -- 2 -----------------------------------------------------------------------


def test_criterion_02_noam():
    with record_criterion(2, "Noam schedule reference values, continuous and unimodal"):
        s = TrainingSchedule()
        for step, want in ((1000, 0.00025), (4000, 0.001), (16000, 0.0005)):
            assert abs(noam_lr(step, s) - want) <= 1e-12, (step, noam_lr(step, s))
        steps = np.arange(1, 10**6 + 1)
        lrs = s.peak_lr * np.minimum(steps / s.warmup_steps, np.sqrt(s.warmup_steps / steps))
        for k in (1, 3999, 4000, 4001, 123457, 10**6):
            assert lrs[k - 1] == pytest.approx(noam_lr(k, s), rel=1e-12)
        diffs = np.diff(lrs)
        peak = int(np.argmax(lrs))
        assert np.all(diffs[:peak] > 0) and np.all(diffs[peak:] < 0)
        # no jumps: consecutive values differ by at most the largest warmup increment
        assert np.max(np.abs(diffs)) <= s.peak_lr / s.warmup_steps * (1 + 1e-9)


# -- 3 -----------------------------------------------------------------------


def test_criterion_03_kld():
    with record_criterion(3, "closed-form KLD vs 1e6-sample Monte Carlo, KLD(0,0)=0"):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(20):
            mu = rng.normal(size=3)
            lv = rng.normal(scale=0.7, size=3)
            exact = float(kl_divergence(torch.tensor(mu), torch.tensor(lv)))
            estimate = monte_carlo_kl(mu, lv, 10**6, rng)
            worst = max(worst, abs(estimate - exact) / exact)
        assert worst < 0.02, worst
        assert float(kl_divergence(torch.zeros(3), torch.zeros(3))) == 0.0


# -- 4 -----------------------------------------------------------------------


def test_criterion_04_gradient_check():
    with record_criterion(4, "analytic vs central-difference gradients, max rel error < 1e-4"):
        worst, probes = finite_difference_check(TinyProblem(seed=0))
        assert probes > 0
        assert max(worst.values()) < 1e-4, worst


# -- 5 -----------------------------------------------------------------------


def test_criterion_05_attention_invariants():
    with record_criterion(5, "1000 attention rollouts: unit mass, monotone, advance <= 1"):
        cfg = ModelVariantConfig.for_variant("resvae_se_le").scaled(8)
        model = build_model(cfg, 60, 3, rng_seed=5).eval()
        g = torch.Generator().manual_seed(5)
        b, n, steps = 1000, 12, 40
        lengths = torch.randint(1, n + 1, (b,), generator=g)
        ids = torch.randint(1, 60, (b, n), generator=g)
        ids[torch.arange(n).unsqueeze(0) >= lengths.unsqueeze(1)] = 0
        torch.manual_seed(5)
        with torch.no_grad():
            memory = model.encode(ids, lengths, locale_ids=torch.randint(0, 3, (b,), generator=g))
            processed = model.attention.memory(memory)
            state = model.initial_state(memory)
            prev = torch.randn(b, cfg.n_mels, generator=g)
            z = torch.randn(b, cfg.resvae_latent_dim, generator=g)
            se = torch.randn(b, cfg.se_dim, generator=g)
            pos = torch.arange(n, dtype=torch.float32)
            expected = torch.zeros(b)
            for _ in range(steps):
                out, _, state = model.decoder_step(prev, state, memory, processed, lengths,
                                                   z=z, se=se, attention_noise=2.0, generator=g)
                w = state.attention.weights
                assert torch.all((w.sum(-1) - 1).abs() <= 1e-6)
                pos_now = (w * pos).sum(-1)
                assert torch.all(pos_now >= expected - 1e-6)
                assert torch.all(pos_now - expected <= 1 + 1e-6)
                expected = pos_now
                prev = out[:, -1, :cfg.n_mels]


# -- 6 to 8: one shared toy run ----------------------------------------------


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    toy, seed = root / "toy", root / "seed"
    assert run(["make-toy-corpus", "--n", "40", "--out", str(toy)]) == 0
    start = time.perf_counter()
    code = run(["train-seed", "--manifest", str(toy / "manifest.jsonl"),
                "--embeddings", str(toy / "dvectors.csv"), "--out", str(seed)])
    elapsed = time.perf_counter() - start
    return {"root": root, "toy": toy, "seed": seed, "code": code, "seconds": elapsed}


@pytest.mark.slow
def test_criterion_06_toy_end_to_end(toy_run):
    with record_criterion(6, "toy seed training: >=80% loss drop, <60 min, alignment rho > 0.95"
                          ) as note:
        assert toy_run["code"] == 0
        records = C.load_manifest(toy_run["toy"] / "manifest.jsonl", RULES).records
        assert len(records) == 40
        assert {r.speaker for r in records} == {"en_a", "en_b", "es_a", "es_b"}
        assert {r.locale for r in records} == {"en-US", "es-ES"}
        assert max(len(C.read_wav(r.audio)) for r in records) <= 2 * 24000

        ckpt = load_checkpoint(toy_run["seed"] / "seed.ckpt")
        assert ckpt.variant == "resvae_se_le" and ckpt.step == DESK_STEPS
        metrics = read_metrics(toy_run["seed"] / "metrics.csv")
        total = np.array([m["total"] for m in metrics])
        assert len(total) == DESK_STEPS
        reduction = 1 - total[-50:].mean() / total[:50].mean()
        rho = json.loads((toy_run["seed"] / "summary.json").read_text())["alignment_spearman"]
        note(f"reduction {reduction:.3f}, {toy_run['seconds'] / 60:.1f} min, rho {rho:.4f}")
        assert reduction >= 0.80
        assert toy_run["seconds"] < 3600
        assert rho > 0.95


@pytest.mark.slow
def test_criterion_07_finetune_protocol(toy_run, tmp_path):
    with record_criterion(7, "finetune refuses an altered subset and lowers A's subset loss"
                          ) as note:
        assert toy_run["code"] == 0
        seed, toy = toy_run["seed"], toy_run["toy"]
        speaker = "es_a"
        common = ["finetune", "--manifest", str(toy / "manifest.jsonl"),
                  "--ckpt", str(seed / "seed.ckpt"), "--speaker", speaker]

        lines = (seed / "subset.txt").read_text().splitlines()
        dropped = next(ln for ln in lines if ln.startswith(speaker))
        altered = tmp_path / "altered.txt"
        altered.write_text("\n".join(ln for ln in lines if ln != dropped) + "\n")
        assert run([*common, "--subset", str(altered), "--out", str(tmp_path / "bad")]) == 1
        assert not (tmp_path / "bad" / "finetune.ckpt").exists()

        out = tmp_path / "ft"
        assert run([*common, "--subset", str(seed / "subset.txt"), "--out", str(out)]) == 0
        report = json.loads((out / "evaluation.json").read_text())
        before, after = report["seed_loss"]["total"], report["finetuned_loss"]["total"]
        note(f"{speaker} subset loss {before:.4f} -> {after:.4f}")
        assert after < before


@pytest.mark.slow
def test_criterion_08_inference(toy_run, tmp_path):
    with record_criterion(8, "synth is bit-identical; decoder sees z = 0 and SE = mean"):
        assert toy_run["code"] == 0
        ckpt_path = toy_run["seed"] / "seed.ckpt"
        args = ["synth", "--ckpt", str(ckpt_path), "--phones", 'b "a l o', "--voice", "en_a",
                "--locale", "es-ES"]
        assert run([*args, "--out", str(tmp_path / "a.bin"), "--attention",
                    str(tmp_path / "a.npy")]) == 0
        assert run([*args, "--out", str(tmp_path / "b.bin"), "--attention",
                    str(tmp_path / "b.npy")]) == 0
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert (tmp_path / "a.npy").read_bytes() == (tmp_path / "b.npy").read_bytes()

        synth = Synthesizer.from_checkpoint(load_checkpoint(ckpt_path))
        seen = []
        real_step = synth.model.decoder_step

        def spy(*a, **kw):
            seen.append((kw["z"].clone(), kw["se"].clone()))
            return real_step(*a, **kw)

        synth.model.decoder_step = spy
        synth(SynthesisRequest(parse_unified('b "a l o', RULES), "en_a", "es-ES"))
        mean = torch.tensor(synth.speakers["en_a"].mean, dtype=torch.float32)
        assert seen
        for z, se in seen:
            assert z.shape == (1, 16) and torch.count_nonzero(z) == 0
            assert torch.equal(se[0], mean)


# -- 9 -----------------------------------------------------------------------


def test_criterion_09_phone_distance_oracle():
    with record_criterion(9, "avg_phone_dist equals the double loop on 100 instances; 0 if T in S"):
        rng = np.random.default_rng(99)
        for _ in range(100):
            symbols = [f"p{i}" for i in range(int(rng.integers(2, 40)))]
            dim = int(rng.integers(2, 64))
            table = {s: rng.standard_normal(dim) for s in symbols}
            test = rng.choice(symbols, size=int(rng.integers(1, len(symbols) + 1)), replace=False)
            w = rng.random(len(test))
            probs = {t: float(p) for t, p in zip(test, w / w.sum())}
            speaker = set(rng.choice(symbols, size=int(rng.integers(1, len(symbols) + 1)),
                                     replace=False))
            got = A.avg_phone_dist(probs, speaker, table)
            assert got == brute_force_avg_phone_dist(probs, speaker, table)
            assert A.avg_phone_dist(probs, speaker | set(test), table) == 0.0


# -- 10 ----------------------------------------------------------------------


def test_criterion_10_mos_pipeline():
    with record_criterion(10, "z-scores normalized; +0.5 shift flagged alone; 3-row summary"):
        rng = np.random.default_rng(10)
        subjects = [f"s{i:02d}" for i in range(15)]
        systems = ["ref", "sysA", "sysB", "shifted"]
        bias = {s: rng.normal(0, 0.5) for s in subjects}
        records = []
        for system in systems:
            for k in range(200):
                subject = subjects[k % len(subjects)]
                score = int(np.clip(round(3 + bias[subject] + rng.normal(0, 1.0)), 1, 5))
                records.append(A.RatingRecord(subject, f"{system}{k}", system, "v1", score))
        scored = A.zscore_by_subject(records)
        for subject in subjects:
            z = np.array([r.z for r in scored if r.subject == subject])
            assert abs(z.mean()) <= 1e-9 and abs(z.std(ddof=1) - 1) <= 1e-9

        # inject a known shift of +0.5 in z units
        shifted = [A.RatingRecord(r.subject, r.item, r.system, r.voice, r.score,
                                  r.z + 0.5 if r.system == "shifted" else r.z) for r in scored]
        contrasts = A.pairwise_contrasts(shifted, "system")
        assert len(contrasts) == 6
        flagged = {(c.a, c.b) for c in contrasts if c.significant}
        involved = {name for pair in flagged for name in pair}
        assert flagged and all("shifted" in pair for pair in flagged), flagged
        assert involved - {"shifted"} == {"ref", "sysA", "sysB"}

        summary = A.significance_summary({"v1": contrasts}, "ref")
        rows = summary.table().splitlines()[1:]
        assert [r.split()[0] for r in rows] == ["better", "equal", "worse"]
        assert summary.counts["shifted"]["better"] == 1
        assert summary.counts["sysA"]["equal"] == 1 and summary.counts["sysB"]["equal"] == 1


# -- 11 ----------------------------------------------------------------------


def test_criterion_11_checkpoint_round_trip(tmp_path, tiny):
    with record_criterion(11, "save -> load -> save is byte-identical; version mismatch rejected"):
        ckpt = train_seed(tiny.model(), tiny.data, tiny_schedule(seed_steps=1500), 0)
        first = save_checkpoint(ckpt, tmp_path / "a.ckpt")
        loaded = load_checkpoint(first)
        second = save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert parameter_blocks(loaded) == parameter_blocks(ckpt)
        assert first.read_bytes() == second.read_bytes()
        loaded.version = FORMAT_VERSION + 1
        with pytest.raises(VersionMismatchError):
            parse_checkpoint(checkpoint_bytes(loaded))

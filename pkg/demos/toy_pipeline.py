"""Walk through the whole pipeline on a small synthetic corpus.

Builds a toy corpus, trains a seed model for a few hundred steps, fine-tunes
one voice, and synthesizes a crosslingual sentence. Runs in a few minutes on
one CPU core. Output lands in ./toy_pipeline_out.

    python demos/toy_pipeline.py [--steps 300]
"""

import argparse
from pathlib import Path

import numpy as np

from polyglot_tts import corpus as C
from polyglot_tts import speakers as S
from polyglot_tts.checkpoint import save_checkpoint
from polyglot_tts.model import ModelVariantConfig, build_model, count_parameters
from polyglot_tts.phones import PhoneVocabulary, default_rule_table, normalize_utterance
from polyglot_tts.synthesis import SynthesisRequest, Synthesizer, mel_to_waveform
from polyglot_tts.toy import make_toy_corpus
from polyglot_tts.training import (
    TrainingData, TrainingSchedule, evaluate_loss, finetune, model_from_checkpoint, train_seed,
)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--out", default="toy_pipeline_out")
    args = parser.parse_args()
    out = Path(args.out)

    # 1. a corpus: two locales, two speakers each, wavs + manifests + d-vectors
    toy = make_toy_corpus(out / "toy", n_utterances=24)
    rules = default_rule_table()
    corpus = C.load_manifest(toy.manifest, rules)
    print(f"{len(corpus)} utterances, speakers {corpus.speakers}, locales {corpus.locales}")

    # 2. features, a training subset and per-speaker embedding Gaussians
    subset = C.select_training_subset(corpus, n_per_speaker=6, seed=0)
    vocab = PhoneVocabulary.from_rules(rules)
    features = C.featurize(corpus, out / "features")
    examples = C.build_examples(corpus, subset.all_ids, vocab, features)
    speaker_of = {r.utt_id: r.speaker for r in corpus.records}
    gaussians = S.fit_speaker_gaussians(S.load_embeddings(toy.embeddings), speaker_of,
                                        subset.all_ids)
    data = TrainingData(examples, subset, vocab.symbols, corpus.locales, gaussians)

    # 3. seed training on the pooled speakers
    cfg = ModelVariantConfig.for_variant("resvae_se_le").scaled(8)
    model = build_model(cfg, len(vocab), len(corpus.locales), rng_seed=0)
    print(f"model: {count_parameters(model):,} parameters")
    schedule = TrainingSchedule(seed_steps=args.steps * 500, finetune_steps=50 * 500,
                                extended_steps=args.steps * 900, warmup_steps=max(1, args.steps // 2))
    seed_ckpt = train_seed(model, data, schedule, rng_seed=0,
                           on_step=lambda r: r["step"] % 50 == 0 and print(
                               f"  step {r['step']:4d}  loss {r['total']:.3f}"))
    save_checkpoint(seed_ckpt, out / "seed.ckpt")

    # 4. fine-tune one voice on exactly its seed-training utterances
    voice = "es_a"
    tuned = finetune(seed_ckpt, voice, data, schedule, rng_seed=0)
    own = [e for e in examples if e.speaker == voice]
    before = evaluate_loss(model_from_checkpoint(seed_ckpt), own, corpus.locales, gaussians)
    after = evaluate_loss(model_from_checkpoint(tuned), own, corpus.locales, gaussians)
    print(f"{voice} loss on its own data: {before['total']:.3f} -> {after['total']:.3f}")

    # 5. crosslingual synthesis: the Spanish voice reading English phones
    phones = normalize_utterance('h "ej l ow', "en-US", rules)
    result = Synthesizer.from_checkpoint(tuned)(SynthesisRequest(phones, voice, "en-US"))
    print(f"synthesized {len(result.mel)} frames, stopped by {result.termination}")
    C.write_wav(out / "crosslingual.wav", mel_to_waveform(result.mel))
    np.save(out / "crosslingual_attention.npy", result.attention)
    print(f"wrote {out / 'crosslingual.wav'}")


if __name__ == "__main__":
    main()

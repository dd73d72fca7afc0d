from dataclasses import dataclass

import pytest

from polyglot_tts import corpus as C
from polyglot_tts import speakers as S
from polyglot_tts.model import ModelVariantConfig, build_model
from polyglot_tts.phones import PhoneVocabulary, default_rule_table
from polyglot_tts.toy import make_toy_corpus
from polyglot_tts.training import TrainingData, TrainingSchedule


@dataclass
class Tiny:
    toy: object
    corpus: C.Corpus
    subset: C.TrainingSubset
    vocab: PhoneVocabulary
    data: TrainingData
    schedule: TrainingSchedule

    def model(self, variant="resvae_se_le", seed=0):
        cfg = ModelVariantConfig.for_variant(variant).scaled(64)
        return build_model(cfg, len(self.vocab), len(self.corpus.locales), seed)


def tiny_schedule(**overrides):
    # 10 seed steps, 2 fine-tuning steps, 15 extended steps
    base = dict(seed_steps=5000, finetune_steps=1000, extended_steps=7500, desk_divisor=500,
                batch_size=4, warmup_steps=5, checkpoint_every=4)
    return TrainingSchedule(**{**base, **overrides})


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    toy = make_toy_corpus(root / "toy", n_utterances=12, seed=0)
    rules = default_rule_table()
    corpus = C.load_manifest(toy.manifest, rules)
    subset = C.select_training_subset(corpus, 2, seed=0)
    vocab = PhoneVocabulary.from_rules(rules)
    feats = C.featurize(corpus, root / "feats")
    examples = C.build_examples(corpus, subset.all_ids, vocab, feats)
    emb = S.load_embeddings(toy.embeddings)
    gaussians = S.fit_speaker_gaussians(emb, {r.utt_id: r.speaker for r in corpus.records},
                                        subset.all_ids)
    data = TrainingData(examples, subset, vocab.symbols, corpus.locales, gaussians)
    return Tiny(toy, corpus, subset, vocab, data, tiny_schedule())


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])

"""Command-line entry point: ``polyglot-tts <subcommand> ...``."""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import os
import sys
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as A
from . import corpus as C
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import ModelVariantConfig, build_model
from .phones import (
    PhoneError,
    PhoneVocabulary,
    default_rule_table,
    load_rule_table,
    normalize_utterance,
    parse_unified,
    validate_sequence,
)
from .speakers import SpeakerSpaceError, fit_speaker_gaussians, load_embeddings
from .synthesis import (
    SynthesisError,
    SynthesisRequest,
    Synthesizer,
    mel_to_waveform,
    write_attention,
    write_mel,
)
from .toy import make_toy_corpus
from .training import (
    TrainingData,
    TrainingError,
    TrainingSchedule,
    alignment_spearman,
    evaluate_loss,
    extend_training,
    finetune,
    model_from_checkpoint,
    read_metrics,
    teacher_forced_alignment,
    train_seed,
)

CONFIG_ENV = "POLYGLOT_TTS_CONFIG"
_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelVariantConfig)} - {
    "use_resvae", "use_se_le", "scale"}

DEFAULT_CONFIG = {
    "model": {"variant": "resvae_se_le", "desk_scale": 8},
    "schedule": TrainingSchedule().to_dict(),
    "subset": {"n_per_speaker": 8500, "seed": 0},
    "training": {"seed": 0},
    "synthesis": {"stop_threshold": 0.5, "max_steps_per_phone": 40, "seed": 0,
                  "griffin_lim_iters": 64},
    "analysis": {"uniform_prior": False},
    "toy": {"n_utterances": 40, "seed": 0},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _read_config_file(path: Path) -> dict:
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    return tomllib.loads(text.decode("utf-8"))


def _merge(base: dict, override: Mapping, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{where}{key}"
        if key not in base:
            if where == "model." and key in _MODEL_FIELDS:
                out[key] = value
                continue
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {name!r} must be a table")
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults, overlaid by the config file (flag, then environment variable)."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return copy.deepcopy(DEFAULT_CONFIG)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = _read_config_file(path)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return _merge(DEFAULT_CONFIG, data)


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def model_config(config: Mapping) -> ModelVariantConfig:
    section = dict(config["model"])
    variant = section.pop("variant")
    scale = section.pop("desk_scale")
    cfg = ModelVariantConfig.for_variant(variant)
    if scale != 1:
        cfg = cfg.scaled(int(scale))
    if section:
        section = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
        cfg = dataclasses.replace(cfg, **section)
    return cfg.validate()


def schedule_config(config: Mapping) -> TrainingSchedule:
    return TrainingSchedule.from_dict(config["schedule"])


def _file_digest(path: Path) -> str | None:
    if not path.is_file():
        return None
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(dest: Path, args: argparse.Namespace, config: Mapping,
                       inputs: Mapping[str, str | Path | None], seeds: Mapping[str, int],
                       outputs: Sequence[str | Path] = ()) -> Path:
    """Record inputs (with digests), the effective config, its hash and the seeds.

    ``dest`` is a directory (writes ``run.json`` and ``config.json`` inside)
    or an output file (writes ``<file>.run.json`` beside it).
    """
    record = {
        "command": args.command,
        "argv": args.argv,
        "version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": dict(seeds),
        "inputs": {k: None if v is None else {"path": str(v), "sha256": _file_digest(Path(v))}
                   for k, v in sorted(inputs.items())},
        "outputs": [str(o) for o in outputs],
    }
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    if dest.is_dir():
        (dest / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
        path = dest / "run.json"
    else:
        path = dest.with_name(dest.name + ".run.json")
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# shared loading


def _rules(args):
    return load_rule_table(args.rules) if args.rules else default_rule_table()


def _training_data(args, corpus: C.Corpus, rules, subset: C.TrainingSubset,
                   need_speakers: bool) -> TrainingData:
    vocab = PhoneVocabulary.from_rules(rules)
    ids = subset.all_ids
    if args.features:
        feats = C.load_features(args.features, ids)
    else:
        feats = {i: C.compute_frames(C.read_wav(corpus[i].audio)) for i in ids}
    speakers = {}
    if need_speakers:
        if not args.embeddings:
            raise ConfigError("this model variant needs --embeddings (per-utterance d-vectors)")
        speakers = fit_speaker_gaussians(load_embeddings(args.embeddings),
                                         {r.utt_id: r.speaker for r in corpus.records}, ids)
    return TrainingData(C.build_examples(corpus, ids, vocab, feats), subset, vocab.symbols,
                        corpus.locales, speakers)


def _speaker_phones(corpus: C.Corpus, subset: C.TrainingSubset, rules) -> dict[str, list[str]]:
    return {spk: sorted(A.speaker_phone_set((corpus[i].phones for i in ids), rules))
            for spk, ids in subset.ids_by_speaker.items()}


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _summary(label: str, ckpt, metrics_path: Path) -> None:
    rows = read_metrics(metrics_path)
    first = np.mean([r["total"] for r in rows[:50]])
    last = np.mean([r["total"] for r in rows[-50:]])
    print(f"{label}: step {ckpt.step}, total loss {first:.4f} (first 50) -> {last:.4f} (last 50)")


# ---------------------------------------------------------------------------
# subcommands


def cmd_normalize(args, config):
    rules = _rules(args)
    rows = []
    with open(args.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                seq = normalize_utterance(row["phones"], row.get("locale"), rules)
            except PhoneError as exc:
                raise PhoneError(f"{args.input}:{lineno}: {exc}") from None
            rows.append({**row, "phones": str(seq)})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows),
                   encoding="utf-8")
    write_run_manifest(out, args, config, {"input": args.input, "rules": args.rules}, {}, [out])
    print(f"normalized {len(rows)} utterances -> {out}")


def cmd_featurize(args, config):
    corpus = C.load_manifest(args.manifest, _rules(args))
    out = _out_dir(args.out)
    feats = C.featurize(corpus, out)
    write_run_manifest(out, args, config, {"manifest": args.manifest, "rules": args.rules}, {})
    print(f"wrote {len(feats)} feature files to {out}")


def cmd_subset(args, config):
    corpus = C.load_manifest(args.manifest, _rules(args), check_audio=False)
    section = config["subset"]
    seed = args.seed if args.seed is not None else section["seed"]
    n = args.n if args.n is not None else section["n_per_speaker"]
    subset = C.select_training_subset(corpus, n, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    subset.save(out)
    write_run_manifest(out, args, config, {"manifest": args.manifest}, {"subset": seed}, [out])
    print(f"selected {len(subset)} utterances over {len(subset.ids_by_speaker)} speakers -> {out}")


def cmd_train_seed(args, config):
    rules = _rules(args)
    corpus = C.load_manifest(args.manifest, rules)
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else config["training"]["seed"]
    if args.subset:
        subset = C.TrainingSubset.load(args.subset, corpus)
    else:
        subset = C.select_training_subset(corpus, config["subset"]["n_per_speaker"],
                                          config["subset"]["seed"])
    subset.save(out / "subset.txt")
    cfg = model_config(config)
    schedule = schedule_config(config)
    data = _training_data(args, corpus, rules, subset, cfg.use_se_le)
    model = build_model(cfg, len(data.vocab), len(data.locales), rng_seed=seed)
    ckpt = train_seed(model, data, schedule, seed, checkpoint_dir=out,
                      metrics_path=out / "metrics.csv",
                      metadata={"speaker_phones": _speaker_phones(corpus, subset, rules)})
    final = save_checkpoint(ckpt, out / "seed.ckpt")
    # longest utterance: on short ones the final phone's tied positions cap the rank correlation
    probe = max(data.examples, key=lambda e: (len(e.phone_ids), e.utt_id))
    align = teacher_forced_alignment(model, probe, data.locales, data.speakers)
    rho = alignment_spearman(align)
    np.save(out / "alignment.npy", align)
    (out / "summary.json").write_text(json.dumps(
        {"step": ckpt.step, "alignment_utt": probe.utt_id, "alignment_spearman": rho},
        indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, args, config, {"manifest": args.manifest, "subset": args.subset,
                                           "embeddings": args.embeddings, "rules": args.rules},
                       {"training": seed, "subset": subset.seed}, [final])
    _summary("seed training", ckpt, out / "metrics.csv")
    print(f"alignment spearman on {probe.utt_id}: {rho:.4f}")


def cmd_finetune(args, config):
    rules = _rules(args)
    corpus = C.load_manifest(args.manifest, rules)
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else config["training"]["seed"]
    seed_ckpt = load_checkpoint(args.ckpt)
    persisted = C.TrainingSubset.load(args.subset, corpus)
    data = _training_data(args, corpus, rules, persisted, need_speakers=False)
    schedule = TrainingSchedule.from_dict(seed_ckpt.schedule)
    if args.config or os.environ.get(CONFIG_ENV):
        schedule = schedule_config(config)
    ckpt = finetune(seed_ckpt, args.speaker, data, schedule, seed, persisted_subset=persisted,
                    checkpoint_dir=out, metrics_path=out / "metrics.csv")
    final = save_checkpoint(ckpt, out / "finetune.ckpt")

    own = [e for e in data.examples if e.utt_id in set(seed_ckpt.subset.ids_for(args.speaker))]
    before = evaluate_loss(model_from_checkpoint(seed_ckpt), own, seed_ckpt.locales,
                           seed_ckpt.speakers)
    after = evaluate_loss(model_from_checkpoint(ckpt), own, ckpt.locales, ckpt.speakers)
    (out / "evaluation.json").write_text(json.dumps(
        {"speaker": args.speaker, "n_utterances": len(own), "seed_loss": before,
         "finetuned_loss": after}, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, args, config, {"ckpt": args.ckpt, "manifest": args.manifest,
                                           "subset": args.subset, "rules": args.rules},
                       {"training": seed}, [final])
    _summary(f"fine-tuning {args.speaker}", ckpt, out / "metrics.csv")
    print(f"{args.speaker} subset loss: seed {before['total']:.4f} -> "
          f"fine-tuned {after['total']:.4f}")


def cmd_extend(args, config):
    rules = _rules(args)
    corpus = C.load_manifest(args.manifest, rules)
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else config["training"]["seed"]
    seed_ckpt = load_checkpoint(args.ckpt)
    if seed_ckpt.subset is None:
        raise TrainingError("checkpoint carries no training subset")
    data = _training_data(args, corpus, rules, seed_ckpt.subset, need_speakers=False)
    schedule = TrainingSchedule.from_dict(seed_ckpt.schedule)
    if args.config or os.environ.get(CONFIG_ENV):
        schedule = schedule_config(config)
    ckpt = extend_training(seed_ckpt, data, schedule, seed, checkpoint_dir=out,
                           metrics_path=out / "metrics.csv")
    final = save_checkpoint(ckpt, out / "extended.ckpt")
    write_run_manifest(out, args, config, {"ckpt": args.ckpt, "manifest": args.manifest,
                                           "rules": args.rules}, {"training": seed}, [final])
    _summary("extended training", ckpt, out / "metrics.csv")


def cmd_synth(args, config):
    rules = _rules(args)
    section = config["synthesis"]
    if args.phones_locale:
        phones = normalize_utterance(args.phones, args.phones_locale, rules)
    else:
        phones = parse_unified(args.phones, rules)
        report = validate_sequence(phones, rules)
        if report:
            raise SynthesisError(f"invalid unified phones: {report}")
    seed = args.seed if args.seed is not None else section["seed"]
    max_steps = args.max_steps or section["max_steps_per_phone"] * max(1, len(phones))
    request = SynthesisRequest(
        phones, args.voice, args.locale, max_steps=max_steps,
        stop_threshold=args.stop_threshold or section["stop_threshold"], seed=seed,
    )
    ckpt = load_checkpoint(args.ckpt)
    result = Synthesizer.from_checkpoint(ckpt)(request)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mel(out, result.mel)
    outputs = [out]
    if args.attention:
        write_attention(args.attention, result.attention)
        outputs.append(Path(args.attention))
    if args.wav:
        C.write_wav(args.wav, mel_to_waveform(result.mel, section["griffin_lim_iters"], seed))
        outputs.append(Path(args.wav))
    write_run_manifest(out, args, config, {"ckpt": args.ckpt, "rules": args.rules},
                       {"synthesis": seed}, outputs)
    print(f"{len(result.mel)} frames in {result.steps} steps ({result.termination}) -> {out}")


def _read_sequences(path: str, rules) -> list:
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                seqs.append(parse_unified(json.loads(line)["phones"], rules))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise A.AnalysisError(f"{path}:{lineno}: malformed row ({exc})") from None
    return seqs


def cmd_phonedist(args, config):
    rules = _rules(args)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    if args.embedding_table:
        table = A.load_embedding_table(args.embedding_table)
    elif ckpt is not None:
        table = A.embedding_table_from_checkpoint(ckpt)
    else:
        raise ConfigError("phonedist needs --ckpt or --embedding-table")
    if args.speaker_data:
        corpus = C.load_manifest(args.speaker_data, rules, check_audio=False)
        ids = corpus.ids_by_speaker().get(args.speaker)
        if not ids:
            raise A.AnalysisError(f"speaker {args.speaker!r} has no utterances in {args.speaker_data}")
        speaker_phones = A.speaker_phone_set((corpus[i].phones for i in ids), rules)
    else:
        known = (ckpt.metadata.get("speaker_phones", {}) if ckpt else {})
        if args.speaker not in known:
            raise A.AnalysisError(
                f"speaker {args.speaker!r} unknown to the checkpoint; pass --speaker-data")
        speaker_phones = known[args.speaker]
    uniform = args.uniform or config["analysis"]["uniform_prior"]
    probs = A.phone_distribution(_read_sequences(args.test, rules), rules, uniform=uniform)
    print(repr(A.avg_phone_dist(probs, speaker_phones, table)))


def cmd_mos_report(args, config):
    records = A.zscore_by_subject(A.load_ratings(args.ratings))
    out = _out_dir(args.out)
    with open(out / "zscores.csv", "w", encoding="utf-8") as fh:
        fh.write("subject,item,system,voice,score,z\n")
        for r in records:
            fh.write(f"{r.subject},{r.item},{r.system},{r.voice},{r.score},{r.z!r}\n")
    overall = A.pairwise_contrasts(records, "system")
    A.write_contrasts_csv(out / "contrasts_system.csv", {"*": overall})
    per_voice = A.contrasts_by_voice(records)
    A.write_contrasts_csv(out / "contrasts_by_voice.csv", per_voice)
    summary = A.significance_summary(per_voice, args.reference)
    (out / "significance.txt").write_text(summary.table() + "\n", encoding="utf-8")
    (out / "per_voice.csv").write_text(summary.voice_table(), encoding="utf-8")
    means = A.mean_scores(records, "voice", "system")
    systems = sorted({r.system for r in records})
    with open(out / "mean_scores.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(["voice", *systems]) + "\n")
        for voice, row in means.items():
            fh.write(",".join([voice, *(repr(row[s]) if s in row else "" for s in systems)]) + "\n")
    if args.distances:
        _scatter(args.distances, records, out / "scatter.csv")
    write_run_manifest(out, args, config, {"ratings": args.ratings,
                                           "distances": args.distances}, {})
    print(summary.table())


def _scatter(path: str, records, dest: Path) -> None:
    """Mean z per voice, shifted per evaluation group so group means coincide."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append((row["voice"], float(row["avg_phone_dist"]), row.get("group") or "all"))
    mos = {v: float(np.mean([r.score for r in records if r.voice == v])) for v, _, _ in rows}
    groups: dict[str, list[str]] = {}
    for voice, _, group in rows:
        groups.setdefault(group, []).append(voice)
    shifted = A.shift_mos_for_plot({g: [mos[v] for v in vs] for g, vs in groups.items()})
    value = {v: float(shifted[g][i]) for g, vs in groups.items() for i, v in enumerate(vs)}
    A.write_scatter_csv(dest, [(v, d, value[v]) for v, d, _ in rows])


def cmd_make_toy_corpus(args, config):
    section = config["toy"]
    n = args.n if args.n is not None else section["n_utterances"]
    seed = args.seed if args.seed is not None else section["seed"]
    toy = make_toy_corpus(args.out, n_utterances=n, seed=seed)
    write_run_manifest(toy.root, args, config, {}, {"toy": seed},
                       [toy.manifest, toy.raw_manifest, toy.embeddings, toy.rules])
    print(f"toy corpus with {n} utterances -> {toy.root}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyglot-tts", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML or JSON config (default: $%s)" % CONFIG_ENV)
        p.add_argument("--rules", help="rule-table TSV (default: the bundled table)")
        p.set_defaults(func=func)
        return p

    p = command("normalize", cmd_normalize, "map locale transcriptions onto the unified phone set")
    p.add_argument("--in", dest="input", required=True, help="raw JSONL manifest")
    p.add_argument("--out", required=True, help="unified JSONL manifest")

    p = command("featurize", cmd_featurize, "compute 81-dim acoustic frames for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for <utt_id>.npy files")

    p = command("subset", cmd_subset, "select a balanced per-speaker training subset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n", type=int, help="utterances per speaker")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    def training_inputs(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--features", help="directory written by featurize (default: compute)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")

    p = command("train-seed", cmd_train_seed, "train a multi-speaker seed model")
    training_inputs(p)
    p.add_argument("--subset", help="subset file (default: select from the config)")
    p.add_argument("--embeddings", help="per-utterance d-vector CSV")

    p = command("finetune", cmd_finetune, "fine-tune a seed model on one speaker")
    training_inputs(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--subset", required=True, help="the subset file used for seed training")

    p = command("extend", cmd_extend, "continue seed training to the extended budget")
    training_inputs(p)
    p.add_argument("--ckpt", required=True)

    p = command("synth", cmd_synth, "synthesize a mel spectrogram")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--phones", required=True, help="unified phones, space separated")
    p.add_argument("--phones-locale", help="treat --phones as a transcription in this locale")
    p.add_argument("--voice", required=True)
    p.add_argument("--locale", required=True, help="language locale of the text")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--stop-threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="mel output file")
    p.add_argument("--attention", help="optional .npy attention dump")
    p.add_argument("--wav", help="optional waveform output")

    p = command("phonedist", cmd_phonedist, "average phonetic distance of test text to a voice")
    p.add_argument("--ckpt")
    p.add_argument("--embedding-table", help="CSV of symbol followed by reals")
    p.add_argument("--test", required=True, help="JSONL with unified phones")
    p.add_argument("--speaker", required=True)
    p.add_argument("--speaker-data", help="manifest holding the speaker's utterances")
    p.add_argument("--uniform", action="store_true", help="uniform P(t) over unique test phones")

    p = command("mos-report", cmd_mos_report, "z-score ratings and test pairwise contrasts")
    p.add_argument("--ratings", required=True)
    p.add_argument("--reference", required=True, help="reference system for the summary")
    p.add_argument("--distances", help="CSV voice,avg_phone_dist[,group] for scatter data")
    p.add_argument("--out", required=True)

    p = command("make-toy-corpus", cmd_make_toy_corpus, "write a small synthetic corpus")
    p.add_argument("--n", type=int, help="number of utterances")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    return parser


_HANDLED = (ConfigError, PhoneError, C.CorpusError, CheckpointError, TrainingError,
            SynthesisError, SpeakerSpaceError, A.AnalysisError, OSError, ValueError)


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        config = load_config(args.config)
        args.func(args, config)
    except _HANDLED as exc:
        print(f"polyglot-tts {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())

"""Stage commands: each reads artifacts from disk, writes its own, and records the resolved config."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import storage
from .config import ExperimentConfig
from .errors import CheckpointError, ConfigError, DataError, HeartLangError
from .evaluation import FeatureExtractor, low_resource_subset, macro_auc_report, train_probe
from .pretrain import PretrainModel, cached_targets, evaluate_masked, init_pretrain_model, train_pretrain
from .records_io import RECORD_SUFFIX, list_record_files, load_any, save_record
from .rng import substream
from .signal_core import preprocess
from .st_ecgformer import EncoderConfig, EncoderState, init_encoder
from .storage import SentenceCorpus
from .synthetic import CLASS_NAMES, generate_corpus
from .tokenizer import lead_subset, tokenize
from .vq import usage_report
from .vq_train import VQModel, assign_indices, evaluate_vq, init_vq_model, train_vq
from .st_ecgformer import DecoderConfig

log = logging.getLogger(__name__)

LABELS_FILE = "labels.csv"
RESULTS_FILE = "results.csv"
RESULT_FIELDS = ("task", "fraction", "seed", "epoch_best", "valid_auc", "test_auc")


def _out(cfg: ExperimentConfig, out, default: str) -> Path:
    path = Path(out) if out is not None else Path(cfg.out_dir) / default
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(cfg: ExperimentConfig, directory: Path):
    cfg.save(directory / "config.json")


# -- synth ------------------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, out=None) -> dict:
    """Labelled synthetic records plus a labels.csv sidecar."""
    out = _out(cfg, out, "records")
    items = generate_corpus(cfg.synth, cfg.seed)
    for item in items:
        save_record(item.record, out / f"{item.record.record_id}{RECORD_SUFFIX}")
    with open(out / LABELS_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "split", "condition", *CLASS_NAMES])
        for item in items:
            w.writerow([item.record.record_id, item.split, item.condition, *item.labels.tolist()])
    _write_resolved(cfg, out)
    counts = Counter(item.condition for item in items)
    files = list_record_files(out) + [out / LABELS_FILE]
    return {"dir": str(out), "n_records": len(items), "conditions": dict(sorted(counts.items())),
            "hash": storage.tree_hash(files)}


def read_labels(directory) -> dict:
    path = Path(directory) / LABELS_FILE
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    classes = [c for c in rows[0] if c not in ("record_id", "split", "condition")] if rows else []
    return {r["record_id"]: (r["split"], [int(r[c]) for c in classes], classes) for r in rows}


# -- tokenize ---------------------------------------------------------------------------

def _tokenize_one(args):
    path, cfg = args
    try:
        rec = load_any(path, cfg.preprocess.target_rate)
        rec = preprocess(rec, cfg.preprocess)
        return tokenize(rec, cfg.tokenizer), None
    except HeartLangError as exc:
        return None, type(exc).__name__


def cmd_tokenize(cfg: ExperimentConfig, input_dir, out=None, mode: str | None = None,
                 lead_config: int | None = None) -> dict:
    """Records -> sentence corpus; unusable records are skipped and counted."""
    tok = cfg.tokenizer
    if mode is not None:
        tok = dataclasses.replace(tok, mode=mode)
    if lead_config is not None and lead_config != 12:
        tok = lead_subset(tok, lead_config)
    cfg = dataclasses.replace(cfg, tokenizer=tok)
    out = _out(cfg, out, f"corpus-{tok.mode}")
    files = list_record_files(input_dir)
    if not files:
        raise DataError(f"no record files in {input_dir}")
    jobs = [(p, cfg) for p in files]
    if cfg.workers > 1 and not cfg.deterministic:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_tokenize_one, jobs, chunksize=8))
    else:
        results = [_tokenize_one(j) for j in jobs]
    labels = read_labels(input_dir)
    sentences, tags, ys, skipped = [], [], [], Counter()
    classes = []
    for sentence, err in results:
        if sentence is None:
            skipped[err] += 1
            continue
        sentences.append(sentence)
        if labels:
            split, y, classes = labels.get(sentence.source_record_id, ("train", None, classes))
            if y is None:
                raise DataError(f"record {sentence.source_record_id} has no label row")
            tags.append(split)
            ys.append(y)
    if not sentences:
        raise DataError("every record failed to tokenize")
    corpus = storage.corpus_from_sentences(
        sentences, ys if labels else None, tags if labels else None, classes,
        {"mode": tok.mode, "leads": list(tok.leads) if tok.leads else None})
    storage.write_corpus(corpus, out)
    _write_resolved(cfg, out)
    words = (~corpus.pad_mask).sum(axis=1)
    hist = Counter(int(w) for w in words)
    report = {"dir": str(out), "n_records": len(files), "n_sentences": len(corpus),
              "skipped": dict(skipped), "words_histogram": {str(k): v for k, v in sorted(hist.items())},
              "mean_words": float(words.mean()), "hash": storage.corpus_hash(out), "mode": tok.mode}
    storage.write_json(out / "tokenize_report.json", report)
    return report


# -- checkpoints -------------------------------------------------------------------------

def _enc_cfg_dict(c: EncoderConfig) -> dict:
    return dataclasses.asdict(c)


def _enc_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    for k in ("conv_channels", "conv_kernels", "conv_strides"):
        d[k] = tuple(d[k])
    return EncoderConfig(**d)


def save_vq(model: VQModel, directory, extra: dict | None = None) -> str:
    manifest = {"kind": "vq", "encoder": _enc_cfg_dict(model.encoder.config),
                "decoder": dataclasses.asdict(model.decoder.config),
                "codebook": dataclasses.asdict(model.config), **(extra or {})}
    return storage.save_checkpoint(directory, model.arrays(), manifest)


def load_vq(directory) -> VQModel:
    blocks, manifest = storage.load_checkpoint(directory)
    if manifest.get("kind") != "vq":
        raise CheckpointError(f"{directory} is not a VQ checkpoint")
    from .vq import VQConfig
    model = init_vq_model(_enc_from_dict(manifest["encoder"]), DecoderConfig(**manifest["decoder"]),
                          VQConfig(**manifest["codebook"]))
    try:
        model.load_arrays(blocks)
    except (DataError, KeyError) as exc:
        raise CheckpointError(f"{directory}: {exc}") from exc
    return model


def save_encoder(model: PretrainModel, directory, extra: dict | None = None) -> str:
    manifest = {"kind": "pretrain", "encoder": _enc_cfg_dict(model.encoder.config),
                "k": model.classifier.config["k"], **(extra or {})}
    return storage.save_checkpoint(directory, model.arrays(), manifest)


def load_encoder(directory, expect: EncoderConfig | None = None) -> PretrainModel:
    blocks, manifest = storage.load_checkpoint(directory)
    if manifest.get("kind") != "pretrain":
        raise CheckpointError(f"{directory} is not a pre-trained encoder checkpoint")
    enc_cfg = _enc_from_dict(manifest["encoder"])
    if expect is not None and dataclasses.replace(expect, dtype=enc_cfg.dtype) != enc_cfg:
        raise CheckpointError(f"{directory}: checkpoint encoder {enc_cfg} does not match the configured {expect}")
    model = init_pretrain_model(enc_cfg, manifest["k"])
    try:
        model.load_arrays(blocks)
    except (DataError, KeyError) as exc:
        raise CheckpointError(f"{directory}: {exc}") from exc
    return model


# -- splits ------------------------------------------------------------------------------

def training_split(corpus: SentenceCorpus, valid_fraction: float, seed: int):
    """Train/valid views: the corpus's own tags when present, else a seeded hold-out."""
    if corpus.splits is not None:
        tr = corpus.split_indices("train")
        va = corpus.split_indices("valid")
    else:
        perm = substream(seed, "split.holdout").permutation(len(corpus))
        n_va = int(round(valid_fraction * len(corpus))) if len(corpus) > 1 else 0
        va, tr = np.sort(perm[:n_va]), np.sort(perm[n_va:])
    if tr.size == 0:
        raise DataError("training split is empty")
    return corpus.subset(tr), corpus.subset(va)


# -- train-vq ----------------------------------------------------------------------------

def cmd_train_vq(cfg: ExperimentConfig, corpus_dir, out=None) -> dict:
    out = _out(cfg, out, "vq")
    corpus = storage.read_corpus(corpus_dir)
    train, valid = training_split(corpus, cfg.vq.valid_fraction, cfg.seed)
    enc_cfg = cfg.vq_encoder_config()
    if corpus.l != enc_cfg.max_len or corpus.t != enc_cfg.patch_width:
        raise ConfigError(f"corpus is {corpus.l}x{corpus.t}, config expects {enc_cfg.max_len}x{enc_cfg.patch_width}")
    model = init_vq_model(enc_cfg, cfg.vq_decoder_config(), cfg.codebook_config(), cfg.seed)
    history = train_vq(model, train, valid, cfg.vq.optim, cfg.seed, out / "train_log.csv")
    corpus_digest = storage.corpus_hash(corpus_dir)
    digest = save_vq(model, out, {"corpus": corpus_digest, "seed": cfg.seed})
    _write_resolved(cfg, out)
    ev = evaluate_vq(model, valid if len(valid) else train)
    usage = usage_report(model.vocab, assign_indices(model, corpus)[~corpus.pad_mask])
    summary = {"dir": str(out), "checkpoint": digest, "epochs": len(history.rows),
               "first_valid_mse": history.rows[0].get("valid_reconstruction_mse"),
               "final_valid_mse": ev["reconstruction_mse"], "valid_loss_per_slot": ev["loss_per_slot"],
               "effective_size": usage["effective_size"], "perplexity": usage["perplexity"], "k": usage["k"]}
    storage.write_json(out / "summary.json", summary)
    return summary


# -- pretrain ----------------------------------------------------------------------------

def corpus_targets(vq_dir, corpus_dir, corpus: SentenceCorpus, cache_path):
    vq_hash = storage.checkpoint_hash(vq_dir)
    model = None

    def compute():
        nonlocal model
        model = load_vq(vq_dir)
        return assign_indices(model, corpus)

    return cached_targets(cache_path, vq_hash, storage.corpus_hash(corpus_dir), compute)


def cmd_pretrain(cfg: ExperimentConfig, corpus_dir, vq_dir, out=None) -> dict:
    out = _out(cfg, out, "pretrain")
    corpus = storage.read_corpus(corpus_dir)
    targets, hit = corpus_targets(vq_dir, corpus_dir, corpus, out / "targets.bin")
    k = storage.load_checkpoint(vq_dir)[1]["codebook"]["k"]
    if corpus.splits is not None:
        tr_idx, va_idx = corpus.split_indices("train"), corpus.split_indices("valid")
    else:
        perm = substream(cfg.seed, "split.holdout").permutation(len(corpus))
        n_va = int(round(cfg.vq.valid_fraction * len(corpus)))
        va_idx, tr_idx = np.sort(perm[:n_va]), np.sort(perm[n_va:])
    model = init_pretrain_model(cfg.encoder_config(), k, cfg.seed)
    history = train_pretrain(model, corpus.subset(tr_idx), targets[tr_idx], cfg.pretrain.optim,
                             cfg.pretrain.mask_ratio, cfg.seed, corpus.subset(va_idx), targets[va_idx],
                             out / "train_log.csv", monitor=cfg.pretrain.monitor_sentences)
    digest = save_encoder(model, out, {"vq_checkpoint": storage.checkpoint_hash(vq_dir),
                                       "corpus": storage.corpus_hash(corpus_dir), "seed": cfg.seed})
    _write_resolved(cfg, out)
    held = evaluate_masked(model, corpus.subset(va_idx), targets[va_idx], cfg.pretrain.mask_ratio, cfg.seed) \
        if len(va_idx) else {"accuracy": float("nan")}
    usage = usage_report(None, targets[tr_idx][~corpus.pad_mask[tr_idx]])
    summary = {"dir": str(out), "checkpoint": digest, "target_cache_hit": hit,
               "valid_masked_accuracy": held["accuracy"], "k_effective": usage["effective_size"],
               "chance": 1.0 / max(usage["effective_size"], 1), "epochs": len(history.rows)}
    storage.write_json(out / "summary.json", summary)
    return summary


# -- probe -------------------------------------------------------------------------------

def random_encoder(cfg: ExperimentConfig) -> EncoderState:
    return init_encoder(cfg.encoder_config(), cfg.seed, "init.pretrain.encoder")


def probe_rows(cfg: ExperimentConfig, corpus: SentenceCorpus, features: np.ndarray, task: str) -> list:
    if corpus.labels is None or corpus.splits is None:
        raise DataError("probing needs a labelled corpus with split tags")
    train_idx = corpus.split_indices("train")
    test = corpus.split_indices("test")
    rows = []
    for fraction in cfg.eval.fractions:
        for seed in cfg.eval.subset_seeds:
            subset = low_resource_subset(train_idx, fraction, seed)
            head = train_probe(features, corpus.labels, corpus.splits, cfg.eval.probe, seed, subset)
            test_auc = macro_auc_report(head.scores(features[test]), corpus.labels[test],
                                        corpus.class_names)["macro_auc"]
            rows.append({"task": task, "fraction": fraction, "seed": seed, "epoch_best": head.epoch,
                         "valid_auc": head.valid_auc, "test_auc": test_auc})
    return rows


def write_results(rows: list, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([r["task"], repr(float(r["fraction"])), r["seed"], r["epoch_best"],
                        f"{r['valid_auc']:.12f}", f"{r['test_auc']:.12f}"])


def read_results(path) -> list:
    with open(path, newline="") as fh:
        return [{**r, "fraction": float(r["fraction"]), "seed": int(r["seed"]), "epoch_best": int(r["epoch_best"]),
                 "valid_auc": float(r["valid_auc"]), "test_auc": float(r["test_auc"])}
                for r in csv.DictReader(fh)]


def cmd_probe(cfg: ExperimentConfig, corpus_dir, encoder_dir=None, out=None, task: str | None = None,
              extractor: FeatureExtractor | None = None) -> dict:
    """Linear probe per training fraction; ``encoder_dir=None`` probes a randomly initialised encoder."""
    out = _out(cfg, out, "probe")
    corpus = storage.read_corpus(corpus_dir)
    if encoder_dir is not None:
        encoder = load_encoder(encoder_dir, cfg.encoder_config()).encoder
        key = storage.checkpoint_hash(encoder_dir)
    else:
        encoder = random_encoder(cfg)
        key = f"random-seed{cfg.seed}-" + storage.tree_hash([])
    extractor = extractor or FeatureExtractor(out / "features")
    features = extractor(corpus, encoder, key, cfg.eval.pooling)
    task = task or ("pretrained" if encoder_dir is not None else "random_init")
    rows = probe_rows(cfg, corpus, features, task)
    write_results(rows, out / RESULTS_FILE)
    _write_resolved(cfg, out)
    storage.write_json(out / "manifest.json", {"corpus": storage.corpus_hash(corpus_dir), "encoder": key,
                                               "task": task, "config": cfg.to_dict()})
    return {"dir": str(out), "rows": rows, "encoder_runs": extractor.encoder_runs}


# -- export-vocab ------------------------------------------------------------------------

def cmd_export_vocab(cfg: ExperimentConfig, vq_dir, corpus_dir, out=None, exemplars: int = 3) -> dict:
    """Codeword usage histogram and the first few assigned patches per codeword."""
    out = _out(cfg, out, "vocab")
    model = load_vq(vq_dir)
    corpus = storage.read_corpus(corpus_dir)
    idx = assign_indices(model, corpus)
    real = ~corpus.pad_mask
    report = usage_report(model.vocab, idx[real])
    with open(out / "usage.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["codeword", "count"])
        for j, n in enumerate(report["histogram"]):
            w.writerow([j, int(n)])
    taken = Counter()
    with open(out / "exemplars.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["codeword", "record_id", "slot", *[f"x{i}" for i in range(corpus.t)]])
        for s, slot in zip(*np.nonzero(real)):
            j = int(idx[s, slot])
            if taken[j] >= exemplars:
                continue
            taken[j] += 1
            w.writerow([j, corpus.record_ids[s], int(slot), *[repr(float(v)) for v in corpus.words[s, slot]]])
    summary = {"dir": str(out), "effective_size": report["effective_size"], "perplexity": report["perplexity"],
               "k": report["k"], "n_assignments": report["n_assignments"]}
    storage.write_json(out / "summary.json", summary)
    return summary


def read_exemplars(path) -> list:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [(int(row[0]), row[1], int(row[2]), np.asarray([float(v) for v in row[3:]], dtype=np.float32))
                for row in r]


# -- composite runs ----------------------------------------------------------------------

def run_arm(cfg: ExperimentConfig, records_dir, arm_dir: Path, mode: str, extractor=None,
            with_random: bool = True) -> dict:
    """tokenize -> train-vq -> pretrain -> probe for one tokenizer mode."""
    corpus_dir = arm_dir / "corpus"
    tok = cmd_tokenize(cfg, records_dir, corpus_dir, mode=mode, lead_config=cfg.eval.lead_config)
    vq = cmd_train_vq(cfg, corpus_dir, arm_dir / "vq")
    pre = cmd_pretrain(cfg, corpus_dir, arm_dir / "vq", arm_dir / "pretrain")
    probe = cmd_probe(cfg, corpus_dir, arm_dir / "pretrain", arm_dir / "probe", task=f"{mode}/pretrained",
                      extractor=extractor)
    rows = list(probe["rows"])
    if with_random:
        rnd = cmd_probe(cfg, corpus_dir, None, arm_dir / "probe_random", task=f"{mode}/random_init",
                        extractor=extractor)
        rows += rnd["rows"]
    return {"tokenize": tok, "vq": vq, "pretrain": pre, "rows": rows}


def cmd_run(cfg: ExperimentConfig, out=None, modes=("heartbeat",), with_random: bool = True) -> dict:
    """Whole pipeline from synthetic records to the results CSV."""
    out = _out(cfg, out, "")
    synth = cmd_synth(cfg, out / "records")
    arms = {m: run_arm(cfg, out / "records", out / m, m, with_random=with_random) for m in modes}
    rows = [r for a in arms.values() for r in a["rows"]]
    write_results(rows, out / RESULTS_FILE)
    _write_resolved(cfg, out)
    storage.write_json(out / "manifest.json", {"config": cfg.to_dict(), "synth": synth,
                                               "arms": {m: {k: v for k, v in a.items() if k != "rows"}
                                                        for m, a in arms.items()}})
    return {"dir": str(out), "synth": synth, "arms": arms, "rows": rows}


def cmd_compare_slicing(cfg: ExperimentConfig, out=None) -> dict:
    """Heartbeat versus fixed-window sentences, each through the full pipeline."""
    res = cmd_run(cfg, out, modes=("heartbeat", "fixed_window"), with_random=False)
    report = []
    for f in cfg.eval.fractions:
        entry = {"fraction": f}
        for mode in ("heartbeat", "fixed_window"):
            vals = [r["test_auc"] for r in res["rows"] if r["task"] == f"{mode}/pretrained" and r["fraction"] == f]
            entry[mode] = float(np.mean(vals))
        entry["gap"] = entry["heartbeat"] - entry["fixed_window"]
        report.append(entry)
    out_dir = Path(res["dir"])
    with open(out_dir / "slicing_report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "heartbeat_auc", "fixed_window_auc", "gap"])
        for e in report:
            w.writerow([repr(float(e["fraction"])), f"{e['heartbeat']:.12f}", f"{e['fixed_window']:.12f}",
                        f"{e['gap']:.12f}"])
    res["slicing"] = report
    return res


def set_deterministic(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.deterministic:
        os.environ.setdefault("PYTHONHASHSEED", "0")
        return dataclasses.replace(cfg, workers=1)
    return cfg

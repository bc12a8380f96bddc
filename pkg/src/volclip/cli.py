"""Single entry point for every pipeline stage.

Config precedence is defaults < --config file < CTCLIP_* environment <
--override flags; each run writes the resolved snapshot (config.json) and a
machine-readable summary (run.json) into its output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import corpus as corpusmod
from . import finetune, labeler, report, retrieval, service, stats, training, volio, zeroshot
from .corpus import AbnormalityVocab, check_split_hygiene, load_corpus, training_text
from .encoders import build_model, load_checkpoint, save_checkpoint
from .errors import VolclipError
from .tokenizer import WordTokenizer
from .volume import preprocess

logger = logging.getLogger("volclip")

SUBCOMMANDS = (
    "preprocess", "train", "sweep-prompts", "finetune-vocab", "finetune-lipro",
    "infer-zeroshot", "extract-labels", "build-index", "retrieve", "eval",
    "ablate-fraction", "export-embeddings", "serve",
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (JSON or key=value lines)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output directory", default=None)
    parser.add_argument("--override", action="append", default=[], metavar="K=V",
                        help="config override, repeatable (dotted keys)")


def _resolve(args) -> dict:
    return cfgmod.resolve_config(args.config, args.override, args.seed)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_vocab(args) -> AbnormalityVocab:
    if getattr(args, "vocab", None):
        return AbnormalityVocab.from_file(args.vocab)
    from importlib import resources

    names = [
        line.strip()
        for line in resources.files("volclip.data").joinpath("vocab18.txt")
        .read_text().splitlines() if line.strip()
    ]
    return AbnormalityVocab(tuple(names))


def _split_corpus(corpus, split: str):
    if split == "all":
        return corpus
    return corpus.subset(split)


def _embed_volumes(model, dataset) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(dataset), 8):
            batch = dataset.batch(range(start, min(start + 8, len(dataset))))
            out.append(model.embed_volumes(batch.volumes).numpy())
    return np.concatenate(out, axis=0)


def _embed_texts(model, dataset) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(dataset), 32):
            batch = dataset.batch(range(start, min(start + 32, len(dataset))))
            out.append(model.embed_texts(batch.token_ids, batch.masks).numpy())
    return np.concatenate(out, axis=0)


def _zero_shot_scores(model, tokenizer, dataset, vocab, template, temperature):
    encoder = zeroshot.make_text_encoder(model, tokenizer)
    pos_bank, neg_bank = zeroshot.embed_prompt_bank(vocab, template, encoder)
    volume_embeddings = _embed_volumes(model, dataset)
    return zeroshot.detect_matrix(volume_embeddings, pos_bank, neg_bank, temperature)


def _temperature(config, model) -> float:
    return model.temperature if config["zeroshot"]["use_learned_temperature"] else 1.0


def _require_labels(dataset, what: str) -> np.ndarray:
    if dataset.labels is None:
        raise VolclipError(f"{what} needs label vectors in the manifest")
    return dataset.labels


def _write_run(out_dir: Path, args, outputs, started: float) -> None:
    summary = {
        "subcommand": args.subcommand,
        "argv": sys.argv[1:],
        "outputs": [str(o) for o in outputs],
        "seed": getattr(args, "seed", None),
        "status": "ok",
        "duration_s": round(time.time() - started, 3),
    }
    (out_dir / "run.json").write_text(json.dumps(summary, indent=2) + "\n")


# ---------------------------------------------------------------- commands


def cmd_preprocess(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/preprocess")
    cfgmod.write_snapshot(config, out_dir)
    geometry = cfgmod.geometry_from(config)
    vocab = _load_vocab(args)
    corpus = load_corpus(args.manifest, vocab)
    offenders = check_split_hygiene(corpus)
    if offenders:
        raise VolclipError(f"patients in both splits: {sorted(offenders)[:5]}")
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(exist_ok=True)
    rows = []
    for record in corpus:
        grid = volio.load_volume(record.volume_path)
        processed = preprocess(grid, geometry)
        cached = vol_dir / f"{record.study_id}.vol"
        volio.save_volume(processed, cached)
        row = {
            "study_id": record.study_id,
            "patient_id": record.patient_id,
            "volume_path": str(cached),
            "findings": record.report.findings,
            "impression": record.report.impression,
            "clinical_information": record.report.clinical_information,
            "technique": record.report.technique,
            "labels": corpusmod.labels_to_text(record.labels) if record.labels is not None else "",
            "split": record.split,
        }
        rows.append(row)
    manifest_out = out_dir / "manifest.jsonl"
    corpusmod.write_manifest(rows, manifest_out)
    print(f"preprocessed {len(rows)} volumes -> {manifest_out}")
    return 0


def _prepare_training(args, config, split="train"):
    geometry = cfgmod.geometry_from(config)
    vocab = _load_vocab(args)
    corpus = load_corpus(args.manifest, vocab)
    offenders = check_split_hygiene(corpus)
    if offenders:
        raise VolclipError(f"patients in both splits: {sorted(offenders)[:5]}")
    train_cfg = cfgmod.train_config_from(config)
    sub = _split_corpus(corpus, split)
    if train_cfg.fraction < 1.0:
        sub = corpusmod.sample_fraction(sub, train_cfg.fraction, train_cfg.seed)
    return geometry, vocab, corpus, sub, train_cfg


def _make_tokenizer(corpus, text_mode):
    return WordTokenizer.train(training_text(r, text_mode) for r in corpus)


def cmd_train(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/train")
    cfgmod.write_snapshot(config, out_dir)
    geometry, vocab, _, sub, train_cfg = _prepare_training(args, config)
    tokenizer = _make_tokenizer(sub, train_cfg.text_mode)
    model = build_model(
        geometry.shape,
        cfgmod.patch_config_from(config),
        cfgmod.text_config_from(config, tokenizer.vocab_size),
        config["shared_dim"],
        train_cfg.temperature_init,
        seed=train_cfg.seed,
    )
    dataset = training.build_pair_dataset(sub, tokenizer, geometry,
                                          train_cfg.text_mode,
                                          model.text.cfg.max_len)
    history = training.fit(model, dataset, train_cfg, out_dir=out_dir,
                           resume=args.resume)
    ckpt = out_dir / "checkpoint.pt"
    save_checkpoint(ckpt, model, tokenizer, regime="clip",
                    vocab_names=vocab.names,
                    extra={"train_config": vars(train_cfg)})
    tokenizer.save(out_dir / "tokenizer.tsv")
    if history:
        report.save_loss_figure(history, out_dir / "loss.png")
        report.write_csv(history, out_dir / "loss.csv")
    print(f"trained {train_cfg.steps} steps -> {ckpt}")
    return 0


def cmd_sweep_prompts(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/sweep")
    cfgmod.write_snapshot(config, out_dir)
    model, tokenizer, meta = load_checkpoint(args.checkpoint)
    geometry = cfgmod.geometry_from(config)
    vocab = _load_vocab(args)
    corpus = _split_corpus(load_corpus(args.manifest, vocab), args.split)
    dataset = training.build_pair_dataset(corpus, tokenizer, geometry,
                                          config["train"]["text_mode"],
                                          model.text.cfg.max_len)
    truths = _require_labels(dataset, "prompt sweep")
    encoder = zeroshot.make_text_encoder(model, tokenizer)
    volume_embeddings = _embed_volumes(model, dataset)
    rows = zeroshot.prompt_sweep(volume_embeddings, truths, vocab,
                                 zeroshot.load_templates(args.templates),
                                 encoder, _temperature(config, model))
    report.write_csv(rows, out_dir / "sweep.csv")
    (out_dir / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    report.save_sweep_figure(rows, out_dir / "sweep.png")
    best = next(r for r in rows if r["best"])
    print(f"best prompt by accuracy: {best['template_id']} "
          f"(accuracy={best['mean_accuracy']:.4f}) -> {out_dir / 'sweep.csv'}")
    return 0


def cmd_finetune_vocab(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/vocabfine")
    cfgmod.write_snapshot(config, out_dir)
    model, tokenizer, meta = load_checkpoint(args.checkpoint)
    geometry = cfgmod.geometry_from(config)
    vocab = _load_vocab(args)
    corpus = _split_corpus(load_corpus(args.manifest, vocab), "train")
    dataset = training.build_pair_dataset(corpus, tokenizer, geometry,
                                          config["train"]["text_mode"],
                                          model.text.cfg.max_len)
    _require_labels(dataset, "vocabfine")
    ft = config["finetune"]
    cfg = finetune.FinetuneConfig(
        steps=ft["steps"], batch_size=ft["batch_size"],
        learning_rate=ft["learning_rate"], weight_decay=ft["weight_decay"],
        seed=config["train"]["seed"], chunk_size=ft["chunk_size"],
        chunk_step_mode=ft["chunk_step_mode"], train_scope=ft["train_scope"],
    )
    template = zeroshot.template_by_id(zeroshot.load_templates(args.templates), args.template)
    history = finetune.vocabfine_train(model, tokenizer, vocab, template, dataset, cfg)
    ckpt = out_dir / "checkpoint.pt"
    save_checkpoint(ckpt, model, tokenizer, regime="vocabfine",
                    freeze_flags={"train_scope": cfg.train_scope},
                    vocab_names=vocab.names,
                    extra={"template_id": args.template})
    if history:
        report.save_loss_figure(history, out_dir / "loss.png")
        report.write_csv(history, out_dir / "loss.csv")
    print(f"vocabfine done ({cfg.steps} steps, template {args.template}) -> {ckpt}")
    return 0


def cmd_finetune_lipro(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/lipro")
    cfgmod.write_snapshot(config, out_dir)
    model, tokenizer, meta = load_checkpoint(args.checkpoint)
    geometry = cfgmod.geometry_from(config)
    vocab = _load_vocab(args)
    corpus = _split_corpus(load_corpus(args.manifest, vocab), "train")
    dataset = training.build_pair_dataset(corpus, tokenizer, geometry,
                                          config["train"]["text_mode"],
                                          model.text.cfg.max_len)
    _require_labels(dataset, "lipro")
    ft = config["finetune"]
    cfg = finetune.FinetuneConfig(
        steps=ft["steps"], batch_size=ft["batch_size"],
        learning_rate=ft["learning_rate"], weight_decay=ft["weight_decay"],
        seed=config["train"]["seed"], freeze_backbone=ft["freeze_backbone"],
    )
    lipro = finetune.lipro_train(model, dataset, vocab.size, cfg)
    ckpt = out_dir / "checkpoint.pt"
    save_checkpoint(ckpt, model, tokenizer, regime="lipro",
                    freeze_flags={"freeze_backbone": cfg.freeze_backbone},
                    head_state={k: v for k, v in lipro.head.state_dict().items()},
                    vocab_names=vocab.names)
    print(f"lipro done ({cfg.steps} steps, freeze_backbone={cfg.freeze_backbone}) -> {ckpt}")
    return 0


def _predictions_for_checkpoint(args, config, split: str):
    """ScoredPredictions for a checkpoint of any regime on one split."""
    model, tokenizer, meta = load_checkpoint(args.checkpoint)
    geometry = cfgmod.geometry_from(config)
    vocab = _load_vocab(args)
    corpus = _split_corpus(load_corpus(args.manifest, vocab), split)
    dataset = training.build_pair_dataset(corpus, tokenizer, geometry,
                                          config["train"]["text_mode"],
                                          model.text.cfg.max_len)
    truths = _require_labels(dataset, "evaluation")
    if meta.regime == "lipro":
        head = finetune.LiProHead(model.shared_dim, vocab.size)
        head.linear.load_state_dict(
            {k.replace("linear.", ""): v for k, v in meta.head_state.items()}
        )
        emb = _embed_volumes(model, dataset)
        probs = finetune.lipro_forward(emb, head)
    else:
        template = zeroshot.template_by_id(zeroshot.load_templates(args.templates), args.template)
        probs = _zero_shot_scores(model, tokenizer, dataset, vocab, template,
                                  _temperature(config, model))
    pred = stats.ScoredPredictions(vocab.names, probs.T, truths.T,
                                   model_tag=meta.regime)
    return pred, dataset, vocab


def cmd_infer_zeroshot(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/zeroshot")
    cfgmod.write_snapshot(config, out_dir)
    model, tokenizer, meta = load_checkpoint(args.checkpoint)
    geometry = cfgmod.geometry_from(config)
    vocab = _load_vocab(args)
    corpus = _split_corpus(load_corpus(args.manifest, vocab), args.split)
    dataset = training.build_pair_dataset(corpus, tokenizer, geometry,
                                          config["train"]["text_mode"],
                                          model.text.cfg.max_len)
    template = zeroshot.template_by_id(zeroshot.load_templates(args.templates), args.template)
    probs = _zero_shot_scores(model, tokenizer, dataset, vocab, template,
                              _temperature(config, model))
    scores_path = out_dir / "scores.csv"
    with scores_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["study_id"] + list(vocab.names))
        for sid, row in zip(dataset.study_ids, probs):
            writer.writerow([sid] + [f"{p:.6f}" for p in row])
    outputs = [scores_path]
    if dataset.labels is not None:
        pred = stats.ScoredPredictions(vocab.names, probs.T, dataset.labels.T,
                                       model_tag="zeroshot")
        rep = stats.compute_report(
            pred, config["eval"]["bootstrap_iterations"],
            config["eval"]["permutations"], config["train"]["seed"],
            config["eval"]["threshold_method"],
        )
        rep.to_json(out_dir / "metrics.json")
        rep.to_csv(out_dir / "metrics.csv")
        report.save_metrics_figure(rep, out_dir / "metrics.png")
        outputs += [out_dir / "metrics.json"]
    print(f"zero-shot scores for {len(dataset.study_ids)} studies -> {scores_path}")
    return 0


def cmd_extract_labels(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/labels")
    cfgmod.write_snapshot(config, out_dir)
    vocab = _load_vocab(args)
    rules = labeler.RuleSet.from_file(args.rules)
    corpus = load_corpus(args.manifest, vocab)
    out_path = out_dir / "labels.jsonl"
    with out_path.open("w") as handle:
        for record in corpus:
            vector = labeler.extract_labels(record.report, rules, vocab)
            handle.write(json.dumps({
                "study_id": record.study_id,
                "labels": corpusmod.labels_to_text(vector),
            }) + "\n")
    print(f"extracted labels for {len(corpus)} reports -> {out_path}")
    if args.gold:
        scores = labeler.eval_extractor(labeler.load_gold_records(args.gold),
                                        rules, vocab)
        (out_dir / "extractor_eval.json").write_text(json.dumps(scores, indent=2) + "\n")
        mean_f1 = float(np.mean([s["f1"] for s in scores.values()]))
        print(f"extractor mean F1 vs gold: {mean_f1:.4f}")
    return 0


def cmd_build_index(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/index")
    cfgmod.write_snapshot(config, out_dir)
    model, tokenizer, meta = load_checkpoint(args.checkpoint)
    geometry = cfgmod.geometry_from(config)
    vocab = _load_vocab(args)
    corpus = _split_corpus(load_corpus(args.manifest, vocab), args.split)
    dataset = training.build_pair_dataset(corpus, tokenizer, geometry,
                                          config["train"]["text_mode"],
                                          model.text.cfg.max_len)
    embeddings = _embed_volumes(model, dataset)
    index = retrieval.build_index(
        dataset.study_ids, embeddings, dataset.labels, vocab.names,
        encoder_tag=f"{meta.regime}:{Path(args.checkpoint).name}",
    )
    index_path = Path(args.index_out or (out_dir / "index.vcix"))
    retrieval.save_index(index, index_path)
    print(f"indexed {len(index)} volumes -> {index_path}")
    return 0


def cmd_retrieve(args) -> int:
    config = _resolve(args)
    index = retrieval.load_index(args.index)
    if args.text:
        model, tokenizer, _ = load_checkpoint(args.checkpoint)
        encoder = zeroshot.make_text_encoder(model, tokenizer)
        result = retrieval.query_by_text(index, args.text, args.k, encoder)
    elif args.study_id:
        result = retrieval.query_by_volume(index, args.study_id, args.k)
    else:
        raise VolclipError("retrieve needs --text or --study-id")
    payload = {
        "query_kind": result.query_kind,
        "results": [{"study_id": s, "score": round(v, 6)} for s, v in result.ranked],
    }
    print(json.dumps(payload, indent=2))
    if args.out:
        out_dir = _out_dir(args, "out/retrieve")
        (out_dir / "results.json").write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def _load_score_csv(path, vocab, study_ids):
    """External predictions (e.g. a supervised baseline) as study_id +
    one score column per abnormality, aligned to the evaluated studies."""
    by_id = {}
    with Path(path).open() as handle:
        reader = csv.DictReader(handle)
        missing = [n for n in vocab.names if n not in (reader.fieldnames or ())]
        if missing:
            raise VolclipError(f"{path}: missing score columns {missing[:3]}")
        for row in reader:
            by_id[row["study_id"]] = [float(row[n]) for n in vocab.names]
    absent = [s for s in study_ids if s not in by_id]
    if absent:
        raise VolclipError(f"{path}: no scores for studies {absent[:3]}")
    return np.array([by_id[s] for s in study_ids], dtype=np.float64)


def cmd_eval(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/eval")
    cfgmod.write_snapshot(config, out_dir)
    pred, dataset, vocab = _predictions_for_checkpoint(args, config, args.split)
    baselines = {}
    for item in args.compare or ():
        tag, _, path = item.partition("=")
        if not path:
            raise VolclipError("--compare expects tag=scores.csv")
        scores = _load_score_csv(path, vocab, dataset.study_ids)
        baselines[tag] = stats.ScoredPredictions(vocab.names, scores.T,
                                                 dataset.labels.T, model_tag=tag)
    rep = stats.compute_report(
        pred, config["eval"]["bootstrap_iterations"],
        config["eval"]["permutations"], config["train"]["seed"],
        config["eval"]["threshold_method"], baselines=baselines or None,
    )
    rep.to_json(out_dir / "metrics.json")
    rep.to_csv(out_dir / "metrics.csv")
    report.save_metrics_figure(rep, out_dir / "metrics.png")
    curves = {
        name: stats.roc_curve(pred.scores[i], pred.truths[i])
        for i, name in enumerate(vocab.names)
    }
    report.save_roc_figure(curves, out_dir / "roc.png")
    print(f"mean AUROC {rep.means['auroc']:.4f} -> {out_dir / 'metrics.json'}")
    return 0


def cmd_ablate_fraction(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/ablation")
    cfgmod.write_snapshot(config, out_dir)
    fractions = [float(f) for f in args.fractions.split(",")]
    geometry, vocab, corpus, _, train_cfg = _prepare_training(args, config)
    valid = corpus.subset("valid")
    template = zeroshot.template_by_id(zeroshot.load_templates(args.templates), args.template)

    def evaluate(model, tokenizer):
        dataset = training.build_pair_dataset(valid, tokenizer, geometry,
                                              train_cfg.text_mode,
                                              model.text.cfg.max_len)
        if dataset.labels is None:
            return {}
        probs = _zero_shot_scores(model, tokenizer, dataset, vocab, template,
                                  _temperature(config, model))
        pred = stats.ScoredPredictions(vocab.names, probs.T, dataset.labels.T)
        mean, std = stats.bootstrap_std(pred, "auroc",
                                        config["eval"]["bootstrap_iterations"],
                                        train_cfg.seed)
        return {"mean_auroc": stats.mean_auroc(pred), "mean_auroc_std": std}

    def build_fn(tokenizer):
        return build_model(
            geometry.shape, cfgmod.patch_config_from(config),
            cfgmod.text_config_from(config, tokenizer.vocab_size),
            config["shared_dim"], train_cfg.temperature_init, seed=train_cfg.seed,
        )

    rows = training.run_ablation(
        corpus, fractions, train_cfg, build_fn,
        lambda sub: _make_tokenizer(sub, train_cfg.text_mode),
        geometry, evaluate_fn=evaluate, out_dir=out_dir,
    )
    report.write_csv(rows, out_dir / "ablation.csv")
    report.save_fraction_figure(rows, out_dir / "ablation.png")
    print(f"ablation over {fractions} -> {out_dir / 'ablation.csv'}")
    return 0


def cmd_export_embeddings(args) -> int:
    config = _resolve(args)
    out_dir = _out_dir(args, "out/embeddings")
    cfgmod.write_snapshot(config, out_dir)
    model, tokenizer, _ = load_checkpoint(args.checkpoint)
    geometry = cfgmod.geometry_from(config)
    vocab = _load_vocab(args)
    corpus = _split_corpus(load_corpus(args.manifest, vocab), args.split)
    out_path = Path(args.embeddings_out or (out_dir / "embeddings.csv"))
    rows = stats.export_embeddings(corpus, model, tokenizer, geometry, out_path,
                                   config["train"]["text_mode"])
    print(f"exported {rows} embedding rows -> {out_path}")
    return 0


def cmd_serve(args) -> int:
    config = _resolve(args)
    index = retrieval.load_index(args.index)
    encoder = None
    if args.checkpoint:
        model, tokenizer, _ = load_checkpoint(args.checkpoint)
        encoder = zeroshot.make_text_encoder(model, tokenizer)
    volumes = None
    if args.manifest:
        vocab = _load_vocab(args)
        volumes = service.VolumeStore.from_manifest(load_corpus(args.manifest, vocab))
    service.serve(index, encoder, volumes, host=args.host, port=args.port)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volclip",
        description="contrastive CT volume-report pretraining, zero-shot "
                    "detection, fine-tuning, retrieval, and evaluation",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        _add_common(p)
        p.set_defaults(fn=fn)
        return p

    p = add("preprocess", cmd_preprocess, help="preprocess raw volumes to the target grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")

    p = add("train", cmd_train, help="contrastive pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--resume", action="store_true")

    p = add("sweep-prompts", cmd_sweep_prompts, help="evaluate all prompt templates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--split", default="valid")
    p.add_argument("--templates", default=None, help="templates data file override")

    p = add("finetune-vocab", cmd_finetune_vocab, help="open-vocabulary fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--template", type=int, default=7)
    p.add_argument("--templates", default=None)

    p = add("finetune-lipro", cmd_finetune_lipro, help="linear-probe fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")

    p = add("infer-zeroshot", cmd_infer_zeroshot, help="zero-shot probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--split", default="valid")
    p.add_argument("--template", type=int, default=7)
    p.add_argument("--templates", default=None)

    p = add("extract-labels", cmd_extract_labels, help="rule-based report labeling")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--rules", default=None, help="rules JSON override")
    p.add_argument("--gold", default=None, help="gold annotations JSONL for evaluation")

    p = add("build-index", cmd_build_index, help="build the retrieval index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--split", default="valid")
    p.add_argument("--index-out", dest="index_out", default=None)

    p = add("retrieve", cmd_retrieve, help="query an index")
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--study-id", dest="study_id")
    p.add_argument("--text")
    p.add_argument("--checkpoint", help="needed for --text queries")

    p = add("eval", cmd_eval, help="metrics report with bootstrap and p-values")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--split", default="valid")
    p.add_argument("--template", type=int, default=7)
    p.add_argument("--templates", default=None)
    p.add_argument("--compare", action="append", metavar="TAG=SCORES.CSV",
                   help="baseline predictions for pairwise permutation tests")

    p = add("ablate-fraction", cmd_ablate_fraction, help="dataset-size ablation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--fractions", default="0.098,0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--template", type=int, default=7)
    p.add_argument("--templates", default=None)

    p = add("export-embeddings", cmd_export_embeddings, help="embedding CSV for t-SNE tools")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--split", default="all")
    p.add_argument("--embeddings-out", dest="embeddings_out", default=None)

    p = add("serve", cmd_serve, help="run the retrieval HTTP service")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", help="enables text queries")
    p.add_argument("--manifest", help="enables volume meta/slice endpoints")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        code = args.fn(args)
    except VolclipError as exc:
        error = {"error": type(exc).__name__, "message": str(exc),
                 "subcommand": args.subcommand}
        print(json.dumps(error), file=sys.stderr)
        return 1
    if args.out:
        out_dir = Path(args.out)
        if out_dir.is_dir():
            _write_run(out_dir, args, [], started)
    return code


if __name__ == "__main__":
    raise SystemExit(main())

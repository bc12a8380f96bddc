"""Prototype for the synthetic end-to-end acceptance path; not shipped."""
import sys
import tempfile
import time

import numpy as np
import torch

from volclip import synthetic, training, zeroshot, stats, retrieval, finetune
from volclip.corpus import AbnormalityVocab, load_corpus
from volclip.encoders import PatchConfig, TextConfig, build_model
from volclip.tokenizer import WordTokenizer
from volclip.training import TrainConfig, build_pair_dataset, fit
from volclip.volume import TargetGeometry

t0 = time.time()
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-3
seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0

with tempfile.TemporaryDirectory() as td:
    data = synthetic.generate(td, synthetic.SyntheticConfig(seed=seed))
    vocab = AbnormalityVocab.from_file(data.vocab_path)
    corpus = load_corpus(data.manifest_path, vocab)
    geometry = TargetGeometry(spacing_mm=(1.5, 1.5, 3.0), shape=(48, 48, 24))
    train_corpus = corpus.subset("train")
    valid_corpus = corpus.subset("valid")
    from volclip.corpus import training_text
    tokenizer = WordTokenizer.train(training_text(r, "both") for r in train_corpus)
    print(f"tokenizer vocab: {tokenizer.vocab_size}")
    model = build_model(
        geometry.shape,
        PatchConfig(patch_xyz=(12, 12, 6), embed_dim=int(sys.argv[6]) if len(sys.argv) > 6 else 64, depth_spatial=2,
                    depth_temporal=2, heads=4),
        TextConfig(vocab_size=tokenizer.vocab_size, max_len=64, embed_dim=64,
                   depth=2, heads=4),
        shared_dim=128, temperature_init=0.07, seed=seed,
    )
    tds = build_pair_dataset(train_corpus, tokenizer, geometry, "both", 64, text_variants=8, sentence_keep_prob=0.4, variant_seed=seed)
    vds = build_pair_dataset(valid_corpus, tokenizer, geometry, "both", 64)
    print(f"data built at {time.time()-t0:.1f}s")
    cfg = TrainConfig(batch_size=int(sys.argv[7]) if len(sys.argv) > 7 else 8, steps=steps, learning_rate=lr, seed=seed, noise_augment=float(sys.argv[4]) if len(sys.argv) > 4 else 0.0, shift_augment=int(sys.argv[5]) if len(sys.argv) > 5 else 0)
    history = fit(model, tds, cfg)
    print(f"train done at {time.time()-t0:.1f}s; loss {history[0]['loss']:.3f} -> {history[-1]['loss']:.4f}")

    model.eval()
    def embed_vols(ds):
        with torch.no_grad():
            return np.concatenate([
                model.embed_volumes(ds.batch(range(s, min(s+8, len(ds)))).volumes).numpy()
                for s in range(0, len(ds), 8)])
    def embed_txts(ds):
        with torch.no_grad():
            return np.concatenate([
                model.embed_texts(ds.batch(range(s, min(s+16, len(ds)))).token_ids,
                                   ds.batch(range(s, min(s+16, len(ds)))).masks).numpy()
                for s in range(0, len(ds), 16)])

    v_train = embed_vols(tds); t_train = embed_txts(tds)
    index = retrieval.build_index(tds.study_ids, v_train, tds.labels, vocab.names)
    queries = [(t_train[i], tds.study_ids[i]) for i in range(len(tds))]
    r1 = retrieval.recall_at_k(queries, index, 1)
    r5 = retrieval.recall_at_k(queries, index, 5)
    print(f"train recall@1={r1.value:.3f} recall@5={r5.value:.3f}")

    v_valid = embed_vols(vds)
    encoder = zeroshot.make_text_encoder(model, tokenizer)
    temp = model.temperature
    rows = zeroshot.prompt_sweep(v_valid, vds.labels, vocab,
                                 zeroshot.load_templates(), encoder, temp)
    for row in rows:
        flag = "*" if row["best"] else " "
        print(f"  t{row['template_id']}{flag} auroc={row['mean_auroc']:.3f} acc={row['mean_accuracy']:.3f}")
    best_t = next(r for r in rows if r["best"])
    print(f"temperature={temp:.4f}")

    # zero-shot predictions with best template on valid
    template = zeroshot.template_by_id(zeroshot.load_templates(), best_t["template_id"])
    pos, neg = zeroshot.embed_prompt_bank(vocab, template, encoder)
    probs = zeroshot.detect_matrix(v_valid, pos, neg, temp)
    pred_zs = stats.ScoredPredictions(vocab.names, probs.T, vds.labels.T, "zeroshot")
    zs_auroc = stats.mean_auroc(pred_zs)
    from volclip.stats import auroc as _auroc
    print("  zs per-label:", {n: round(_auroc(probs.T[i], vds.labels.T[i]), 3) for i, n in enumerate(vocab.names)})
    _, zs_std = stats.bootstrap_std(pred_zs, "auroc", 200, seed)
    print(f"zero-shot valid mean AUROC = {zs_auroc:.4f} (std {zs_std:.4f}) at {time.time()-t0:.1f}s")

    # vocabfine
    import copy
    vf_model = copy.deepcopy(model)
    vf_cfg = finetune.FinetuneConfig(steps=40, batch_size=8, learning_rate=1e-4,
                                     seed=seed, chunk_size=4)
    finetune.vocabfine_train(vf_model, tokenizer, vocab, template, tds, vf_cfg)
    vf_model.eval()
    enc2 = zeroshot.make_text_encoder(vf_model, tokenizer)
    with torch.no_grad():
        v_valid2 = np.concatenate([
            vf_model.embed_volumes(vds.batch(range(s, min(s+8, len(vds)))).volumes).numpy()
            for s in range(0, len(vds), 8)])
    pos2, neg2 = zeroshot.embed_prompt_bank(vocab, template, enc2)
    probs2 = zeroshot.detect_matrix(v_valid2, pos2, neg2, vf_model.temperature)
    vf_auroc = stats.mean_auroc(stats.ScoredPredictions(vocab.names, probs2.T, vds.labels.T))
    print(f"vocabfine valid mean AUROC = {vf_auroc:.4f} at {time.time()-t0:.1f}s")

    # lipro
    lp_model = copy.deepcopy(model)
    lp_cfg = finetune.FinetuneConfig(steps=300, batch_size=16, learning_rate=1e-2,
                                     seed=seed, freeze_backbone=True)
    lipro = finetune.lipro_train(lp_model, tds, vocab.size, lp_cfg)
    lp_probs = np.concatenate([
        lipro.predict_proba(vds.batch(range(s, min(s+8, len(vds)))).volumes)
        for s in range(0, len(vds), 8)])
    lp_auroc = stats.mean_auroc(stats.ScoredPredictions(vocab.names, lp_probs.T, vds.labels.T))
    print(f"lipro valid mean AUROC = {lp_auroc:.4f}")
    print("  lipro per-label:", {n: round(_auroc(lp_probs.T[i], vds.labels.T[i]), 3) for i, n in enumerate(vocab.names)})
    print(f"TOTAL {time.time()-t0:.1f}s")
    ok = r1.value == 1.0 and zs_auroc >= 0.90 and vf_auroc >= zs_auroc - zs_std and lp_auroc >= zs_auroc - zs_std
    print("ACCEPTANCE-BAR:", "PASS" if ok else "FAIL")

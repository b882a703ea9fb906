"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

These are property-based and directional toy experiments sized for a CPU desk
run; production-scale numbers are out of reach by design, so every check here is
about correctness of the mechanisms, not leaderboard values.
"""

import itertools
import json
import math
import random
import string
import subprocess
import sys
import time
from hashlib import sha256
from pathlib import Path

import numpy as np
import pytest
import torch

from aerolite.bridge import BridgeMlp
from aerolite.corpus import (
    CaptionRecord, FrequencyTable, LexiconTagger, PolygonRecord, StubProvider,
    TagVocabulary, build_prompt, corpus_tag_set, extract_tags, filter_vocabulary,
)
from aerolite.lm import (
    LmConfig, LoraConfig, LoraLinear, TinyLm, WordTokenizer, assemble_prompt,
    caption_loss, decode, set_tuning_regime, with_adapters,
)
from aerolite.metrics import EvalPair, bleu, meteor, rouge_l, stem
from aerolite.taghead import TagPrediction, TagTarget, bce_loss, retrieval_metrics, sigmoid
from aerolite.trainer import (
    CaptionPipeline, Sample, TrainingConfig, early_stop, fit, train_step,
)
from oracles import bleu_oracle, check_grads, meteor_oracle, retrieval_oracle, rouge_l_oracle


def _report(num: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


def _param_hashes(module: torch.nn.Module) -> dict[str, str]:
    return {n: sha256(p.detach().cpu().numpy().tobytes()).hexdigest()
            for n, p in module.named_parameters()}


# ---------------------------------------------------------------------------
# 1. LoRA zero-init equivalence


def test_criterion_1_lora_zero_init_equivalence():
    t0 = time.time()
    worst = {torch.float32: 0.0, torch.float64: 0.0}
    for i in range(20):
        dtype = torch.float64 if i % 2 == 0 else torch.float32
        torch.manual_seed(100 + i)
        d_z = [8, 12, 16][i % 3]
        heads = 2 if d_z % 2 == 0 else 1
        cfg = LmConfig(vocab_size=10 + i, d_z=d_z, n_layers=1 + i % 3,
                       n_heads=heads, max_seq=32)
        model = TinyLm(cfg, dtype=dtype)
        adapted = with_adapters(model, LoraConfig(rank=2), dtype=dtype)
        ids = torch.randint(0, cfg.vocab_size, (1, 6))
        with torch.no_grad():
            if i % 2 == 0:
                prefix = torch.randn(1, 3, d_z, dtype=dtype)
                diff = (model(ids, prefix=prefix) - adapted(ids, prefix=prefix)).abs().max()
            else:
                diff = (model(ids) - adapted(ids)).abs().max()
        worst[dtype] = max(worst[dtype], float(diff))
    ok = worst[torch.float32] <= 1e-6 and worst[torch.float64] <= 1e-12
    _report(1, "LoRA zero-init equivalence", ok,
            f"max diff fp32 {worst[torch.float32]:.2e}, fp64 {worst[torch.float64]:.2e}, "
            f"{time.time() - t0:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradient correctness by central finite differences


def test_criterion_2_gradient_correctness():
    t0 = time.time()
    worst = {"bce": 0.0, "bridge": 0.0, "caption": 0.0, "lora": 0.0}

    for i in range(10):
        rng = np.random.default_rng(i)
        z = rng.standard_normal(6)
        y = (rng.random(6) < 0.5).astype(float)
        _, grad = bce_loss(sigmoid(z), TagTarget(y))
        eps = 1e-6
        for k in range(6):
            zp, zm = z.copy(), z.copy()
            zp[k] += eps
            zm[k] -= eps
            fd = (bce_loss(sigmoid(zp), TagTarget(y))[0]
                  - bce_loss(sigmoid(zm), TagTarget(y))[0]) / (2 * eps)
            denom = max(abs(fd), abs(grad[k]), 1e-10)
            worst["bce"] = max(worst["bce"], abs(fd - grad[k]) / denom)

    for i in range(10):
        torch.manual_seed(200 + i)
        b = BridgeMlp(d_v=3 + i % 3, d_z=4, prefix_len=2 + i % 2, dtype=torch.float64)
        v = torch.randn(3 + i % 3, dtype=torch.float64)
        probe = torch.randn(2 + i % 2, 4, dtype=torch.float64)
        errors = check_grads(lambda: (b(v) * probe).sum() + 0.1 * (b(v) ** 2).sum(),
                             dict(b.named_parameters()), max_entries=6)
        worst["bridge"] = max(worst["bridge"], *errors.values())

    tok = WordTokenizer.from_texts(["a road runs here", "a river flows",
                                    "describe the aerial scene", "tags : none ,"])
    captions = ["a road runs here", "a river flows", "a road", "a river flows here"]
    for i in range(10):
        torch.manual_seed(300 + i)
        lora = LoraConfig(rank=2) if i % 2 == 0 else None
        cfg = LmConfig(vocab_size=len(tok), d_z=8, n_layers=2, n_heads=2,
                       max_seq=32, lora=lora)
        model = TinyLm(cfg, dtype=torch.float64)
        prefix = torch.randn(2, 8, dtype=torch.float64, requires_grad=True)
        asm = assemble_prompt(prefix, {"road": 0.9} if i % 3 else {},
                              target_caption=captions[i % 4])
        named = list(model.named_parameters())
        params = {n: p for n, p in named[:: max(1, len(named) // 3)][:3]}
        params["prefix"] = prefix
        errors = check_grads(lambda: caption_loss(asm, model, tok),
                             params, max_entries=3)
        worst["caption"] = max(worst["caption"], *errors.values())

    for i in range(10):
        torch.manual_seed(400 + i)
        lin = LoraLinear(5, 4, rank=2, alpha=6.0, dtype=torch.float64)
        with torch.no_grad():
            lin.lora_b.normal_()  # leave the zero-init point so A gets gradient
        x = torch.randn(3, 5, dtype=torch.float64)
        probe = torch.randn(3, 4, dtype=torch.float64)
        params = {"lora_a": lin.lora_a, "lora_b": lin.lora_b,
                  "base.weight": lin.base.weight}
        errors = check_grads(lambda: ((lin(x) * probe).sum() + (lin(x) ** 3).sum()),
                             params, max_entries=6)
        worst["lora"] = max(worst["lora"], *errors.values())

    ok = all(v < 1e-4 for v in worst.values())
    _report(2, "finite-difference gradient checks", ok,
            ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + f", {time.time() - t0:.1f}s")


# ---------------------------------------------------------------------------
# 3. freeze discipline


def _freeze_fixture(regime: str) -> tuple[TrainingConfig, CaptionPipeline, list[Sample]]:
    cfg = TrainingConfig(batch_size=4, lr=1e-2, max_epochs=2, patience=1,
                         d_v=8, d_z=32, n_layers=10, n_heads=2, prefix_len=2,
                         lora_rank=2, regime=regime, seed=0)
    vocab = TagVocabulary.from_counts({"road": 3, "river": 3, "field": 3}, 1)
    tok = WordTokenizer.from_texts(["a road", "a river", "a field",
                                    "describe the aerial scene", "tags : none ,"])
    torch.manual_seed(0)
    pipeline = CaptionPipeline(cfg, vocab, tok)
    rng = np.random.default_rng(0)
    samples = [Sample(f"s{i}", rng.standard_normal(8).astype(np.float32),
                      f"a {t}", {t})
               for i, t in enumerate(["road", "river", "field", "road"])]
    return cfg, pipeline, samples


def test_criterion_3_freeze_discipline():
    t0 = time.time()

    cfg, pipeline, samples = _freeze_fixture("visual_prefix")
    set_tuning_regime(pipeline, cfg.make_regime())
    opt = torch.optim.AdamW([p for p in pipeline.parameters() if p.requires_grad], lr=cfg.lr)
    before = _param_hashes(pipeline)
    train_step(samples, pipeline, opt, cfg)
    after = _param_hashes(pipeline)
    changed = {n for n in before if before[n] != after[n]}
    vp_ok = (all(n.startswith(("bridge.", "tag_head.")) for n in changed)
             and any(n.startswith("bridge.") for n in changed)
             and any(n.startswith("tag_head.") for n in changed)
             and not any(n.startswith("lm.") for n in changed))

    cfg, pipeline, samples = _freeze_fixture("partial_unfreeze_lora")
    set_tuning_regime(pipeline, cfg.make_regime())
    opt = torch.optim.AdamW([p for p in pipeline.parameters() if p.requires_grad], lr=cfg.lr)
    lm_names = {n for n in _param_hashes(pipeline) if n.startswith("lm.")}
    lora_names = {n for n in lm_names if "lora_" in n}
    top_base = {n for n in lm_names - lora_names
                if any(n.startswith(f"lm.blocks.{i}.") for i in (7, 8, 9))}
    allowed = lora_names | top_base

    before = _param_hashes(pipeline)
    train_step(samples, pipeline, opt, cfg)
    mid = _param_hashes(pipeline)
    changed1 = {n for n in lm_names if before[n] != mid[n]}
    # at the zero-init point B=0 makes every A-gradient exactly zero, so the
    # A factors move only from the second step onward
    step1_ok = (changed1 <= allowed
                and top_base <= changed1
                and all(n in changed1 for n in lora_names if n.endswith("lora_b")))
    train_step(samples, pipeline, opt, cfg)
    after = _param_hashes(pipeline)
    changed2 = {n for n in lm_names if before[n] != after[n]}
    step2_ok = changed2 == allowed

    ok = vp_ok and step1_ok and step2_ok
    _report(3, "freeze discipline (visual prefix / partial-unfreeze LoRA)", ok,
            f"L=10 unfrozen blocks 8-10, {len(lora_names)} adapter factors, "
            f"{time.time() - t0:.1f}s")


# ---------------------------------------------------------------------------
# 4. metric oracles


def _random_pairs(n: int, seed: int) -> list[EvalPair]:
    rng = random.Random(seed)
    words = ["sky", "road", "river", "tree", "roof", "dock", "cars", "green"]
    pairs = []
    for i in range(n):
        cand = " ".join(rng.choices(words, k=rng.randint(1, 6)))
        refs = [" ".join(rng.choices(words, k=rng.randint(1, 6)))
                for _ in range(rng.randint(1, 3))]
        pairs.append(EvalPair.from_text(f"p{i}", cand, refs))
    return pairs


def test_criterion_4_metric_oracles():
    t0 = time.time()
    hand_ok = (
        bleu([EvalPair.from_text("a", "the cat", ["the cat sat"])], max_n=1)
        == pytest.approx(math.exp(1 - 3 / 2), abs=1e-12)
        and bleu([EvalPair.from_text("b", "a b c d", ["a b c d"])], max_n=4) == 1.0
        and rouge_l([EvalPair.from_text("c", "a b c", ["a c d"])])
        == pytest.approx(2 / 3, abs=1e-12)
        and meteor([EvalPair.from_text("d", "a b c d", ["a b c d"])])
        == pytest.approx(0.9921875, abs=1e-15)
    )

    pairs = _random_pairs(30, seed=9)
    rand_err = max(
        abs(bleu(pairs, max_n=4) - bleu_oracle(pairs, 4)),
        abs(rouge_l(pairs) - rouge_l_oracle(pairs)),
        abs(meteor(pairs) - meteor_oracle(pairs, stem)),
        max(abs(bleu([p], max_n=2) - bleu_oracle([p], 2)) for p in pairs),
        max(abs(rouge_l([p]) - rouge_l_oracle([p])) for p in pairs),
        max(abs(meteor([p]) - meteor_oracle([p], stem)) for p in pairs),
    )

    rng = np.random.default_rng(4)
    probs = [rng.random(8) for _ in range(20)]
    truths = [(rng.random(8) < 0.4).astype(int) for _ in range(20)]
    truths[3][:] = 0
    rep = retrieval_metrics([TagPrediction(p, set(), 0.5) for p in probs],
                            [TagTarget(y) for y in truths], 4, recall_cuts=(1, 5, 8))
    orc = retrieval_oracle(probs, truths, 4, recall_cuts=(1, 5, 8))
    retr_err = max(abs(rep.precision_at_k - orc["p"]), abs(rep.recall_at_k - orc["r"]),
                   abs(rep.f1_at_k - orc["f1"]), abs(rep.map_at_k - orc["ap"]),
                   *(abs(rep.recall_at[k] - orc[f"r{k}"]) for k in (1, 5, 8)))

    ok = hand_ok and rand_err < 1e-9 and retr_err < 1e-12
    _report(4, "metric oracles (BLEU/ROUGE-L/METEOR/retrieval)", ok,
            f"caption err {rand_err:.1e}, retrieval err {retr_err:.1e}, "
            f"{time.time() - t0:.1f}s")


# ---------------------------------------------------------------------------
# 5. overfit sanity, two-stage


OVERFIT_TAGS = ["bridge", "forest", "river", "road", "runway"]


def _overfit_caption(tags: set[str]) -> str:
    ts = sorted(tags)
    if len(ts) == 1:
        return f"an aerial scene with a {ts[0]}"
    return f"an aerial scene with a {ts[0]} and a {ts[1]}"


def _overfit_triples(n: int = 20, d_v: int = 16, seed: int = 7) -> list[Sample]:
    rng = np.random.default_rng(seed)
    tagsets = [{t} for t in OVERFIT_TAGS] + [
        {OVERFIT_TAGS[i], OVERFIT_TAGS[(i + 2) % 5]} for i in range(5)
    ]
    out = []
    for i in range(n):
        ts = tagsets[i % len(tagsets)]
        v = np.zeros(d_v, dtype=np.float32)
        for t in ts:
            v[OVERFIT_TAGS.index(t)] = 1.0
        v += 0.05 * rng.standard_normal(d_v).astype(np.float32)
        out.append(Sample(f"s{i:02d}", v, _overfit_caption(ts), set(ts)))
    return out


def test_criterion_5_overfit_sanity():
    t0 = time.time()
    samples = _overfit_triples()
    vocab = TagVocabulary.from_counts({t: 5 for t in OVERFIT_TAGS}, 1)
    tok = WordTokenizer.from_texts([s.caption for s in samples]
                                   + ["describe the aerial scene", "tags : none ,"]
                                   + OVERFIT_TAGS)
    cfg1 = TrainingConfig(batch_size=4, lr=1e-3, max_epochs=30, patience=29,
                          d_v=16, d_z=128, n_layers=4, n_heads=4, prefix_len=4,
                          stage="pretrain_pseudo", seed=0)
    res1, pipe = fit(samples, samples, cfg1, vocab=vocab, tokenizer=tok)
    first5 = [s.l_total for s in res1.log[:5]]
    decreasing = all(a > b for a, b in zip(first5, first5[1:]))
    cfg2 = TrainingConfig(**{**cfg1.__dict__, "stage": "refine_real", "seed": 1})
    res2, pipe = fit(samples, samples, cfg2, pipeline=pipe)
    exact = sum(pipe.predict_caption(s.v)[0] == s.caption for s in samples)
    ok = decreasing and exact >= 0.9 * len(samples)
    _report(5, "two-stage overfit sanity", ok,
            f"{exact}/{len(samples)} captions exact, first-5 losses "
            f"{'strictly decreasing' if decreasing else 'NOT decreasing'}, "
            f"{time.time() - t0:.1f}s")


# ---------------------------------------------------------------------------
# 6. tag-ablation direction


ABLATION_TAGS = ["airport", "beach", "bridge", "canal", "desert", "farmland",
                 "forest", "harbor", "lake", "mountain", "river", "road"]


def _ablation_caption(tags: set[str]) -> str:
    ts = sorted(tags)
    return f"this scene shows a {ts[0]} and a {ts[1]}"


def _ablation_samples(tagsets, rng, noise, d_v, prefix):
    out = []
    for i, ts in enumerate(tagsets):
        v = np.zeros(d_v)
        for t in ts:
            v[ABLATION_TAGS.index(t)] = 3.0
        v += noise * rng.standard_normal(d_v)
        out.append(Sample(f"{prefix}{i:02d}", v.astype(np.float32),
                          _ablation_caption(ts), set(ts)))
    return out


def _decode_with_gold_tags(pipe: CaptionPipeline, s: Sample) -> str:
    cfg = pipe.config
    vt = torch.tensor(s.v, dtype=torch.float32).unsqueeze(0)
    asm = assemble_prompt(pipe.bridge(vt)[0], set(s.tags),
                          instruction=cfg.instruction, use_tags=cfg.use_tags)
    return decode(asm, pipe.lm, pipe.tokenizer, max_len=cfg.max_decode_len).caption


def test_criterion_6_tag_ablation_direction():
    t0 = time.time()
    d_v, noise = 32, 1.0
    rng = np.random.default_rng(11)
    pairs_all = list(itertools.combinations(range(len(ABLATION_TAGS)), 2))
    rng.shuffle(pairs_all)
    train = _ablation_samples([{ABLATION_TAGS[i], ABLATION_TAGS[j]}
                               for i, j in pairs_all[:45]], rng, noise, d_v, "t")
    heldout = _ablation_samples([{ABLATION_TAGS[i], ABLATION_TAGS[j]}
                                 for i, j in pairs_all[45:]], rng, noise, d_v, "e")
    vocab = TagVocabulary.from_counts({t: 5 for t in ABLATION_TAGS}, 1)
    tok = WordTokenizer.from_texts(["this scene shows a and",
                                    "describe the aerial scene", "tags : none ,"]
                                   + ABLATION_TAGS)
    scores = {}
    for use_tags in (True, False):
        cfg = TrainingConfig(batch_size=8, lr=1e-3, max_epochs=25, patience=24,
                             d_v=d_v, d_z=64, n_layers=2, n_heads=2, prefix_len=4,
                             seed=0, use_tags=use_tags, prompt_tags="gold")
        _, pipe = fit(train, train, cfg, vocab=vocab, tokenizer=tok)
        with torch.no_grad():
            scores[use_tags] = bleu(
                [EvalPair.from_text(s.image_id, _decode_with_gold_tags(pipe, s),
                                    [s.caption]) for s in heldout], max_n=4)
    gap = scores[True] - scores[False]
    ok = gap >= 0.05
    _report(6, "tag-ablation direction (BLEU-4)", ok,
            f"with {scores[True]:.3f} vs without {scores[False]:.3f}, "
            f"gap {gap * 100:.1f} pts, {time.time() - t0:.1f}s")


# ---------------------------------------------------------------------------
# 7. early stopping vs reference simulation


def _reference_stop(trace: list[float], patience: int) -> tuple[int, int]:
    """Definition-literal: epoch t fails when it does not strictly beat every
    earlier epoch; stop at the first t whose trailing `patience` epochs all
    failed; best is the earliest argmax of the observed prefix."""
    fails = [t > 1 and trace[t - 1] <= max(trace[: t - 1]) or
             (t == 1 and False) for t in range(1, len(trace) + 1)]
    stop = len(trace)
    for t in range(1, len(trace) + 1):
        if t >= patience and all(fails[t - patience: t]):
            stop = t
            break
    prefix = trace[:stop]
    best = prefix.index(max(prefix)) + 1
    return stop, best


def test_criterion_7_early_stopping():
    t0 = time.time()
    spec_ok = early_stop([0.30, 0.31, 0.31, 0.31, 0.31, 0.31, 0.31], 5) == (7, 2)
    rng = random.Random(5)
    mismatches = 0
    for _ in range(100):
        trace = [round(rng.choice([k / 20 for k in range(21)]), 2)
                 for _ in range(rng.randint(1, 30))]
        if early_stop(trace, 5) != _reference_stop(trace, 5):
            mismatches += 1
    ok = spec_ok and mismatches == 0
    _report(7, "early stopping reference simulation", ok,
            f"100 traces, {mismatches} mismatches, {time.time() - t0:.1f}s")


# ---------------------------------------------------------------------------
# 8. corpus pipeline statistics + tag-extraction properties


def _fixture_captions(n: int = 50) -> list[CaptionRecord]:
    cats = ["road", "river", "forest", "harbor", "field", "bridge", "beach", "lake"]
    out = []
    provider = StubProvider()
    for i in range(n):
        polys = [
            PolygonRecord(f"f{i:02d}", cats[i % len(cats)],
                          [0.1 + 0.01 * i, 0.2, 0.3, 0.2, 0.3, 0.6]),
            PolygonRecord(f"f{i:02d}", cats[(i + 3) % len(cats)],
                          [0.7, 0.7, 0.9, 0.7, 0.9, 0.9]),
        ]
        out.append(CaptionRecord(f"f{i:02d}", provider.caption(build_prompt(polys)),
                                 source="provider"))
    return out


def test_criterion_8_corpus_pipeline():
    t0 = time.time()
    captions = _fixture_captions(50)
    table = filter_vocabulary(captions, min_count=2)

    # one-pass counting oracle, re-deriving the documented normalization
    uniq: set[str] = set()
    total_words = 0
    total_sents = 0
    for rec in captions:
        text = "".join(" " if c in string.punctuation else c for c in rec.caption.lower())
        toks = text.split()
        uniq.update(toks)
        total_words += len(toks)
        n_sents = len([s for s in
                       "".join(c if c not in ".!?" else "\n" for c in rec.caption)
                       .splitlines() if s.strip()])
        total_sents += max(1, n_sents)
    stats_ok = (table.stats.unique_words == len(uniq)
                and table.stats.mean_words == total_words / 50
                and table.stats.mean_sentences == total_sents / 50
                and table.stats.captions == 50)

    tagger = LexiconTagger()
    tags_forward = corpus_tag_set(captions, tagger, table)
    shuffled = list(captions)
    random.Random(0).shuffle(shuffled)
    order_ok = corpus_tag_set(shuffled, tagger, table) == tags_forward

    idem_ok = True
    for rec in captions:
        tags = extract_tags(rec.caption, tagger, table)
        idem_ok &= extract_tags(rec.caption, tagger, table) == tags
        idem_ok &= extract_tags(" ".join(sorted(tags)), tagger, table) == tags

    ok = stats_ok and order_ok and idem_ok and len(tags_forward) > 0
    _report(8, "corpus statistics + tag-extraction properties", ok,
            f"{table.stats.unique_words} unique words, "
            f"{len(tags_forward)} corpus tags, {time.time() - t0:.1f}s")


# ---------------------------------------------------------------------------
# 9. determinism: rerun from manifest reproduces bytes


def test_criterion_9_manifest_rerun_determinism(tmp_path):
    t0 = time.time()
    d = tmp_path
    tags = ["road", "river", "field"]
    with open(d / "captions.jsonl", "w") as fh:
        for i in range(9):
            t = tags[i % 3]
            fh.write(json.dumps({"image_id": f"img{i}", "caption": f"a long {t} here",
                                 "source": "provider", "tags": [t]}) + "\n")
    (d / "tag_vocab.json").write_text(json.dumps(
        {"tags": tags, "min_count": 1, "counts": {t: 3 for t in tags}}))
    (d / "tiny.cfg").write_text(
        "batch_size = 4\nlr = 0.001\nmax_epochs = 2\npatience = 1\nd_v = 16\n"
        "d_z = 16\nn_layers = 2\nn_heads = 2\nprefix_len = 2\nseed = 3\n")
    (d / "ids.txt").write_text("img0\nimg1\nimg2\n")

    def run(args):
        subprocess.run([sys.executable, "-m", "aerolite.cli", *args],
                       check=True, capture_output=True)

    run(["train", "caption", "--captions", str(d / "captions.jsonl"),
         "--tag-vocab", str(d / "tag_vocab.json"), "--config", str(d / "tiny.cfg"),
         "--out", str(d / "run")])
    ckpt = d / "run" / "ckpt.aeck"
    run(["infer", "--embeddings", "synthetic", "--ids", str(d / "ids.txt"),
         "--checkpoint", str(ckpt), "--seed", "3", "--out", str(d / "pred.jsonl")])

    ckpt_bytes = ckpt.read_bytes()
    pred_bytes = (d / "pred.jsonl").read_bytes()
    ckpt.unlink()
    (d / "pred.jsonl").unlink()
    run(["rerun", "--manifest", str(ckpt) + ".manifest.json"])
    run(["rerun", "--manifest", str(d / "pred.jsonl.manifest.json")])
    ok = ckpt.read_bytes() == ckpt_bytes and (d / "pred.jsonl").read_bytes() == pred_bytes
    _report(9, "seeded train/infer rerun is byte-identical", ok,
            f"{len(ckpt_bytes)} ckpt bytes, {time.time() - t0:.1f}s")

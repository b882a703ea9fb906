"""Single entry point: corpus building, tagger / caption training, evaluation,
inference, and the tag-ablation driver.

Exit codes: 0 success, 2 validation error, 3 provider/transport error,
4 numeric failure.
"""

from __future__ import annotations

import json
import os
import sys
from collections import Counter, defaultdict
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from .encoder import PrecomputedProvider, SyntheticProvider
from .errors import NumericError, ProviderError, ValidationError
from .manifest import RunManifest, Timer
from .trainer import (
    Sample, TrainingConfig, fit, fit_tagger, load_pipeline, save_checkpoint,
    split_by_image_id, write_training_log,
)
from .lm import WordTokenizer


def _manifest(out: str, inputs: list[str], config: dict | None = None, seed: int = 0) -> RunManifest:
    m = RunManifest(command=sys.argv[1:], config=config or {}, seed=seed, outputs=[str(out)])
    for p in inputs:
        if p and Path(p).exists():
            m.add_input(p)
    return m


def _load_embeddings(source: str, ids: list[str], d_v: int) -> dict[str, np.ndarray]:
    if source == "synthetic":
        prov = SyntheticProvider(d_v)
        return {i: prov.embed(i, i.encode("utf-8")).v for i in ids}
    prov = PrecomputedProvider(source)
    return {i: prov.embed(i).v for i in ids}


def _samples_from_captions(path: str, embeddings_src: str, d_v: int) -> list[Sample]:
    records = corpus_mod.read_captions(path)
    emb = _load_embeddings(embeddings_src, [r.image_id for r in records], d_v)
    return [
        Sample(r.image_id, emb[r.image_id], r.caption,
               set(r.tags) if r.tags is not None else None)
        for r in records
    ]


@click.group()
def cli():
    """AeroLite desk-scale captioning pipeline."""


# ---------------------------------------------------------------------------
# corpus


@cli.group()
def corpus():
    """Pseudo-caption corpus construction."""


@corpus.command("build-prompts")
@click.option("--polygons", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def build_prompts(polygons: str, out: str):
    with Timer() as t:
        records = corpus_mod.read_polygons(polygons)
        by_image: dict[str, list] = defaultdict(list)
        for r in records:
            by_image[r.image_id].append(r)
        with open(out, "w") as fh:
            for image_id in sorted(by_image):
                prompt = corpus_mod.build_prompt(by_image[image_id])
                fh.write(json.dumps({"image_id": image_id, "prompt": prompt}, sort_keys=True) + "\n")
    m = _manifest(out, [polygons])
    m.elapsed = t.elapsed
    m.write(out)
    click.echo(f"wrote {len(by_image)} prompts to {out}")


@corpus.command("generate")
@click.option("--prompts", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--provider", "provider_kind", default="stub", type=click.Choice(["stub", "http"]))
@click.option("--url", default=None, help="http provider endpoint")
def generate(prompts: str, out: str, provider_kind: str, url: str | None):
    if provider_kind == "http":
        url = url or os.environ.get("AEROLITE_PROVIDER_URL")
        if not url:
            raise ValidationError("http provider needs --url or AEROLITE_PROVIDER_URL")
        provider = corpus_mod.HttpProvider(url)
    else:
        provider = corpus_mod.StubProvider()
    with Timer() as t:
        rows = [json.loads(line) for line in Path(prompts).read_text().splitlines() if line.strip()]
        captions = [
            corpus_mod.generate_pseudo_caption(r["prompt"], provider, image_id=r["image_id"])
            for r in rows
        ]
        corpus_mod.write_captions(out, captions)
    m = _manifest(out, [prompts], config={"provider": provider_kind})
    m.elapsed = t.elapsed
    m.write(out)
    click.echo(f"wrote {len(captions)} captions to {out}")


@corpus.command("filter-vocab")
@click.option("--captions", required=True, type=click.Path(exists=True))
@click.option("--min-count", default=5, type=int)
@click.option("--out", required=True, type=click.Path())
def filter_vocab(captions: str, min_count: int, out: str):
    with Timer() as t:
        records = corpus_mod.read_captions(captions)
        table = corpus_mod.filter_vocabulary(records, min_count)
        Path(out).write_text(json.dumps({
            "counts": dict(sorted(table.counts.items())),
            "min_count": table.min_count,
            "stats": table.stats.to_json(),
        }, sort_keys=True, indent=2) + "\n")
    m = _manifest(out, [captions], config={"min_count": min_count})
    m.elapsed = t.elapsed
    m.write(out)
    click.echo(json.dumps(table.stats.to_json()))


@corpus.command("extract-tags")
@click.option("--captions", required=True, type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True), help="filter-vocab output")
@click.option("--out", required=True, type=click.Path())
@click.option("--tag-vocab-out", default=None, type=click.Path())
def extract_tags_cmd(captions: str, vocab: str, out: str, tag_vocab_out: str | None):
    with Timer() as t:
        records = corpus_mod.read_captions(captions)
        vd = json.loads(Path(vocab).read_text())
        table = corpus_mod.FrequencyTable(
            counts=vd["counts"], min_count=vd["min_count"],
            stats=corpus_mod.CorpusStats(**vd["stats"]),
        )
        tagger = corpus_mod.LexiconTagger()
        tag_counts: Counter[str] = Counter()
        for rec in records:
            tags = corpus_mod.extract_tags(rec.caption, tagger, table)
            rec.tags = sorted(tags)
            tag_counts.update(tags)
        corpus_mod.write_captions(out, records)
        if tag_vocab_out:
            tv = corpus_mod.TagVocabulary.from_counts(dict(tag_counts), min_count=1)
            Path(tag_vocab_out).write_text(json.dumps(tv.to_json(), sort_keys=True, indent=2) + "\n")
    m = _manifest(out, [captions, vocab])
    m.elapsed = t.elapsed
    m.write(out)
    click.echo(f"tagged {len(records)} captions; {len(tag_counts)} distinct tags")


# ---------------------------------------------------------------------------
# training


def _build_config(config_path: str | None, **overrides) -> TrainingConfig:
    cfg = TrainingConfig.from_file(config_path) if config_path else TrainingConfig()
    fields = {k: v for k, v in overrides.items() if v is not None}
    if fields:
        d = asdict(cfg)
        d.update(fields)
        cfg = TrainingConfig(**d)
    return cfg


@cli.group()
def train():
    """Tagger / caption training."""


@train.command("tagger")
@click.option("--captions", required=True, type=click.Path(exists=True))
@click.option("--embeddings", default="synthetic")
@click.option("--tag-vocab", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--seed", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
def train_tagger(captions: str, embeddings: str, tag_vocab: str,
                 config_path: str | None, seed: int | None, out: str):
    cfg = _build_config(config_path, seed=seed)
    vocab = corpus_mod.TagVocabulary.from_json(json.loads(Path(tag_vocab).read_text()))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with Timer() as t:
        samples = _samples_from_captions(captions, embeddings, cfg.d_v)
        train_set, val_set = split_by_image_id(samples)
        head, log = fit_tagger(train_set or samples, val_set, cfg, vocab)
        params = head.params()
        (out_dir / "taghead.json").write_text(json.dumps({
            "w": params.w.tolist(), "b": params.b.tolist(),
            "vocab": vocab.to_json(), "tau": cfg.tau,
        }, sort_keys=True) + "\n")
        write_training_log(out_dir / "log.csv", log)
    m = _manifest(str(out_dir / "taghead.json"), [captions, tag_vocab, config_path or ""],
                  config=asdict(cfg), seed=cfg.seed)
    m.elapsed = t.elapsed
    m.write(out_dir / "taghead.json")
    click.echo(f"tagger trained, {len(log)} epochs, best val mAP "
               f"{max((s.val_map for s in log), default=0.0):.4f}")


@train.command("caption")
@click.option("--captions", required=True, type=click.Path(exists=True))
@click.option("--embeddings", default="synthetic")
@click.option("--tag-vocab", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--stage", default=None, type=click.Choice(["pretrain_pseudo", "refine_real"]))
@click.option("--regime", default=None, type=click.Choice(["visual_prefix", "partial_unfreeze_lora"]))
@click.option("--seed", default=None, type=int)
@click.option("--resume", default=None, type=click.Path(exists=True), help="checkpoint to refine from")
@click.option("--out", required=True, type=click.Path())
def train_caption(captions: str, embeddings: str, tag_vocab: str, config_path: str | None,
                  stage: str | None, regime: str | None, seed: int | None,
                  resume: str | None, out: str):
    cfg = _build_config(config_path, stage=stage, regime=regime, seed=seed)
    if cfg.stage == "refine_real" and not resume:
        raise ValidationError("refine_real stage needs --resume with the pretrain checkpoint")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with Timer() as t:
        samples = _samples_from_captions(captions, embeddings, cfg.d_v)
        train_set, val_set = split_by_image_id(samples)
        if not train_set:
            train_set, val_set = samples, []
        pipeline = None
        if resume:
            pipeline, _ = load_pipeline(resume)
            pipeline.config = cfg
        vocab = corpus_mod.TagVocabulary.from_json(json.loads(Path(tag_vocab).read_text()))
        tokenizer = (pipeline.tokenizer if pipeline else
                     WordTokenizer.from_texts([s.caption for s in samples]
                                              + [cfg.instruction, "tags : none ,"]
                                              + vocab.tags))
        result, pipeline = fit(train_set, val_set, cfg, pipeline=pipeline,
                               vocab=vocab, tokenizer=tokenizer)
        save_checkpoint(out_dir / "ckpt.aeck", pipeline, result.best_epoch,
                        result.best_val_map, state=result.best_state)
        write_training_log(out_dir / "log.csv", result.log)
    m = _manifest(str(out_dir / "ckpt.aeck"),
                  [captions, tag_vocab, config_path or "", resume or ""],
                  config=asdict(cfg), seed=cfg.seed)
    m.elapsed = t.elapsed
    m.write(out_dir / "ckpt.aeck")
    click.echo(f"trained {len(result.log)} epochs (best epoch {result.best_epoch}, "
               f"val mAP {result.best_val_map:.4f})")


# ---------------------------------------------------------------------------
# evaluation / inference / ablation


def _read_refs(path: str) -> dict[str, list[str]]:
    refs: dict[str, list[str]] = defaultdict(list)
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "captions" in d:
            refs[d["image_id"]].extend(d["captions"])
        else:
            refs[d["image_id"]].append(d["caption"])
    return refs


def _caption_report(pred: dict[str, str], refs: dict[str, list[str]],
                    which: tuple[str, ...]) -> metrics_mod.MetricReport:
    pairs = [
        metrics_mod.EvalPair.from_text(i, pred[i], refs[i])
        for i in sorted(pred)
        if i in refs
    ]
    if not pairs:
        raise ValidationError("no prediction/reference overlap")
    return metrics_mod.evaluate(pairs, which)


@cli.group(name="eval")
def eval_group():
    """Metric evaluation."""


@eval_group.command("caption")
@click.option("--pred", required=True, type=click.Path(exists=True))
@click.option("--refs", required=True, type=click.Path(exists=True))
@click.option("--metrics", "which", default="bleu,meteor,rouge")
@click.option("--out", default=None, type=click.Path())
def eval_caption(pred: str, refs: str, which: str, out: str | None):
    pred_map = {json.loads(l)["image_id"]: json.loads(l)["caption"]
                for l in Path(pred).read_text().splitlines() if l.strip()}
    report = _caption_report(pred_map, _read_refs(refs), tuple(which.split(",")))
    text = json.dumps(report.to_dict(), sort_keys=True, indent=2)
    if out:
        Path(out).write_text(text + "\n")
        m = _manifest(out, [pred, refs])
        m.write(out)
    click.echo(text)


@cli.command("infer")
@click.option("--embeddings", required=True, help="AEMB file or 'synthetic'")
@click.option("--ids", "ids_file", default=None, type=click.Path(exists=True),
              help="text file of image ids (required with synthetic embeddings)")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--mode", default="greedy", type=click.Choice(["greedy", "topk"]))
@click.option("--seed", default=0, type=int)
@click.option("--out", required=True, type=click.Path())
def infer(embeddings: str, ids_file: str | None, checkpoint: str, mode: str,
          seed: int, out: str):
    pipeline, _ = load_pipeline(checkpoint)
    with Timer() as t:
        if ids_file:
            ids = [l.strip() for l in Path(ids_file).read_text().splitlines() if l.strip()]
        elif embeddings != "synthetic":
            ids = sorted(PrecomputedProvider(embeddings)._rows)
        else:
            raise ValidationError("synthetic embeddings need --ids")
        emb = _load_embeddings(embeddings, ids, pipeline.config.d_v)
        with open(out, "w") as fh:
            for image_id in ids:
                caption, tags, truncated = pipeline.predict_caption(
                    emb[image_id], mode=mode, seed=seed)
                fh.write(json.dumps({
                    "image_id": image_id, "caption": caption,
                    "tags_used": tags, "truncated": truncated,
                }, sort_keys=True) + "\n")
    m = _manifest(out, [checkpoint, ids_file or ""], seed=seed,
                  config={"mode": mode, "embeddings": embeddings})
    m.elapsed = t.elapsed
    m.write(out)
    click.echo(f"wrote {len(ids)} captions to {out}")


@cli.command("ablate")
@click.option("--with-ckpt", "with_ckpt", required=True, type=click.Path(exists=True))
@click.option("--without-ckpt", "without_ckpt", required=True, type=click.Path(exists=True))
@click.option("--captions", required=True, type=click.Path(exists=True), help="reference captions")
@click.option("--embeddings", default="synthetic")
@click.option("--seed", default=0, type=int)
@click.option("--out", default=None, type=click.Path())
def ablate(with_ckpt: str, without_ckpt: str, captions: str, embeddings: str,
           seed: int, out: str | None):
    """Evaluate the with-tags and without-tags arms on the same data and
    report per-metric deltas (reporting only, no assertions)."""
    arm_a, header_a = load_pipeline(with_ckpt)
    arm_b, header_b = load_pipeline(without_ckpt)
    ca = {k: v for k, v in header_a["config"].items() if k != "use_tags"}
    cb = {k: v for k, v in header_b["config"].items() if k != "use_tags"}
    if ca != cb:
        diff = sorted(k for k in ca if ca[k] != cb.get(k))
        raise ValidationError(f"checkpoint config mismatch on {diff}")
    refs = _read_refs(captions)
    ids = sorted(refs)
    emb = _load_embeddings(embeddings, ids, arm_a.config.d_v)
    report = {}
    for name, arm in (("with_tags", arm_a), ("without_tags", arm_b)):
        pred = {i: arm.predict_caption(emb[i], seed=seed)[0] for i in ids}
        report[name] = _caption_report(pred, refs, ("bleu", "meteor", "rouge")).to_dict()
    report["delta"] = {
        k: report["with_tags"]["scores"][k] - report["without_tags"]["scores"][k]
        for k in report["with_tags"]["scores"]
    }
    text = json.dumps(report, sort_keys=True, indent=2)
    if out:
        Path(out).write_text(text + "\n")
        m = _manifest(out, [with_ckpt, without_ckpt, captions], seed=seed)
        m.write(out)
    click.echo(text)


@cli.command("rerun")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
def rerun(manifest_path: str):
    """Replay the command recorded in a run manifest."""
    recorded = RunManifest.load(manifest_path)
    cli.main(args=recorded.command, standalone_mode=False)


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.ClickException as e:
        e.show()
        sys.exit(2)
    except click.exceptions.Abort:
        sys.exit(2)
    except ValidationError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except ProviderError as e:
        click.echo(f"provider error: {e}", err=True)
        sys.exit(3)
    except NumericError as e:
        click.echo(f"numeric error: {e}", err=True)
        sys.exit(4)


if __name__ == "__main__":
    main()

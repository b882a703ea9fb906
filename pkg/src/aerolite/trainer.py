"""Joint training loop: L_total = L_cap + alpha * L_tag, two-stage schedule,
early stopping on validation mAP, and bit-exact checkpointing.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .bridge import BridgeMlp
from .corpus import TagVocabulary
from .errors import NumericError, ValidationError
from .lm import (
    LmConfig, LoraConfig, PartialUnfreezeLoRA, Regime, TinyLm, VisualPrefix,
    WordTokenizer, assemble_prompt, caption_loss, decode, set_tuning_regime,
    DEFAULT_INSTRUCTION,
)
from .taghead import TagHead, TagPrediction, TagTarget, retrieval_metrics


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainingConfig:
    batch_size: int = 32
    lr: float = 1e-5
    max_epochs: int = 50
    patience: int = 5
    tau: float = 0.5
    alpha: float = 1.0  # tag-loss weight
    stage: str = "pretrain_pseudo"  # pretrain_pseudo | refine_real
    regime: str = "partial_unfreeze_lora"  # visual_prefix | partial_unfreeze_lora
    seed: int = 0
    grad_clip: float = 1.0
    prompt_tags: str = "predicted"  # predicted | gold
    top_fraction: float = 0.3
    lora_rank: int = 8
    lora_alpha: float = 16.0
    use_tags: bool = True
    d_v: int = 64
    d_z: int = 128
    n_layers: int = 4
    n_heads: int = 4
    prefix_len: int = 8
    max_decode_len: int = 64
    instruction: str = DEFAULT_INSTRUCTION

    def __post_init__(self):
        for key in ("batch_size", "lr", "max_epochs", "patience", "tau"):
            if getattr(self, key) <= 0:
                raise ValidationError(f"config {key} must be positive")
        if self.patience >= self.max_epochs:
            raise ValidationError("patience must be < max_epochs")
        if self.stage not in ("pretrain_pseudo", "refine_real"):
            raise ValidationError(f"unknown stage {self.stage!r}")
        if self.regime not in ("visual_prefix", "partial_unfreeze_lora"):
            raise ValidationError(f"unknown regime {self.regime!r}")

    def make_regime(self) -> Regime:
        if self.regime == "visual_prefix":
            return VisualPrefix()
        return PartialUnfreezeLoRA(
            top_fraction=self.top_fraction,
            lora=LoraConfig(rank=self.lora_rank, alpha=self.lora_alpha),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainingConfig":
        """Parse a flat key=value config file, coercing types from defaults."""
        defaults = cls()
        kwargs = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"bad config line: {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not hasattr(defaults, key):
                raise ValidationError(f"unknown config key {key!r}")
            cur = getattr(defaults, key)
            if isinstance(cur, bool):
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(cur, int):
                kwargs[key] = int(value)
            elif isinstance(cur, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


@dataclass
class LossBreakdown:
    l_cap: float
    l_tag: float
    l_total: float

    def __post_init__(self):
        if not np.isfinite(self.l_total):
            raise NumericError(f"non-finite loss: {self}")


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Sample:
    image_id: str
    v: np.ndarray
    caption: str
    tags: Optional[set[str]] = None


def tag_target(sample: Sample, vocab: TagVocabulary) -> Optional[np.ndarray]:
    if sample.tags is None:
        return None
    y = np.zeros(len(vocab), dtype=np.float64)
    for t in sample.tags:
        if t in vocab.counts:
            y[vocab.tags.index(t)] = 1.0
    return y


def split_by_image_id(samples: list[Sample], val_fraction: float = 0.1) -> tuple[list[Sample], list[Sample]]:
    """Deterministic split: an image goes to validation when its id hash lands
    in the lowest val_fraction of the hash space."""
    train, val = [], []
    cut = int(val_fraction * 2**32)
    for s in samples:
        h = int.from_bytes(hashlib.sha256(s.image_id.encode()).digest()[:4], "little")
        (val if h < cut else train).append(s)
    return train, val


# ---------------------------------------------------------------------------
# pipeline


class CaptionPipeline(nn.Module):
    """Tag head + bridging MLP + tiny LM, wired as one joint-training unit."""

    def __init__(self, config: TrainingConfig, vocab: TagVocabulary,
                 tokenizer: WordTokenizer, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.tokenizer = tokenizer
        lora = None
        if config.regime == "partial_unfreeze_lora":
            lora = LoraConfig(rank=config.lora_rank, alpha=config.lora_alpha)
        self.lm_config = LmConfig(
            vocab_size=len(tokenizer), d_z=config.d_z, n_layers=config.n_layers,
            n_heads=config.n_heads, lora=lora,
        )
        self.tag_head = TagHead(len(vocab), config.d_v, dtype=dtype)
        self.bridge = BridgeMlp(config.d_v, config.d_z, prefix_len=config.prefix_len, dtype=dtype)
        self.lm = TinyLm(self.lm_config, dtype=dtype)

    def prompt_tags_from_probs(self, probs: torch.Tensor) -> dict[str, float]:
        p = probs.detach().cpu().numpy()
        return {self.vocab.tags[k]: float(p[k]) for k in np.nonzero(p >= self.config.tau)[0]}

    def sample_losses(self, samples: list[Sample], dtype: torch.dtype = torch.float32
                      ) -> tuple[torch.Tensor, torch.Tensor, int]:
        """(L_cap mean, L_tag mean over tagged samples, tagged count)."""
        cfg = self.config
        v = torch.tensor(np.stack([s.v for s in samples]), dtype=dtype)
        probs = self.tag_head(v)
        prefix = self.bridge(v)

        tagged = []
        targets = []
        for i, s in enumerate(samples):
            y = tag_target(s, self.vocab)
            if y is not None:
                tagged.append(i)
                targets.append(y)
        if tagged:
            y_t = torch.tensor(np.stack(targets), dtype=dtype)
            l_tag = self.tag_head.loss(probs[tagged], y_t)
        else:
            l_tag = torch.zeros((), dtype=dtype)

        cap_terms = []
        for i, s in enumerate(samples):
            if cfg.prompt_tags == "gold" and s.tags is not None:
                tags: dict[str, float] | set[str] = set(s.tags)
            else:
                tags = self.prompt_tags_from_probs(probs[i])
            assembly = assemble_prompt(
                prefix[i], tags, instruction=cfg.instruction,
                target_caption=s.caption, use_tags=cfg.use_tags,
            )
            cap_terms.append(caption_loss(assembly, self.lm, self.tokenizer))
        l_cap = torch.stack(cap_terms).mean()
        return l_cap, l_tag, len(tagged)

    @torch.no_grad()
    def predict_caption(self, v: np.ndarray, mode: str = "greedy", k: int = 50,
                        seed: int = 0) -> tuple[str, list[str], bool]:
        """Full inference path: tags >= tau, prompt assembly, decoding."""
        cfg = self.config
        vt = torch.tensor(v, dtype=self.bridge.w1.dtype).unsqueeze(0)
        probs = self.tag_head(vt)[0]
        prefix = self.bridge(vt)[0]
        tags = self.prompt_tags_from_probs(probs)
        assembly = assemble_prompt(prefix, tags, instruction=cfg.instruction,
                                   use_tags=cfg.use_tags)
        from .lm import order_tags

        result = decode(assembly, self.lm, self.tokenizer, mode=mode, k=k,
                        seed=seed, max_len=cfg.max_decode_len)
        return result.caption, order_tags(tags), result.truncated


# ---------------------------------------------------------------------------
# training


def train_step(batch: list[Sample], pipeline: CaptionPipeline,
               optimizer: torch.optim.Optimizer, config: TrainingConfig) -> LossBreakdown:
    """One joint-loss update on a mini-batch. L_tag enters only when tag
    targets exist; only the regime's trainable set is touched."""
    l_cap, l_tag, n_tagged = pipeline.sample_losses(batch)
    l_total = l_cap + config.alpha * l_tag
    if not torch.isfinite(l_total):
        ids = [s.image_id for s in batch]
        raise NumericError(f"non-finite loss on batch {ids}")
    optimizer.zero_grad()
    l_total.backward()
    trainable = [p for p in pipeline.parameters() if p.requires_grad]
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
    optimizer.step()
    return LossBreakdown(
        float(l_cap.detach()),
        float(l_tag.detach()) if n_tagged else 0.0,
        float(l_total.detach()),
    )


def early_stop(val_map_trace: list[float], patience: int) -> tuple[int, int]:
    """(stop_epoch, best_epoch), 1-based. Stop after `patience` consecutive
    epochs without strict improvement; best = highest mAP, ties to earliest."""
    best = float("-inf")
    best_epoch = 0
    streak = 0
    for epoch, v in enumerate(val_map_trace, 1):
        if v > best:
            best = v
            best_epoch = epoch
            streak = 0
        else:
            streak += 1
            if streak >= patience:
                return epoch, best_epoch
    return len(val_map_trace), best_epoch


@dataclass
class EpochStats:
    epoch: int
    l_cap: float
    l_tag: float
    l_total: float
    val_map: float
    val_caption_loss: float


@dataclass
class TrainResult:
    log: list[EpochStats]
    best_epoch: int
    best_val_map: float
    best_state: dict[str, torch.Tensor]
    stopped_early: bool


def _validation_map(pipeline: CaptionPipeline, samples: list[Sample]) -> float:
    preds, targets = [], []
    with torch.no_grad():
        for s in samples:
            y = tag_target(s, pipeline.vocab)
            if y is None:
                continue
            v = torch.tensor(s.v, dtype=pipeline.bridge.w1.dtype)
            p = pipeline.tag_head(v.unsqueeze(0))[0].cpu().numpy()
            preds.append(TagPrediction(p=p, predicted=set(), tau=pipeline.config.tau))
            targets.append(TagTarget(y))
    if not preds or all(t.y.sum() == 0 for t in targets):
        return 0.0
    k = min(10, len(pipeline.vocab))
    return retrieval_metrics(preds, targets, k_cut=k).map_at_k


def fit(dataset: list[Sample], val_dataset: list[Sample], config: TrainingConfig,
        pipeline: CaptionPipeline | None = None,
        vocab: TagVocabulary | None = None,
        tokenizer: WordTokenizer | None = None,
        progress: bool = False) -> tuple[TrainResult, CaptionPipeline]:
    """Epoch loop with per-epoch validation mAP and patience-based stopping.

    The best state (highest validation mAP, tie to earliest epoch) is cloned
    and returned; the pipeline itself is left at its last-epoch state.
    """
    if not dataset:
        raise ValidationError("empty dataset")
    torch.manual_seed(config.seed)
    if pipeline is None:
        if vocab is None or tokenizer is None:
            raise ValidationError("fit needs either a pipeline or vocab+tokenizer")
        pipeline = CaptionPipeline(config, vocab, tokenizer)
    set_tuning_regime(pipeline, config.make_regime())
    trainable = [p for p in pipeline.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=config.lr, betas=(0.9, 0.999), weight_decay=0.0)

    log: list[EpochStats] = []
    best_map = float("-inf")
    best_epoch = 0
    best_state: dict[str, torch.Tensor] = {}
    streak = 0
    stopped = False
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(dataset), config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            lb = train_step(batch, pipeline, optimizer, config)
            sums += (lb.l_cap, lb.l_tag, lb.l_total)
            n_batches += 1
        val_map = _validation_map(pipeline, val_dataset) if val_dataset else 0.0
        with torch.no_grad():
            if val_dataset:
                vc, _, _ = pipeline.sample_losses(val_dataset)
                val_cap = float(vc)
            else:
                val_cap = float("nan")
        stats = EpochStats(epoch, *(sums / n_batches), val_map, val_cap)
        log.append(stats)
        if progress:
            print(f"epoch {epoch}: L_total={stats.l_total:.4f} val_mAP={val_map:.4f}")
        if val_map > best_map:
            best_map = val_map
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in pipeline.state_dict().items()}
            streak = 0
        else:
            streak += 1
            if streak >= config.patience:
                stopped = True
                break
    if not best_state:  # no validation set: keep the final state
        best_epoch = log[-1].epoch
        best_map = 0.0
        best_state = {k: v.detach().clone() for k, v in pipeline.state_dict().items()}
    return TrainResult(log, best_epoch, best_map, best_state, stopped), pipeline


def fit_tagger(dataset: list[Sample], val_dataset: list[Sample],
               config: TrainingConfig, vocab: TagVocabulary,
               progress: bool = False) -> tuple[TagHead, list[EpochStats]]:
    """Train only the tag head (BCE on frozen embeddings) with the same
    early-stopping rule as the joint loop."""
    if not dataset:
        raise ValidationError("empty dataset")
    torch.manual_seed(config.seed)
    head = TagHead(len(vocab), config.d_v)
    optimizer = torch.optim.AdamW(head.parameters(), lr=config.lr,
                                  betas=(0.9, 0.999), weight_decay=0.0)
    tagged = [s for s in dataset if s.tags is not None]
    if not tagged:
        raise ValidationError("no tagged samples for tagger training")
    log: list[EpochStats] = []
    best_map = float("-inf")
    best_state: dict[str, torch.Tensor] = {}
    streak = 0
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(tagged))
        total = 0.0
        n_batches = 0
        for start in range(0, len(tagged), config.batch_size):
            batch = [tagged[i] for i in order[start : start + config.batch_size]]
            v = torch.tensor(np.stack([s.v for s in batch]), dtype=torch.float32)
            y = torch.tensor(np.stack([tag_target(s, vocab) for s in batch]), dtype=torch.float32)
            loss = head.loss(head(v), y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            n_batches += 1
        val_map = 0.0
        if val_dataset:
            preds, targets = [], []
            with torch.no_grad():
                for s in val_dataset:
                    yv = tag_target(s, vocab)
                    if yv is None:
                        continue
                    p = head(torch.tensor(s.v, dtype=torch.float32).unsqueeze(0))[0].numpy()
                    preds.append(TagPrediction(p=p, predicted=set(), tau=config.tau))
                    targets.append(TagTarget(yv))
            if preds and any(t.y.sum() > 0 for t in targets):
                val_map = retrieval_metrics(preds, targets, k_cut=min(10, len(vocab))).map_at_k
        log.append(EpochStats(epoch, 0.0, total / n_batches, total / n_batches,
                              val_map, float("nan")))
        if progress:
            print(f"epoch {epoch}: L_tag={total / n_batches:.4f} val_mAP={val_map:.4f}")
        if val_map > best_map:
            best_map = val_map
            best_state = {k: v.detach().clone() for k, v in head.state_dict().items()}
            streak = 0
        else:
            streak += 1
            if streak >= config.patience:
                break
    if best_state:
        head.load_state_dict(best_state)
    return head, log


def write_training_log(path: str | Path, log: list[EpochStats]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,L_cap,L_tag,L_total,val_mAP,val_caption_loss\n")
        for s in log:
            fh.write(f"{s.epoch},{s.l_cap},{s.l_tag},{s.l_total},{s.val_map},{s.val_caption_loss}\n")


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"AECK"


def save_checkpoint(path: str | Path, pipeline: CaptionPipeline, epoch: int,
                    best_val_map: float, state: dict[str, torch.Tensor] | None = None) -> None:
    """Manifest (name -> shape/dtype/offset) + raw little-endian blob, with a
    sha256 over the blob so corruption is refused at load time."""
    state = state if state is not None else pipeline.state_dict()
    manifest = []
    blob = bytearray()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        arr = t.numpy()
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "offset": len(blob),
        })
        blob += arr.tobytes()
    header = {
        "version": 1,
        "manifest": manifest,
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        "config": asdict(pipeline.config),
        "lm_config": pipeline.lm_config.to_dict(),
        "tag_vocab": pipeline.vocab.to_json(),
        "tokens": pipeline.tokenizer.tokens,
        "epoch": epoch,
        "best_val_map": best_val_map,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(bytes(blob))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen])
    blob = data[8 + hlen :]
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise ValidationError(f"{path}: blob checksum mismatch, refusing to load")
    params: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        dtype = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, params


def load_checkpoint(path: str | Path, pipeline: CaptionPipeline) -> dict:
    """Load into an existing pipeline; the parameter census must match."""
    header, params = read_checkpoint(path)
    state = pipeline.state_dict()
    missing = sorted(set(state) - set(params))
    extra = sorted(set(params) - set(state))
    bad_shape = sorted(
        n for n in set(state) & set(params)
        if tuple(state[n].shape) != tuple(params[n].shape)
    )
    if missing or extra or bad_shape:
        raise ValidationError(
            "parameter census mismatch: "
            f"missing={missing} extra={extra} shape={bad_shape}"
        )
    pipeline.load_state_dict({k: torch.from_numpy(v) for k, v in params.items()})
    return header


def load_pipeline(path: str | Path) -> tuple[CaptionPipeline, dict]:
    """Rebuild a complete pipeline (config, vocab, tokenizer, weights) from a
    checkpoint file alone."""
    header, params = read_checkpoint(path)
    config = TrainingConfig(**header["config"])
    vocab = TagVocabulary.from_json(header["tag_vocab"])
    tokenizer = WordTokenizer(header["tokens"])
    pipeline = CaptionPipeline(config, vocab, tokenizer)
    load_checkpoint(path, pipeline)
    return pipeline, header

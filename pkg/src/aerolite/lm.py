"""Tiny decoder-only transformer with LoRA adapters, partial top-layer
unfreezing, tag-conditioned prompt assembly, and greedy / top-k decoding.

The vocabulary is corpus-derived and word-level; the architecture is the
desk-scale stand-in for the 1-3B backbones the pipeline is designed around.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ValidationError
from .metrics import normalize

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ["<pad>", "<unk>", "<bos>", "<eos>"]


class WordTokenizer:
    """Word-level tokenizer over the shared caption normalizer."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(SPECIALS)] != SPECIALS:
            tokens = SPECIALS + [t for t in tokens if t not in SPECIALS]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "WordTokenizer":
        words = sorted({w for t in texts for w in normalize(t)})
        return cls(SPECIALS + words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK) for w in normalize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i >= len(SPECIALS))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "WordTokenizer":
        return cls(Path(path).read_text().splitlines())


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q", "v")  # linear maps carrying adapters

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraLinear(nn.Module):
    """Linear map with additive low-rank path: y = W x + s * A (B x).

    B starts at zero so the adapted map initially equals the base map.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if rank < 1 or rank > min(d_in, d_out):
            raise ValidationError(f"lora rank {rank} not in [1, {min(d_in, d_out)}]")
        self.base = nn.Linear(d_in, d_out, dtype=dtype)
        self.lora_a = nn.Parameter(torch.randn(d_out, rank, dtype=dtype) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(rank, d_in, dtype=dtype))
        self.scale = alpha / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_b), self.lora_a)


def lora_forward(h: torch.Tensor, base_weight: torch.Tensor, lora_a: torch.Tensor,
                 lora_b: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Standalone adapted map on a column vector or batch of columns:
    W h + s * A (B h)."""
    return base_weight @ h + scale * (lora_a @ (lora_b @ h))


# ---------------------------------------------------------------------------
# transformer


@dataclass
class LmConfig:
    vocab_size: int
    d_z: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 0  # 0 -> 4 * d_z
    max_seq: int = 512
    tie_embeddings: bool = False
    lora: Optional[LoraConfig] = None

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_z
        if self.d_z % self.n_heads:
            raise ValidationError("d_z must be divisible by n_heads")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "lora"}
        d["lora"] = None if self.lora is None else {
            "rank": self.lora.rank, "alpha": self.lora.alpha,
            "targets": list(self.lora.targets),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        d = dict(d)
        lora = d.pop("lora", None)
        cfg = cls(**d)
        if lora:
            cfg.lora = LoraConfig(lora["rank"], lora["alpha"], tuple(lora["targets"]))
        return cfg


def _maybe_lora(d_in: int, d_out: int, name: str, lora: Optional[LoraConfig],
                dtype: torch.dtype) -> nn.Module:
    if lora is not None and name in lora.targets:
        return LoraLinear(d_in, d_out, lora.rank, lora.alpha, dtype=dtype)
    return nn.Linear(d_in, d_out, dtype=dtype)


class Block(nn.Module):
    def __init__(self, cfg: LmConfig, dtype: torch.dtype):
        super().__init__()
        d = cfg.d_z
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d, dtype=dtype)
        self.q = _maybe_lora(d, d, "q", cfg.lora, dtype)
        self.k = _maybe_lora(d, d, "k", cfg.lora, dtype)
        self.v = _maybe_lora(d, d, "v", cfg.lora, dtype)
        self.o = _maybe_lora(d, d, "o", cfg.lora, dtype)
        self.ln2 = nn.LayerNorm(d, dtype=dtype)
        self.fc1 = nn.Linear(d, cfg.d_ff, dtype=dtype)
        self.fc2 = nn.Linear(cfg.d_ff, d, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.n_heads
        h = self.ln1(x)
        q = self.q(h).view(b, t, self.n_heads, hd).transpose(1, 2)
        k = self.k(h).view(b, t, self.n_heads, hd).transpose(1, 2)
        v = self.v(h).view(b, t, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), 1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.o(y)
        h = self.ln2(x)
        return x + self.fc2(F.gelu(self.fc1(h)))


class TinyLm(nn.Module):
    """Causal decoder taking optional continuous prefix tokens before text."""

    def __init__(self, cfg: LmConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.d_z, dtype=dtype)
        self.pos_embedding = nn.Embedding(cfg.max_seq, cfg.d_z, dtype=dtype)
        self.blocks = nn.ModuleList(Block(cfg, dtype) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_z, dtype=dtype)
        if cfg.tie_embeddings:
            self.head = None
        else:
            self.head = nn.Linear(cfg.d_z, cfg.vocab_size, bias=False, dtype=dtype)

    def forward(self, token_ids: torch.Tensor, prefix: torch.Tensor | None = None) -> torch.Tensor:
        """Logits over the full sequence [prefix slots][tokens]."""
        x = self.token_embedding(token_ids)
        if prefix is not None:
            if prefix.dim() == 2:
                prefix = prefix.unsqueeze(0).expand(x.shape[0], -1, -1)
            x = torch.cat([prefix.to(x.dtype), x], dim=1)
        t = x.shape[1]
        if t > self.cfg.max_seq:
            raise ValidationError(f"sequence length {t} exceeds max_seq {self.cfg.max_seq}")
        x = x + self.pos_embedding(torch.arange(t, device=x.device))
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        if self.head is not None:
            return self.head(x)
        return x @ self.token_embedding.weight.T


def with_adapters(model: TinyLm, lora: LoraConfig, dtype: torch.dtype = torch.float32) -> TinyLm:
    """Clone a plain model into one carrying zero-initialized LoRA adapters;
    base weights are copied over, so initial logits match the source model."""
    cfg = LmConfig.from_dict({**model.cfg.to_dict(), "lora": None})
    cfg.lora = lora
    adapted = TinyLm(cfg, dtype=dtype)
    src = model.state_dict()
    dst = adapted.state_dict()
    for name in dst:
        if "lora_a" in name or "lora_b" in name:
            continue  # keep the fresh factors; B is zero so output is unchanged
        key = name.replace(".base.", ".")
        dst[name].copy_(src[key])
    adapted.load_state_dict(dst)
    return adapted


# ---------------------------------------------------------------------------
# prompt assembly

DEFAULT_INSTRUCTION = "describe the aerial scene"


@dataclass
class PromptAssembly:
    prefix: torch.Tensor  # (P, d_z)
    tag_text: str
    instruction: str
    target_caption: Optional[str] = None

    @property
    def prompt_text(self) -> str:
        return f"{self.instruction} {self.tag_text}".strip()


def order_tags(tags: dict[str, float] | Iterable[str]) -> list[str]:
    """Descending predicted probability, ties (and prob-less input) lexicographic."""
    if isinstance(tags, dict):
        return sorted(tags, key=lambda t: (-tags[t], t))
    return sorted(tags)


def assemble_prompt(
    prefix: torch.Tensor,
    tags: dict[str, float] | Iterable[str],
    instruction: str = DEFAULT_INSTRUCTION,
    target_caption: Optional[str] = None,
    use_tags: bool = True,
) -> PromptAssembly:
    """Deterministic prompt: instruction text, then the tag list (or 'none').

    With use_tags=False the prompt carries no tag clause at all (ablation arm).
    """
    if use_tags:
        ordered = order_tags(tags)
        tag_text = "tags : " + (" , ".join(ordered) if ordered else "none")
    else:
        tag_text = ""
    return PromptAssembly(prefix=prefix, tag_text=tag_text, instruction=instruction,
                          target_caption=target_caption)


def assembly_ids(assembly: PromptAssembly, tokenizer: WordTokenizer) -> tuple[list[int], list[int]]:
    """(prompt ids incl. <bos>, caption ids incl. <eos>); caption part may be []."""
    prompt_ids = [BOS] + tokenizer.encode(assembly.prompt_text)
    caption_ids: list[int] = []
    if assembly.target_caption is not None:
        caption_ids = tokenizer.encode(assembly.target_caption) + [EOS]
    return prompt_ids, caption_ids


def caption_loss(assembly: PromptAssembly, model: TinyLm, tokenizer: WordTokenizer) -> torch.Tensor:
    """Mean token-level cross-entropy over caption positions only."""
    if assembly.target_caption is None:
        raise ValidationError("assembly has no target caption")
    prompt_ids, caption_ids = assembly_ids(assembly, tokenizer)
    if len(caption_ids) <= 1:  # only <eos> would remain
        raise ValidationError("caption tokenizes to length 0")
    ids = torch.tensor([prompt_ids + caption_ids])
    logits = model(ids, prefix=assembly.prefix)
    p = assembly.prefix.shape[-2]
    # logits at position i predict sequence element i+1; caption targets start
    # right after the prompt
    start = p + len(prompt_ids) - 1
    pred = logits[0, start : start + len(caption_ids)]
    target = torch.tensor(caption_ids)
    return F.cross_entropy(pred, target)


@dataclass
class DecodeResult:
    caption: str
    token_ids: list[int]
    truncated: bool


def decode(
    assembly: PromptAssembly,
    model: TinyLm,
    tokenizer: WordTokenizer,
    mode: str = "greedy",
    k: int = 50,
    seed: int = 0,
    max_len: int = 64,
) -> DecodeResult:
    """Greedy (argmax, lowest-id tie-break) or seeded top-k sampling."""
    if mode not in ("greedy", "topk"):
        raise ValidationError(f"unknown decode mode {mode!r}")
    prompt_ids, _ = assembly_ids(assembly, tokenizer)
    gen = torch.Generator().manual_seed(seed)
    out: list[int] = []
    truncated = True
    with torch.no_grad():
        for _ in range(max_len):
            ids = torch.tensor([prompt_ids + out])
            logits = model(ids, prefix=assembly.prefix)[0, -1]
            if mode == "greedy" or k == 1:
                nxt = int(torch.argmax(logits))  # argmax returns the lowest index on ties
            else:
                kk = min(k, logits.shape[0])
                top_vals, top_idx = torch.topk(logits, kk)
                probs = torch.softmax(top_vals, dim=0)
                nxt = int(top_idx[torch.multinomial(probs, 1, generator=gen)])
            if nxt == EOS:
                truncated = False
                break
            out.append(nxt)
    return DecodeResult(caption=tokenizer.decode(out), token_ids=out, truncated=truncated)


# ---------------------------------------------------------------------------
# tuning regimes


@dataclass
class VisualPrefix:
    name: str = "visual_prefix"


@dataclass
class PartialUnfreezeLoRA:
    top_fraction: float = 0.3
    lora: LoraConfig = field(default_factory=LoraConfig)
    name: str = "partial_unfreeze_lora"

    def __post_init__(self):
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValidationError("top_fraction must be in (0, 1]")


Regime = VisualPrefix | PartialUnfreezeLoRA


@dataclass
class FreezePlan:
    regime_name: str
    trainable: list[str]
    frozen: list[str]
    unfrozen_layers: list[int]


def set_tuning_regime(pipeline: nn.Module, regime: Regime) -> FreezePlan:
    """Apply a freeze plan to a pipeline with .tag_head, .bridge, .lm members.

    VisualPrefix: the whole LM is frozen; only bridge + tag head train.
    PartialUnfreezeLoRA: every LoRA factor trains; base weights train only in
    the ceil(top_fraction * L) topmost blocks; embeddings and head stay frozen.
    """
    lm: TinyLm = pipeline.lm
    unfrozen: list[int] = []
    if isinstance(regime, VisualPrefix):
        for p in lm.parameters():
            p.requires_grad_(False)
    else:
        n = len(lm.blocks)
        n_unfrozen = math.ceil(regime.top_fraction * n)
        unfrozen = list(range(n - n_unfrozen, n))
        for p in lm.parameters():
            p.requires_grad_(False)
        for name, p in lm.named_parameters():
            if "lora_a" in name or "lora_b" in name:
                p.requires_grad_(True)
        for i in unfrozen:
            for name, p in lm.blocks[i].named_parameters():
                if "lora_a" not in name and "lora_b" not in name:
                    p.requires_grad_(True)
    for p in pipeline.tag_head.parameters():
        p.requires_grad_(True)
    for p in pipeline.bridge.parameters():
        p.requires_grad_(True)
    trainable = [n for n, p in pipeline.named_parameters() if p.requires_grad]
    frozen = [n for n, p in pipeline.named_parameters() if not p.requires_grad]
    return FreezePlan(
        regime_name=regime.name, trainable=trainable, frozen=frozen,
        unfrozen_layers=unfrozen,
    )

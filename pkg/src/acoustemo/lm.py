"""Prompt construction, multimodal token fusion and a toy causal LM with LoRA.

The language model is a small pre-norm transformer whose base weights are
frozen.  Trainable pieces are the LoRA pairs on the attention query/value
projections and the linear projection that maps acoustic tokens into the LM
embedding space.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .qformer import MultiScaleAcousticTokens
from .segmentation import UtteranceSpan

__all__ = [
    "SPECIAL_TOKENS",
    "Vocabulary",
    "tokenize",
    "detokenize",
    "format_label_list",
    "Prompt",
    "build_prompt",
    "VocabularyOverflow",
    "LengthBudgetExceeded",
    "BlockOrderError",
    "EmptyAnswer",
    "RankTooLarge",
    "TokenBlock",
    "TokenBlockSequence",
    "concat_multimodal",
    "LoraAdapter",
    "lora_wrap",
    "LMConfig",
    "TinyCausalLM",
    "lm_loss",
    "answer_token_losses",
    "generate",
]

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS, "<vis>", "<aud>", "<txt>")
DEFAULT_INSTRUCTION = "List the emotions of the speaker."

_TOKEN_RE = re.compile(r"'[^'\s]+'|\d|[^\W\d]+|[^\w\s]")


class VocabularyOverflow(ValueError):
    pass


class LengthBudgetExceeded(ValueError):
    pass


class BlockOrderError(ValueError):
    pass


class EmptyAnswer(ValueError):
    pass


class RankTooLarge(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Split into lowercase words, single digits, quoted labels and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    out = ""
    for tok in tokens:
        if tok in SPECIAL_TOKENS:
            continue
        if out and not out.endswith("[") and tok not in {",", "]", ".", "?", "!"}:
            out += " "
        out += tok
    return out


def format_label_list(labels: Sequence[str]) -> str:
    """Render labels as ``['a', 'b']``."""
    return "[" + ", ".join(f"'{lab}'" for lab in labels) + "]"


class Vocabulary:
    """Word-level vocabulary; ids 0..len(SPECIAL_TOKENS)-1 are the specials."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts: Sequence[str]) -> "Vocabulary":
        words = sorted({tok for text in texts for tok in tokenize(text)})
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return detokenize([self.itos[i] for i in ids])

    @property
    def bos(self) -> int:
        return self.stoi[BOS]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]


# --------------------------------------------------------------------------
# Prompt
# --------------------------------------------------------------------------


@dataclass
class Prompt:
    text: str
    ids: list[int]
    n_utterances: int
    n_kept: int

    @property
    def truncated(self) -> bool:
        return self.n_kept < self.n_utterances


def utterance_line(u: UtteranceSpan) -> str:
    return f"[{u.index} | {u.t_start:.2f}–{u.t_end:.2f}] {u.text}"


def build_prompt(utterances: Sequence[UtteranceSpan], instruction: str, vocab: Vocabulary,
                 max_tokens: int | None = None) -> Prompt:
    """Timestamped utterance lines followed by the instruction.

    When ``max_tokens`` is set, utterances are kept from the earliest onward
    until the next line would overflow the budget.
    """
    instr_ids = vocab.encode(instruction)
    budget = None if max_tokens is None else max_tokens - 1 - len(instr_ids)
    if budget is not None and budget < 0:
        raise VocabularyOverflow(
            f"instruction needs {len(instr_ids) + 1} tokens, budget is {max_tokens}")
    lines: list[str] = []
    body: list[int] = []
    for u in utterances:
        line = utterance_line(u)
        ids = vocab.encode(line)
        if budget is not None and len(body) + len(ids) > budget:
            break
        lines.append(line)
        body.extend(ids)
    lines.append(instruction)
    return Prompt("\n".join(lines), [vocab.bos] + body + instr_ids,
                  n_utterances=len(utterances), n_kept=len(lines) - 1)


# --------------------------------------------------------------------------
# Multimodal sequence
# --------------------------------------------------------------------------

_ORDER = {"visual": 0, "acoustic_global": 1, "acoustic_local": 2, "text": 3}


@dataclass
class TokenBlock:
    kind: str
    rows: Tensor | None = None      # embedded blocks
    ids: list[int] | None = None    # text block
    index: int | None = None        # acoustic_local utterance/window id

    @property
    def length(self) -> int:
        return len(self.ids) if self.kind == "text" else self.rows.shape[0]


@dataclass
class TokenBlockSequence:
    blocks: list[TokenBlock]
    max_sequence_length: int = 1024
    truncated_prompt: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        kinds = self.kinds()
        ranks = [_ORDER[k] for k in kinds]
        if ranks != sorted(ranks):
            raise BlockOrderError(f"blocks out of order: {kinds}")
        if kinds.count("text") != 1:
            raise BlockOrderError("exactly one trailing text block required")
        if kinds.count("visual") > 1 or kinds.count("acoustic_global") > 1:
            raise BlockOrderError("at most one visual and one global acoustic block")
        widths = {b.rows.shape[1] for b in self.blocks if b.kind.startswith("acoustic")}
        if len(widths) > 1:
            raise BlockOrderError(f"acoustic blocks disagree in width: {widths}")
        if self.length > self.max_sequence_length:
            raise LengthBudgetExceeded(
                f"sequence of {self.length} tokens exceeds {self.max_sequence_length}")

    @property
    def length(self) -> int:
        return sum(b.length for b in self.blocks)

    @property
    def text_ids(self) -> list[int]:
        return self.blocks[-1].ids

    def kinds(self) -> list[str]:
        return [b.kind for b in self.blocks]


def concat_multimodal(t_v, t_a: MultiScaleAcousticTokens | None, t_lq: Sequence[int],
                      max_sequence_length: int = 1024) -> TokenBlockSequence:
    """Assemble ``[T_V; T_A^global; T_A^1..N; T_Lq]``.

    ``t_v`` is an ingested visual matrix, an int (zero-stub with that many
    rows; width is resolved by the LM), or ``None``.
    """
    blocks: list[TokenBlock] = []
    if t_v is not None:
        if isinstance(t_v, int):
            blocks.append(TokenBlock("visual", rows=Tensor(np.zeros((t_v, 0)))))
        else:
            blocks.append(TokenBlock("visual", rows=t_v if isinstance(t_v, Tensor) else Tensor(t_v)))
    if t_a is not None:
        if t_a.global_block is not None:
            blocks.append(TokenBlock("acoustic_global", rows=t_a.global_block))
        for idx, blk in zip(t_a.utterance_ids, t_a.local_blocks):
            blocks.append(TokenBlock("acoustic_local", rows=blk, index=idx))
    blocks.append(TokenBlock("text", ids=list(t_lq)))
    return TokenBlockSequence(blocks, max_sequence_length)


# --------------------------------------------------------------------------
# LoRA
# --------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    weight: Tensor   # frozen, d_out x d_in
    a: Tensor        # r x d_in
    b: Tensor        # d_out x r
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def effective_weight(self) -> np.ndarray:
        return self.weight.data + self.scaling * (self.b.data @ self.a.data)

    def __call__(self, h: Tensor) -> Tensor:
        base = h @ self.weight.T
        delta = (h @ self.a.T) @ self.b.T
        return base + ad.scale(delta, self.scaling)


def lora_wrap(weight: Tensor, r: int, alpha: float, rng: np.random.Generator) -> LoraAdapter:
    d_out, d_in = weight.shape
    if r < 1:
        raise RankTooLarge(f"rank must be >= 1, got {r}")
    if r > min(d_in, d_out):
        raise RankTooLarge(f"rank {r} exceeds min({d_in}, {d_out})")
    weight.requires_grad = False
    a = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(r, d_in)), requires_grad=True)
    b = Tensor(np.zeros((d_out, r)), requires_grad=True)
    return LoraAdapter(weight, a, b, r, float(alpha))


# --------------------------------------------------------------------------
# Toy causal LM
# --------------------------------------------------------------------------


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    d_ff: int | None = None
    d_acoustic: int | None = None
    max_sequence_length: int = 1024
    lora_rank: int = 8
    lora_alpha: float = 16.0
    tie_output: bool = False
    zero_output: bool = False
    use_positions: bool = True
    init_std: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class _Layer:
    q: LoraAdapter
    k: Tensor
    v: LoraAdapter
    o: Tensor
    ff1: Tensor
    ff2: Tensor


class TinyCausalLM:
    """Pre-norm transformer: single-head causal attention + GELU MLP per layer."""

    def __init__(self, config: LMConfig, rng: np.random.Generator):
        c = config
        self.config = c
        d = c.d_model
        d_ff = c.d_ff or 4 * d
        d_ac = c.d_acoustic or d
        std = c.init_std if c.init_std is not None else 1.0 / math.sqrt(d)

        def frozen(*shape, s=std):
            return Tensor(rng.normal(0.0, s, size=shape))

        self.tok_emb = frozen(c.vocab_size, d, s=1.0)
        self.layers: list[_Layer] = []
        for _ in range(c.n_layers):
            self.layers.append(_Layer(
                q=lora_wrap(frozen(d, d), c.lora_rank, c.lora_alpha, rng),
                k=frozen(d, d),
                v=lora_wrap(frozen(d, d), c.lora_rank, c.lora_alpha, rng),
                o=frozen(d, d),
                ff1=frozen(d, d_ff),
                ff2=frozen(d_ff, d, s=1.0 / math.sqrt(d_ff)),
            ))
        if c.tie_output:
            self.out = None
        elif c.zero_output:
            self.out = Tensor(np.zeros((d, c.vocab_size)))
        else:
            self.out = frozen(d, c.vocab_size)
        self.proj_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_ac), size=(d_ac, d)), requires_grad=True)
        self.proj_b = Tensor(np.zeros(d), requires_grad=True)
        self._pos = _sinusoid(c.max_sequence_length, d) if c.use_positions else None

    # -- parameter bookkeeping ------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        named = {"lm.tok_emb": self.tok_emb, "lm.proj_w": self.proj_w, "lm.proj_b": self.proj_b}
        if self.out is not None:
            named["lm.out"] = self.out
        for i, L in enumerate(self.layers):
            p = f"lm.layers.{i}"
            named.update({
                f"{p}.q.weight": L.q.weight, f"{p}.q.lora_a": L.q.a, f"{p}.q.lora_b": L.q.b,
                f"{p}.k": L.k,
                f"{p}.v.weight": L.v.weight, f"{p}.v.lora_a": L.v.a, f"{p}.v.lora_b": L.v.b,
                f"{p}.o": L.o, f"{p}.ff1": L.ff1, f"{p}.ff2": L.ff2,
            })
        return named

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if not t.requires_grad}

    def lora_adapters(self) -> list[LoraAdapter]:
        return [ad_ for L in self.layers for ad_ in (L.q, L.v)]

    # -- forward ----------------------------------------------------------------

    def embed(self, seq: TokenBlockSequence, extra_ids: Sequence[int] = ()) -> Tensor:
        d = self.config.d_model
        parts = []
        for blk in seq.blocks:
            if blk.kind == "visual":
                rows = blk.rows
                if rows.shape[1] == 0:
                    rows = Tensor(np.zeros((rows.shape[0], d)))
                elif rows.shape[1] != d:
                    raise ad.ShapeMismatch(f"visual block width {rows.shape[1]} != d_model {d}")
                parts.append(rows)
            elif blk.kind.startswith("acoustic"):
                parts.append(ad.add(blk.rows @ self.proj_w, self.proj_b))
        ids = list(seq.text_ids) + list(extra_ids)
        if ids:
            parts.append(ad.take_rows(self.tok_emb, ids))
        x = parts[0] if len(parts) == 1 else ad.concat_rows(parts)
        n = x.shape[0]
        if n > self.config.max_sequence_length:
            raise LengthBudgetExceeded(f"{n} positions exceed {self.config.max_sequence_length}")
        if self._pos is not None:
            x = ad.add(x, Tensor(self._pos[:n]))
        return x

    def hidden(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        mask = np.tril(np.ones((n, n), dtype=bool))
        scale = 1.0 / math.sqrt(self.config.d_model)
        for L in self.layers:
            h = ad.rms_norm_rows(x)
            q, k, v = L.q(h), h @ L.k, L.v(h)
            attn = ad.softmax_rows(ad.scale(q @ k.T, scale), mask)
            x = x + (attn @ v) @ L.o
            h = ad.rms_norm_rows(x)
            x = x + ad.gelu(h @ L.ff1) @ L.ff2
        return ad.rms_norm_rows(x)

    def logits_at(self, h: Tensor, positions: Sequence[int]) -> Tensor:
        rows = ad.take_rows(h, positions)
        if self.out is None:
            return rows @ self.tok_emb.T
        return rows @ self.out


def answer_token_losses(model: TinyCausalLM, seq: TokenBlockSequence,
                        answer_ids: Sequence[int]) -> Tensor:
    """Per-answer-token negative log-likelihood, conditioned on everything before it."""
    answer_ids = list(answer_ids)
    if not answer_ids:
        raise EmptyAnswer("answer must contain at least one token")
    x = model.embed(seq, answer_ids[:-1])
    h = model.hidden(x)
    first = seq.length - 1
    positions = list(range(first, first + len(answer_ids)))
    return ad.cross_entropy_rows(model.logits_at(h, positions), answer_ids)


def lm_loss(model: TinyCausalLM, seq: TokenBlockSequence, answer_ids: Sequence[int]) -> Tensor:
    """Summed answer-token NLL; prompt and multimodal positions carry no loss."""
    return ad.sum_all(answer_token_losses(model, seq, answer_ids))


def generate(model: TinyCausalLM, seq: TokenBlockSequence, max_new: int,
             vocab: Vocabulary) -> str:
    """Greedy decoding until ``<eos>`` or ``max_new`` tokens."""
    out: list[int] = []
    with ad.no_grad():
        for _ in range(max_new):
            h = model.hidden(model.embed(seq, out))
            logits = model.logits_at(h, [h.shape[0] - 1]).data[0]
            nxt = int(np.argmax(logits))
            if nxt == vocab.eos:
                break
            out.append(nxt)
    return vocab.decode(out)

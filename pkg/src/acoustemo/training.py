"""Optimizer, learning-rate schedule, training loop and the ablation harness."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data_io import (
    Dialogue,
    Manifest,
    read_tensor_file,
    tensor_to_text,
    text_to_tensor,
    write_tensor_file,
)
from .evaluation import ReportRow, SynonymMap, emit_report, score_corpus
from .lm import (
    DEFAULT_INSTRUCTION,
    LMConfig,
    TinyCausalLM,
    Vocabulary,
    build_prompt,
    concat_multimodal,
    format_label_list,
    generate,
    lm_loss,
    tokenize,
)
from .qformer import QFormerParams, encode_dialogue

__all__ = [
    "VARIANTS",
    "TrainConfig",
    "ConfigError",
    "DataError",
    "CheckpointMismatch",
    "lr_at",
    "OptimizerState",
    "adamw_step",
    "AcoustEmoModel",
    "TrainResult",
    "run_training",
    "evaluate",
    "run_ablation",
    "save_checkpoint",
    "load_checkpoint",
    "tensor_digest",
]

log = logging.getLogger(__name__)

# report row order
VARIANTS = ("full", "no_global", "fixed_window", "no_utterance_aware")
VARIANT_NAMES = {
    "full": "AcoustEmo (Full)",
    "no_global": "w/o Global Acoustic Q-Former",
    "fixed_window": "w/ fixed-length windows (2s)",
    "no_utterance_aware": "w/o Utterance-Aware A-QF",
}


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


class DataError(ValueError):
    def __init__(self, message: str, record_id: str | None = None):
        super().__init__(message)
        self.record_id = record_id


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int | None = None
    base_lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    epochs: int = 3
    batch_size: int = 8
    variant: str = "full"
    fixed_window_seconds: float = 2.0
    n_queries: int = 32
    d_qformer: int = 64
    d_model: int = 64
    n_layers: int = 2
    lora_rank: int = 8
    lora_alpha: float = 16.0
    max_sequence_length: int = 1024
    visual_tokens: int = 0
    share_qformer: bool = False
    max_new_tokens: int = 12
    instruction: str = DEFAULT_INSTRUCTION
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("seed required", "seed")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in (0, 1)", "warmup_fraction")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "epochs")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)", name)
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0", "base_lr")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}", "variant")
        if self.n_queries < 1:
            raise ConfigError("n_queries must be >= 1", "n_queries")
        if self.fixed_window_seconds <= 0:
            raise ConfigError("fixed_window_seconds must be positive", "fixed_window_seconds")
        if self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps must be >= 0", "pretrain_steps")

    @classmethod
    def from_mapping(cls, values: dict, strict: bool = True) -> "TrainConfig":
        """Build from string or typed values; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                if strict:
                    raise ConfigError(f"unknown config key {key!r}", key)
                continue
            kw[key] = _coerce(known[key].type, raw, key)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(type_name, raw, key):
    if not isinstance(raw, str):
        return raw
    t = str(type_name)
    try:
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        if t == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}", key) from exc
    return raw


# --------------------------------------------------------------------------
# Schedule and optimizer
# --------------------------------------------------------------------------


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return math.ceil(cfg.warmup_fraction * total_steps)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to exactly 0."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return cfg.base_lr * step / warm
    if total_steps == warm:
        return cfg.base_lr if step < total_steps else 0.0
    progress = (step - warm) / (total_steps - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One AdamW update in place: bias-corrected Adam plus decoupled weight decay."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ad.ShapeMismatch(f"grad for {name}: {g.shape} vs {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        new = p.data * (1.0 - lr * weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = ad._check_finite(new, f"adamw update of {name}")


# --------------------------------------------------------------------------
# Model bundle
# --------------------------------------------------------------------------


def _active_modules(variant: str) -> tuple[bool, bool]:
    """(uses local Q-Former, uses global Q-Former)."""
    return {
        "full": (True, True),
        "no_global": (True, False),
        "fixed_window": (True, True),
        "no_utterance_aware": (False, True),
    }[variant]


class AcoustEmoModel:
    """Q-Formers + acoustic projection + LoRA-adapted toy LM for one variant."""

    def __init__(self, cfg: TrainConfig, vocab: Vocabulary, d_in: int):
        self.cfg = cfg
        self.vocab = vocab
        self.d_in = d_in
        # independent streams so every variant starts from the same LM and Q-Former draws
        use_local, use_global = _active_modules(cfg.variant)
        self.local_qf = None
        if use_local:
            self.local_qf = QFormerParams.init(cfg.n_queries, d_in, cfg.d_qformer,
                                               np.random.default_rng([cfg.seed, 11]))
        if use_global and cfg.share_qformer and self.local_qf is not None:
            self.global_qf = self.local_qf
        elif use_global:
            self.global_qf = QFormerParams.init(cfg.n_queries, d_in, cfg.d_qformer,
                                                np.random.default_rng([cfg.seed, 12]))
        else:
            self.global_qf = None
        self.lm = TinyCausalLM(LMConfig(
            vocab_size=len(vocab), d_model=cfg.d_model, n_layers=cfg.n_layers,
            d_acoustic=cfg.d_qformer, max_sequence_length=cfg.max_sequence_length,
            lora_rank=cfg.lora_rank, lora_alpha=cfg.lora_alpha), np.random.default_rng([cfg.seed, 13]))

    @property
    def active_modules(self) -> list[str]:
        mods = []
        if self.global_qf is not None:
            mods.append("global_qformer")
        if self.local_qf is not None:
            mods.append("fixed_window_qformer" if self.cfg.variant == "fixed_window"
                        else "utterance_qformer")
        return mods + ["acoustic_projection", "lora"]

    def named_tensors(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        if self.local_qf is not None:
            named.update(self.local_qf.named_tensors("local"))
        if self.global_qf is not None and self.global_qf is not self.local_qf:
            named.update(self.global_qf.named_tensors("global"))
        named.update(self.lm.named_tensors())
        return named

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if not t.requires_grad}

    def sequence(self, dlg: Dialogue):
        fixed = self.cfg.fixed_window_seconds if self.cfg.variant == "fixed_window" else None
        tokens = encode_dialogue(self.local_qf, self.global_qf, dlg.sequence, dlg.utterances,
                                 fixed_window=fixed)
        budget = self.cfg.max_sequence_length - tokens.token_count - self.cfg.visual_tokens \
            - self.cfg.max_new_tokens
        prompt = build_prompt(dlg.utterances, self.cfg.instruction, self.vocab, max_tokens=budget)
        seq = concat_multimodal(self.cfg.visual_tokens or None, tokens, prompt.ids,
                                self.cfg.max_sequence_length)
        seq.truncated_prompt = prompt.truncated
        return seq

    def answer_ids(self, labels) -> list[int]:
        return self.vocab.encode(format_label_list(sorted(labels))) + [self.vocab.eos]

    def loss(self, dlg: Dialogue) -> Tensor:
        return lm_loss(self.lm, self.sequence(dlg), self.answer_ids(dlg.labels))

    def predict(self, dlg: Dialogue) -> str:
        with ad.no_grad():
            seq = self.sequence(dlg)
        return generate(self.lm, seq, self.cfg.max_new_tokens, self.vocab)

    def config_record(self) -> dict:
        return {"train": self.cfg.to_dict(), "lm": self.lm.config.to_dict(), "d_in": self.d_in,
                "vocab": self.vocab.itos, "active_modules": self.active_modules}


def build_vocabulary(dialogues: Sequence[Dialogue], instruction: str) -> Vocabulary:
    texts = [instruction, "[ ] | – , . 0 1 2 3 4 5 6 7 8 9"]
    for dlg in dialogues:
        texts.extend(u.text for u in dlg.utterances)
        texts.append(format_label_list(sorted(dlg.labels)))
    return Vocabulary.build(texts)


def tensor_digest(tensors: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name].data).tobytes())
    return h.hexdigest()


_PRETRAIN_CACHE: dict[str, dict[str, np.ndarray]] = {}


def pretrain_base_lm(model: AcoustEmoModel, dialogues: Sequence[Dialogue]) -> list[float]:
    """Fit the base LM on text only (prompt -> label list) before it is frozen.

    This stands in for the pretrained foundation model: afterwards the LM
    emits well-formed label lists but has never seen acoustic tokens.  LoRA
    pairs and the acoustic projection are left untouched.  Results are cached
    per (seed, vocabulary, data, settings) so ablation variants share one base.
    """
    cfg = model.cfg
    lm = model.lm
    if cfg.pretrain_steps == 0:
        return []
    base = {k: t for k, t in lm.frozen().items()}
    examples = [(build_prompt(d.utterances, cfg.instruction, model.vocab).ids, model.answer_ids(d.labels))
                for d in dialogues]
    key = hashlib.sha256(json.dumps([cfg.seed, model.vocab.itos, lm.config.to_dict(), cfg.pretrain_steps,
                                     cfg.pretrain_lr, cfg.batch_size, examples]).encode()).hexdigest()
    if key in _PRETRAIN_CACHE:
        for k, arr in _PRETRAIN_CACHE[key].items():
            base[k].data = arr
        return []
    lora = {k: t for k, t in lm.trainable().items()}
    for t in lora.values():
        t.requires_grad = False
    for t in base.values():
        t.requires_grad = True
    rng = np.random.default_rng([cfg.seed, 2])
    state = OptimizerState()
    sched = replace(cfg, base_lr=cfg.pretrain_lr)
    losses = []
    try:
        for step in range(cfg.pretrain_steps):
            for t in base.values():
                t.grad = None
            batch = rng.choice(len(examples), size=min(cfg.batch_size, len(examples)), replace=False)
            total = 0.0
            for i in batch:
                prompt_ids, answer = examples[i]
                seq = concat_multimodal(None, None, prompt_ids, cfg.max_sequence_length)
                loss = ad.scale(lm_loss(lm, seq, answer), 1.0 / len(batch))
                ad.backward(loss)
                total += float(loss.data)
            adamw_step(base, {k: t.grad for k, t in base.items() if t.grad is not None}, state,
                       lr_at(step, cfg.pretrain_steps, sched), cfg.beta1, cfg.beta2, cfg.eps, 0.0)
            losses.append(total)
    finally:
        for t in base.values():
            t.requires_grad = False
            t.grad = None
        for t in lora.values():
            t.requires_grad = True
    _PRETRAIN_CACHE[key] = {k: t.data for k, t in base.items()}
    return losses


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CONFIG_KEY = "__config__"


def save_checkpoint(model: AcoustEmoModel, path) -> None:
    items = [(CONFIG_KEY, text_to_tensor(json.dumps(model.config_record(), sort_keys=True)))]
    items += [(k, t.data) for k, t in model.named_tensors().items()]
    write_tensor_file(path, items)


def load_checkpoint(path) -> AcoustEmoModel:
    raw = read_tensor_file(path)
    if CONFIG_KEY not in raw:
        raise CheckpointMismatch(f"{path}: no config record")
    rec = json.loads(tensor_to_text(raw.pop(CONFIG_KEY)))
    cfg = TrainConfig.from_mapping(rec["train"])
    model = AcoustEmoModel(cfg, Vocabulary(rec["vocab"][7:]), rec["d_in"])
    if model.vocab.itos != rec["vocab"]:
        raise CheckpointMismatch(f"{path}: vocabulary does not round-trip")
    named = model.named_tensors()
    if set(named) != set(raw):
        missing, extra = set(named) - set(raw), set(raw) - set(named)
        raise CheckpointMismatch(f"{path}: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, t in named.items():
        if t.data.shape != raw[k].shape:
            raise CheckpointMismatch(f"{path}: {k} has shape {raw[k].shape}, expected {t.data.shape}")
        t.data = raw[k]
    return model


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: AcoustEmoModel
    epoch_losses: list[float]
    log_lines: list[str]
    frozen_digest_before: str
    frozen_digest_after: str


def _load_split(manifest: Manifest, split: str) -> list[Dialogue]:
    out = []
    for did in manifest.ids(split):
        try:
            dlg = manifest.load_dialogue(did)
        except (KeyError, ValueError) as exc:
            raise DataError(f"dialogue {did}: {exc}", did) from exc
        if not dlg.labels:
            raise DataError(f"dialogue {did}: no ground-truth labels", did)
        out.append(dlg)
    return out


def run_training(cfg: TrainConfig, manifest: Manifest,
                 on_step: Callable[[str], None] | None = None) -> TrainResult:
    """Train the variant's trainable tensors on the manifest's train split."""
    cfg.validate()
    train = _load_split(manifest, "train")
    if not train:
        raise DataError("no training dialogues in manifest")
    dims = {d.sequence.dim for d in train}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dims {sorted(dims)}")
    vocab = build_vocabulary(train, cfg.instruction)
    model = AcoustEmoModel(cfg, vocab, dims.pop())
    pretrain_base_lm(model, train)
    params = model.trainable()
    frozen_before = tensor_digest(model.frozen())

    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    state = OptimizerState()
    order_rng = np.random.default_rng([cfg.seed, 1])
    header = f"# variant={cfg.variant} active_modules={','.join(model.active_modules)}"
    log_lines = [header]
    if on_step:
        on_step(header)
    epoch_losses = []
    step = 0
    for _epoch in range(cfg.epochs):
        order = order_rng.permutation(len(train))
        running = []
        for b in range(steps_per_epoch):
            batch = [train[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            for p in params.values():
                p.grad = None
            batch_loss = 0.0
            for dlg in batch:
                loss = ad.scale(model.loss(dlg), 1.0 / len(batch))
                ad.backward(loss)
                batch_loss += float(loss.data)
            lr = lr_at(step, total, cfg)
            adamw_step(params, {k: p.grad for k, p in params.items() if p.grad is not None},
                       state, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            line = f"{step}\t{lr:.6e}\t{batch_loss:.6f}"
            log_lines.append(line)
            if on_step:
                on_step(line)
            running.append(batch_loss)
            step += 1
        epoch_losses.append(float(np.mean(running)))
    for p in params.values():
        p.grad = None
    return TrainResult(model, epoch_losses, log_lines, frozen_before, tensor_digest(model.frozen()))


def evaluate(model: AcoustEmoModel, manifest: Manifest, split: str = "test",
             syn: SynonymMap | None = None) -> tuple[float, float, list[str]]:
    """Greedy-decode every dialogue in ``split``; returns (accuracy_s, recall_s, predictions)."""
    dialogues = _load_split(manifest, split)
    if not dialogues:
        raise DataError(f"no evaluation samples in split {split!r}")
    preds = [model.predict(d) for d in dialogues]
    acc, rec = score_corpus(preds, [d.labels for d in dialogues], syn)
    return acc, rec, preds


@dataclass
class AblationResult:
    rows: list[ReportRow]
    epoch_losses: dict[str, list[float]]

    def report(self) -> str:
        return emit_report(self.rows, title="Ablation (synthetic corpus, held-out split)")

    def avg(self, variant: str) -> float:
        return self.rows[VARIANTS.index(variant)].avg


def run_ablation(cfg: TrainConfig, manifest: Manifest, syn: SynonymMap | None = None,
                 variants: Sequence[str] = VARIANTS) -> AblationResult:
    rows, losses = [], {}
    for variant in variants:
        res = run_training(replace(cfg, variant=variant), manifest)
        acc, rec, _ = evaluate(res.model, manifest, "test", syn)
        rows.append(ReportRow(VARIANT_NAMES[variant], acc, rec))
        losses[variant] = res.epoch_losses
        log.info("%s: acc=%.2f rec=%.2f", variant, acc, rec)
    return AblationResult(rows, losses)

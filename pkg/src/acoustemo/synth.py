"""Deterministic synthetic dialogue corpus with a localized "vocal tremor".

Dialogues are generated in matched pairs.  Both members share every random
draw (timeline, transcript, speaker gain, non-speech events, frame noise);
one member additionally has its fluctuation amplitude multiplied inside a
short burst at the end of one utterance.  The burst member is labelled
``['anxious', 'concerned']``, the other ``['calm', 'neutral']``, so the label
depends on the burst and nothing else.

Frame model for a dialogue with speaker gain ``g`` and noise ``z ~ N(0, I)``:

* speech frames:      ``g * z``
* non-speech frames:  ``g * silence_level * z``
* non-speech events:  ``g * event_level * z``   (clatter between utterances)

Inside the burst, deviations from the burst window's own per-dimension mean
are multiplied by ``variance_multiplier``: the frame variance grows by its
square while every frame sum, and so every pooled mean, is left unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data_io import (
    Manifest,
    ManifestEntry,
    TranscriptRecord,
    feature_key,
    rate_key,
    write_tensor_file,
    write_transcript,
)
from .rng import XoshiroLanes, Xoshiro256StarStar

__all__ = ["SynthSpec", "SpecInvalid", "synth_generate", "BURST_LABELS", "CALM_LABELS"]

BURST_LABELS = ["anxious", "concerned"]
CALM_LABELS = ["calm", "neutral"]

_LEXICON = (
    "it's fine i just don't know what to do we can talk about that later "
    "maybe tomorrow the meeting went well she said it was okay right now "
    "please tell me again i think so really yes no well sure"
).split()


class SpecInvalid(ValueError):
    pass


@dataclass
class SynthSpec:
    seed: int
    n_dialogues: int = 200
    f_s: float = 50.0
    d: int = 64
    utterances_min: int = 2
    utterances_max: int = 5
    utterance_seconds: tuple[float, float] = (1.8, 3.2)
    gap_seconds: tuple[float, float] = (0.4, 1.2)
    edge_seconds: tuple[float, float] = (0.3, 0.8)
    burst_seconds: float = 1.5
    burst_margin_seconds: tuple[float, float] = (0.04, 0.2)
    variance_multiplier: float = 2.0
    target_utterance: str = "random"   # "random" | "last" | "first"
    gain_range: tuple[float, float] = (0.85, 1.18)
    silence_level: float = 1.0
    event_probability: float = 0.5
    event_seconds: tuple[float, float] = (0.3, 0.8)
    event_level: float = 2.0
    test_fraction: float = 0.2
    avoid_boundary_multiple: float = 2.0

    def validate(self) -> None:
        if self.n_dialogues < 2 or self.n_dialogues % 2:
            raise SpecInvalid("n_dialogues must be a positive even number (dialogues come in pairs)")
        if self.f_s <= 0 or self.d < 1:
            raise SpecInvalid("f_s and d must be positive")
        if not 1 <= self.utterances_min <= self.utterances_max:
            raise SpecInvalid("need 1 <= utterances_min <= utterances_max")
        if self.variance_multiplier <= 1:
            raise SpecInvalid("variance_multiplier must exceed 1")
        if self.burst_seconds + self.burst_margin_seconds[1] >= self.utterance_seconds[0]:
            raise SpecInvalid("burst (plus margin) must be shorter than the shortest utterance")
        if self.target_utterance not in ("random", "last", "first"):
            raise SpecInvalid(f"unknown target_utterance {self.target_utterance!r}")
        if not 0 < self.test_fraction < 1:
            raise SpecInvalid("test_fraction must lie in (0, 1)")
        if not 0 < self.gain_range[0] <= self.gain_range[1]:
            raise SpecInvalid("gain_range must be positive and ordered")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise SpecInvalid(f"unknown spec keys: {sorted(unknown)}")
        if "seed" not in obj:
            raise SpecInvalid("seed required")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        spec = cls(**kw)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _PairPlan:
    utterances: list[tuple[int, int, str]]           # (start frame, end frame, text)
    target: int                                      # 1-based utterance index
    burst: tuple[int, int]
    events: list[tuple[int, int]] = field(default_factory=list)
    gain: float = 1.0
    length: int = 0
    noise_seed: int = 0
    burst_member: int = 0                            # which twin (0 = 'a', 1 = 'b') has the burst


def _frames(seconds: float, f_s: float) -> int:
    return max(1, int(round(seconds * f_s)))


def _on_window_edge(frame: int, f_s: Fraction, window: Fraction) -> bool:
    return window > 0 and (Fraction(frame) / f_s) % window == 0


def _plan_pair(spec: SynthSpec, rng: Xoshiro256StarStar) -> _PairPlan:
    fs = Fraction(repr(float(spec.f_s)))
    window = Fraction(repr(float(spec.avoid_boundary_multiple)))
    n = rng.integer(spec.utterances_min, spec.utterances_max)
    pos = _frames(rng.uniform_range(*spec.edge_seconds), spec.f_s)
    utterances = []
    gaps: list[tuple[int, int]] = []
    for i in range(n):
        if i:
            gap = _frames(rng.uniform_range(*spec.gap_seconds), spec.f_s)
            gaps.append((pos, pos + gap))
            pos += gap
        else:
            gaps.append((0, pos))
        while _on_window_edge(pos, fs, window):
            pos += 1
        end = pos + _frames(rng.uniform_range(*spec.utterance_seconds), spec.f_s)
        while _on_window_edge(end, fs, window):
            end += 1
        words = [_LEXICON[rng.integer(0, len(_LEXICON) - 1)] for _ in range(rng.integer(3, 7))]
        utterances.append((pos, end, " ".join(words)))
        pos = end
    tail = _frames(rng.uniform_range(*spec.edge_seconds), spec.f_s)
    gaps.append((pos, pos + tail))
    length = pos + tail

    if spec.target_utterance == "last":
        target = n
    elif spec.target_utterance == "first":
        target = 1
    else:
        target = rng.integer(1, n)
    u0, u1, _ = utterances[target - 1]
    margin = _frames(rng.uniform_range(*spec.burst_margin_seconds), spec.f_s)
    b1 = u1 - margin
    b0 = b1 - _frames(spec.burst_seconds, spec.f_s)
    if b0 <= u0:
        raise SpecInvalid("burst does not fit strictly inside its utterance")

    events = []
    ev_len_hi = spec.event_seconds[1]
    for g0, g1 in gaps:
        if rng.uniform() < spec.event_probability:
            ev = _frames(rng.uniform_range(spec.event_seconds[0], ev_len_hi), spec.f_s)
            if g1 - g0 - 2 >= ev:
                start = g0 + 1 + rng.integer(0, g1 - g0 - 2 - ev)
                events.append((start, start + ev))
    lo, hi = spec.gain_range
    gain = math.exp(rng.uniform_range(math.log(lo), math.log(hi)))
    return _PairPlan(utterances, target, (b0, b1), events, gain, length,
                     noise_seed=rng.next(), burst_member=rng.integer(0, 1))


def _render_noise(plans: list[_PairPlan], d: int) -> list[np.ndarray]:
    """Standard-normal frame noise; pair ``p`` uses ``d`` lanes seeded from its noise seed."""
    states = []
    for plan in plans:
        lanes = XoshiroLanes.from_splitmix(plan.noise_seed, d)
        states.append(np.stack(lanes.s, axis=1))
    lanes = XoshiroLanes(np.concatenate(states, axis=0))
    max_len = max(p.length for p in plans)
    z = np.empty((max_len, len(plans) * d))
    for t in range(max_len):
        z[t] = lanes.normal()
    return [z[:p.length, i * d:(i + 1) * d] for i, p in enumerate(plans)]


def _amplitude(plan: _PairPlan, spec: SynthSpec) -> np.ndarray:
    amp = np.full(plan.length, spec.silence_level)
    for s, e, _ in plan.utterances:
        amp[s:e] = 1.0
    for s, e in plan.events:
        amp[s:e] = spec.event_level
    return amp * plan.gain


def synth_generate(spec: SynthSpec, out_dir) -> Manifest:
    """Write ``features.acem``, ``transcript.jsonl`` and ``manifest.json`` into ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Xoshiro256StarStar(seed=spec.seed)
    n_pairs = spec.n_dialogues // 2
    plans = [_plan_pair(spec, rng) for _ in range(n_pairs)]
    noise = _render_noise(plans, spec.d)

    # pair-level split keeps twins on the same side
    order = list(range(n_pairs))
    for i in range(n_pairs - 1, 0, -1):
        j = rng.integer(0, i)
        order[i], order[j] = order[j], order[i]
    n_test = max(1, int(round(spec.test_fraction * n_pairs)))
    test_pairs = set(order[:n_test])

    tensors: list[tuple[str, np.ndarray]] = []
    records: list[TranscriptRecord] = []
    entries: list[ManifestEntry] = []
    bursts: dict[str, list[int]] = {}
    global_means = {0: [], 1: []}
    fs = float(spec.f_s)
    for p, (plan, z) in enumerate(zip(plans, noise)):
        for member in (0, 1):
            did = f"dlg{p:04d}{'ab'[member]}"
            burst = member == plan.burst_member
            x = z * _amplitude(plan, spec)[:, None]
            if burst:
                b0, b1 = plan.burst
                centre = x[b0:b1].mean(axis=0)
                x[b0:b1] = centre + spec.variance_multiplier * (x[b0:b1] - centre)
            feats = x.astype(np.float32)
            tensors.append((feature_key(did), feats))
            tensors.append((rate_key(did), np.array([fs])))
            labels = BURST_LABELS if burst else CALM_LABELS
            for i, (s, e, text) in enumerate(plan.utterances, start=1):
                records.append(TranscriptRecord(did, i, round(s / fs, 6), round(e / fs, 6), text,
                                                gt_labels=labels))
            entries.append(ManifestEntry(did, "test" if p in test_pairs else "train",
                                         "features.acem", "transcript.jsonl", list(labels)))
            if burst:
                bursts[did] = [plan.burst[0], plan.burst[1], plan.target]
            global_means[int(burst)].append(float(feats.astype(np.float64).mean()))

    m0, m1 = np.array(global_means[0]), np.array(global_means[1])
    se = math.sqrt(m0.var(ddof=1) / len(m0) + m1.var(ddof=1) / len(m1)) if len(m0) > 1 else float("nan")
    diff_se = abs(m0.mean() - m1.mean()) / se if se and se > 0 else 0.0

    write_tensor_file(out / "features.acem", tensors)
    write_transcript(out / "transcript.jsonl", records)
    manifest = Manifest(entries, out, meta={
        "spec": spec.to_dict(),
        "bursts": bursts,
        "global_mean_difference_se": diff_se,
    })
    manifest.save(out / "manifest.json")
    return manifest


def load_spec(path) -> SynthSpec:
    return SynthSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

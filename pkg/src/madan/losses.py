"""Objective terms.  All are means over batch, pixels and patch positions.

Adversarial terms use the usual convention: a discriminator labels real
samples 1 and generated samples 0, and generators minimise the
non-saturating loss -log D(fake).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

DISCRIMINATOR = "discriminator"
GENERATOR = "generator"
KL_FLOOR = 1e-12

PER_SOURCE_TERMS = ("gan_st", "gan_ts", "cyc", "sem", "sad", "ccd")
SHARED_TERMS = ("task", "feat")
# Which weight scales which term.
TERM_WEIGHT = {
    "gan_st": "w_gan", "gan_ts": "w_gan", "cyc": "w_cyc", "sem": "w_sem",
    "sad": "w_sad", "ccd": "w_ccd", "task": "w_task", "feat": "w_feat",
}


@dataclass(frozen=True)
class LossWeights:
    w_gan: float = 1.0
    w_cyc: float = 1.0
    w_sem: float = 1.0
    w_sad: float = 1.0
    w_ccd: float = 1.0
    w_task: float = 1.0
    w_feat: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    terms: dict[str, float] = field(default_factory=dict)
    total: float = 0.0


def _check_finite(name: str, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError(f"{name}: non-finite input")


def _side(side: str) -> str:
    if side not in (DISCRIMINATOR, GENERATOR):
        raise ValueError(f"side must be {DISCRIMINATOR!r} or {GENERATOR!r}, got {side!r}")
    return side


def _real(logits):
    # -log sigmoid(z), mean over every element
    return F.softplus(-logits).mean()


def _fake(logits):
    # -log(1 - sigmoid(z))
    return F.softplus(logits).mean()


def _disc_loss(real_logits, fake_logits_list):
    fake = sum(_fake(z) for z in fake_logits_list) / len(fake_logits_list)
    return 0.5 * (_real(real_logits) + fake)


def _gen_loss(fake_logits_list):
    return sum(_real(z) for z in fake_logits_list) / len(fake_logits_list)


def adversarial_loss(logits_real, logits_fake, side: str):
    """Binary adversarial loss on patch logits.

    Discriminator side: half the summed BCE of real->1 and fake->0, so an
    undecided discriminator scores ln 2.  Generator side: -log sigmoid of the
    fake logits (``logits_real`` is ignored and may be None).
    """
    side = _side(side)
    if side == GENERATOR:
        _check_finite("adversarial_loss", logits_fake)
        return _gen_loss([logits_fake])
    _check_finite("adversarial_loss", logits_real, logits_fake)
    return _disc_loss(logits_real, [logits_fake])


def cycle_loss(x, x_roundtrip):
    """Mean absolute reconstruction error."""
    if x.shape != x_roundtrip.shape:
        raise ValueError(f"cycle_loss: shape mismatch {tuple(x.shape)} vs {tuple(x_roundtrip.shape)}")
    return (x_roundtrip - x).abs().mean()


def dsc_loss(adapted_logits, source_logits):
    """Per-pixel mean of KL(softmax(adapted) || softmax(source)).

    ``source_logits`` come from a frozen segmenter and are detached here.
    """
    if adapted_logits.shape != source_logits.shape:
        raise ValueError(
            f"dsc_loss: shape mismatch {tuple(adapted_logits.shape)} vs {tuple(source_logits.shape)}"
        )
    _check_finite("dsc_loss", adapted_logits, source_logits)
    log_p = F.log_softmax(adapted_logits, dim=1)
    log_q = F.log_softmax(source_logits.detach(), dim=1).clamp_min(math.log(KL_FLOOR))
    return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()


def sad_loss(adapted_batches: Sequence[torch.Tensor], own_index: int, disc, side: str):
    """Sub-domain aggregation term for source ``own_index``.

    ``adapted_batches[j]`` holds G_{Sj->T}(x_j).  The discriminator treats
    its own adapted domain as real and the M-1 others as fake, averaging the
    fake terms; the generator side asks every other adapted domain to pass
    as real.
    """
    side = _side(side)
    M = len(adapted_batches)
    if M < 2:
        raise ValueError("sad_loss needs at least two source domains")
    if not 0 <= own_index < M:
        raise ValueError(f"own_index {own_index} out of range for {M} sources")
    others = [disc(adapted_batches[j]) for j in range(M) if j != own_index]
    if side == GENERATOR:
        return _gen_loss(others)
    return _disc_loss(disc(adapted_batches[own_index]), others)


def ccd_loss(source_images, cross_roundtrips: Sequence[torch.Tensor], disc, side: str):
    """Cross-domain cycle term for source i.

    ``cross_roundtrips`` holds G_{T->Si}(G_{Sj->T}(x_j)) for every j != i.
    """
    side = _side(side)
    if len(cross_roundtrips) < 1:
        raise ValueError("ccd_loss needs at least two source domains")
    fakes = [disc(x) for x in cross_roundtrips]
    if side == GENERATOR:
        return _gen_loss(fakes)
    return _disc_loss(disc(source_images), fakes)


def task_loss(logits, labels):
    """Pixel-averaged cross-entropy."""
    L = logits.shape[1]
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"task_loss: labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= L):
        raise ValueError(f"task_loss: labels outside [0, {L})")
    return F.cross_entropy(logits, labels.long())


def feat_loss(feat_adapted, feat_target, disc, side: str):
    """Feature-level adversarial term.  Target features are the real class;
    the generator side (the segmenter encoder) makes adapted features pass."""
    side = _side(side)
    if feat_adapted.shape[1:] != feat_target.shape[1:]:
        raise ValueError(
            f"feat_loss: feature shapes differ {tuple(feat_adapted.shape)} vs {tuple(feat_target.shape)}"
        )
    if side == GENERATOR:
        return _gen_loss([disc(feat_adapted)])
    return _disc_loss(disc(feat_target), [disc(feat_adapted)])


def _scalar(name, value) -> float:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if math.isnan(v) or math.isinf(v):
        raise ValueError(f"loss term {name!r} is not finite ({v})")
    return v


def total_loss(per_source: Sequence[Mapping[str, float]], shared: Mapping[str, float],
               weights: LossWeights = LossWeights()) -> LossReport:
    """Weighted sum over sources of the six per-source terms plus task and feat.

    Missing terms count as zero.  ``report.terms`` holds the unweighted
    per-term sums over sources.
    """
    terms = {name: 0.0 for name in PER_SOURCE_TERMS + SHARED_TERMS}
    for i, src in enumerate(per_source):
        for name, value in src.items():
            if name not in PER_SOURCE_TERMS:
                raise KeyError(f"unknown per-source loss term {name!r}")
            terms[name] += _scalar(f"{name}[{i}]", value)
    for name, value in shared.items():
        if name not in SHARED_TERMS:
            raise KeyError(f"unknown shared loss term {name!r}")
        terms[name] += _scalar(name, value)
    total = 0.0
    for name in PER_SOURCE_TERMS + SHARED_TERMS:
        total += getattr(weights, TERM_WEIGHT[name]) * terms[name]
    return LossReport(terms=terms, total=total)

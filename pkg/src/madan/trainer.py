"""Staged adversarial training.

Round 0 runs stages 1a (per-source CycleGANs plus the frozen per-source
segmenters), 1b (task segmenter on translated sources), 2 (translation with
dynamic semantic consistency and the two domain-aggregation discriminators)
and 3 (task segmenter on the aggregated domain with feature alignment).
Later rounds repeat stages 2 and 3 starting from the previous weights.

Every random draw in training goes through one Philox generator held in
the :class:`TrainState`, so a checkpoint fully determines the rest of a run.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from .datagen import CLASS_NAMES, load_arrays
from .losses import (
    DISCRIMINATOR,
    GENERATOR,
    PER_SOURCE_TERMS,
    TERM_WEIGHT,
    LossWeights,
    adversarial_loss,
    ccd_loss,
    cycle_loss,
    dsc_loss,
    feat_loss,
    sad_loss,
    task_loss,
    total_loss,
)
from .metrics import ConfusionMatrix, iou, upsample_nearest
from .models import ModelBundle, ModelConfig, init_bundle, init_weights

log = logging.getLogger(__name__)

ABLATION_FLAGS = {"no_sad": "w_sad", "no_ccd": "w_ccd", "no_dsc": "w_sem", "no_feat": "w_feat"}

# Rows of the component ablation table and the flags that produce them.
ABLATION_ROWS = {
    "baseline": ("no_sad", "no_ccd", "no_dsc", "no_feat"),
    "+SAD": ("no_ccd", "no_dsc", "no_feat"),
    "+CCD": ("no_sad", "no_dsc", "no_feat"),
    "+SAD+CCD": ("no_dsc", "no_feat"),
    "+SAD+DSC": ("no_ccd", "no_feat"),
    "+CCD+DSC": ("no_sad", "no_feat"),
    "+SAD+CCD+DSC": ("no_feat",),
    "+SAD+CCD+DSC+Feat": (),
}

METRIC_TERMS = PER_SOURCE_TERMS + ("task", "feat", "d_pix", "d_agg", "d_feat", "fi_task", "total")
METRIC_COLUMNS = ("round", "stage", "epoch", "steps") + METRIC_TERMS + ("target_miou",)


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    num_sources: int = 2
    epochs: int = 20
    seg_epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-4
    gan_beta1: float = 0.5
    gan_beta2: float = 0.999
    seg_beta1: float = 0.9
    seg_beta2: float = 0.999
    sad_freeze_epochs: int = 5
    ccd_freeze_epochs: int = 10
    outer_rounds: int = 2
    crop_size: int = 48
    checkpoint_every: int = 1
    seed: int = 0
    reinit_segmenter: bool = False
    dsc_joint_update: bool = False
    ablate: tuple[str, ...] = ()
    w_gan: float = 1.0
    w_cyc: float = 1.0
    w_sem: float = 1.0
    w_sad: float = 1.0
    w_ccd: float = 1.0
    w_task: float = 1.0
    w_feat: float = 1.0
    gen_width: int = 32
    gen_blocks: int = 4
    disc_width: int = 32
    feat_disc_width: int = 64

    def __post_init__(self):
        if self.num_sources < 1:
            raise ValueError("num_sources must be >= 1")
        for name in ("epochs", "seg_epochs", "sad_freeze_epochs", "ccd_freeze_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.sad_freeze_epochs <= self.ccd_freeze_epochs <= self.epochs:
            raise ValueError(
                "need 0 <= sad_freeze_epochs <= ccd_freeze_epochs <= epochs, got "
                f"{self.sad_freeze_epochs}, {self.ccd_freeze_epochs}, {self.epochs}"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.outer_rounds < 1:
            raise ValueError("outer_rounds must be >= 1")
        if self.crop_size < 16 or self.crop_size % 16:
            raise ValueError("crop_size must be a positive multiple of 16")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        unknown = set(self.ablate) - set(ABLATION_FLAGS)
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        self.weights  # validates weights

    @property
    def weights(self) -> LossWeights:
        w = {f.name: getattr(self, f.name) for f in fields(LossWeights)}
        for flag in self.ablate:
            w[ABLATION_FLAGS[flag]] = 0.0
        return LossWeights(**w)

    def model_config(self, num_classes: int = len(CLASS_NAMES)) -> ModelConfig:
        return ModelConfig(
            num_sources=self.num_sources, num_classes=num_classes, gen_width=self.gen_width,
            gen_blocks=self.gen_blocks, disc_width=self.disc_width,
            feat_disc_width=self.feat_disc_width, seed=self.seed,
        )

    def to_dict(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                out[k] = ",".join(v)
            elif isinstance(v, bool):
                out[k] = "1" if v else "0"
            else:
                out[k] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            default = f.default
            if isinstance(default, bool):
                kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = tuple(s for s in raw.split(",") if s)
        return cls(**kwargs)


@dataclass
class TrainData:
    sources: list[tuple[torch.Tensor, torch.Tensor]]
    target: torch.Tensor
    target_eval: tuple[torch.Tensor, torch.Tensor] | None = None

    def __post_init__(self):
        if not self.sources:
            raise ValueError("need at least one source dataset")
        for i, (x, y) in enumerate(self.sources):
            if len(x) == 0 or len(x) != len(y):
                raise ValueError(f"source {i}: empty or mismatched dataset")
        if len(self.target) == 0:
            raise ValueError("target dataset is empty")

    @property
    def source_sizes(self) -> list[int]:
        return [len(x) for x, _ in self.sources]


def load_train_data(root, num_sources: int) -> TrainData:
    """Load ``source<i>/``, ``target/`` and (if present) ``target_eval/`` from a
    ``gen-data`` output directory.  Integrity problems raise before training."""
    root = Path(root)
    sources = []
    for i in range(num_sources):
        x, y = load_arrays(root / f"source{i}", with_labels=True)
        sources.append((torch.from_numpy(x), torch.from_numpy(y)))
    xt, _ = load_arrays(root / "target", with_labels=False)
    eval_set = None
    if (root / "target_eval" / "manifest.txt").is_file():
        xe, ye = load_arrays(root / "target_eval", with_labels=True)
        eval_set = (torch.from_numpy(xe), torch.from_numpy(ye))
    return TrainData(sources=sources, target=torch.from_numpy(xt), target_eval=eval_set)


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def schedule(config: TrainConfig) -> list[tuple[int, str, int]]:
    """(round, stage, epochs) for every phase of a full run, in order."""
    phases = [(0, "1a", config.epochs), (0, "1b", config.seg_epochs)]
    for r in range(config.outer_rounds):
        phases += [(r, "2", config.epochs), (r, "3", config.seg_epochs)]
    return phases


def steps_per_epoch(config: TrainConfig, data: TrainData, stage: str) -> int:
    if stage in ("1a", "2"):
        n = max(data.source_sizes)
    else:
        n = sum(data.source_sizes)
    return math.ceil(n / config.batch_size)


def planned_steps(config: TrainConfig, data: TrainData) -> int:
    return sum(e * steps_per_epoch(config, data, s) for _, s, e in schedule(config))


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

def _adam(params, lr, betas):
    return torch.optim.Adam(list(params), lr=lr, betas=betas)


def make_optimizers(bundle: ModelBundle, config: TrainConfig) -> dict[str, torch.optim.Optimizer]:
    lr = config.learning_rate
    gan = (config.gan_beta1, config.gan_beta2)
    seg = (config.seg_beta1, config.seg_beta2)
    return {
        "gen": _adam(list(bundle.g_st.parameters()) + list(bundle.g_ts.parameters()), lr, gan),
        "disc": _adam(list(bundle.d_tgt.parameters()) + list(bundle.d_src.parameters()), lr, gan),
        "agg": _adam(bundle.d_agg.parameters(), lr, gan),
        "feat": _adam(bundle.d_feat.parameters(), lr, gan),
        "seg": _adam(bundle.seg.parameters(), lr, seg),
        "frozen": _adam(bundle.frozen_seg.parameters(), lr, seg),
    }


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    optimizers: dict[str, torch.optim.Optimizer]
    rng: np.random.Generator
    phase: int = 0  # index into schedule(config)
    epoch: int = 0  # next epoch to run within the phase
    step: int = 0
    history: list[dict] = field(default_factory=list)
    best_miou: float = float("nan")
    best_round: int = -1
    best_seg: dict[str, torch.Tensor] | None = None

    @property
    def round(self) -> int:
        phases = schedule(self.config)
        return phases[min(self.phase, len(phases) - 1)][0]

    @property
    def stage(self) -> str:
        phases = schedule(self.config)
        return phases[self.phase][1] if self.phase < len(phases) else "done"

    @property
    def finished(self) -> bool:
        return self.phase >= len(schedule(self.config))

    def completed(self, stage: str) -> bool:
        """True once every phase of ``stage`` scheduled so far has finished."""
        done = schedule(self.config)[: self.phase]
        return any(s == stage for _, s, _ in done)


def new_state(config: TrainConfig, num_classes: int = len(CLASS_NAMES)) -> TrainState:
    bundle = init_bundle(config.model_config(num_classes))
    rng = np.random.Generator(np.random.Philox(key=np.array([config.seed, 0x545241494E], dtype=np.uint64)))
    return TrainState(config=config, bundle=bundle, optimizers=make_optimizers(bundle, config), rng=rng)


def _rng_to_text(rng: np.random.Generator) -> str:
    def conv(o):
        if isinstance(o, np.ndarray):
            return {"__nd__": o.dtype.str, "v": [int(v) for v in o.ravel()]}
        if isinstance(o, dict):
            return {k: conv(v) for k, v in o.items()}
        if isinstance(o, np.integer):
            return int(o)
        return o
    return json.dumps(conv(rng.bit_generator.state), sort_keys=True)


def _rng_from_text(text: str) -> np.random.Generator:
    def conv(o):
        if isinstance(o, dict):
            if "__nd__" in o:
                return np.array(o["v"], dtype=np.dtype(o["__nd__"]))
            return {k: conv(v) for k, v in o.items()}
        return o
    state = conv(json.loads(text))
    bitgen = np.random.Philox()
    bitgen.state = state
    return np.random.Generator(bitgen)


def save_state(path, state: TrainState) -> None:
    header = ckpt.model_header(state.bundle.config)
    header["classes"] = ",".join(CLASS_NAMES[: state.bundle.config.num_classes])
    header.update({f"train.{k}": v for k, v in state.config.to_dict().items()})
    header.update({
        "state.phase": str(state.phase),
        "state.epoch": str(state.epoch),
        "state.step": str(state.step),
        "state.round": str(state.round),
        "state.stage": state.stage,
        "state.best_miou": repr(state.best_miou),
        "state.best_round": str(state.best_round),
        "state.rng": _rng_to_text(state.rng),
        "state.history": json.dumps(state.history, sort_keys=True),
    })
    arrays = ckpt.bundle_arrays(state.bundle)
    for name, opt in state.optimizers.items():
        arrays.update(ckpt.optimizer_arrays(name, opt))
    if state.best_seg is not None:
        arrays.update({f"best_seg.{k}": v.numpy().copy() for k, v in state.best_seg.items()})
    ckpt.save_archive(path, header, arrays)


def load_state(path) -> TrainState:
    header, arrays = ckpt.load_archive(path)
    if "state.phase" not in header:
        raise ckpt.CheckpointError(f"{path} holds no training state")
    config = TrainConfig.from_dict({k[6:]: v for k, v in header.items() if k.startswith("train.")})
    bundle = ModelBundle(ckpt.config_from_header(header))
    ckpt.restore_bundle(bundle, arrays)
    optimizers = make_optimizers(bundle, config)
    for name, opt in optimizers.items():
        ckpt.restore_optimizer(name, opt, arrays)
    best = {k[len("best_seg."):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("best_seg.")}
    state = TrainState(
        config=config, bundle=bundle, optimizers=optimizers, rng=_rng_from_text(header["state.rng"]),
        phase=int(header["state.phase"]), epoch=int(header["state.epoch"]), step=int(header["state.step"]),
        history=json.loads(header["state.history"]), best_miou=float(header["state.best_miou"]),
        best_round=int(header["state.best_round"]), best_seg=best or None,
    )
    if state.completed("1a"):
        bundle.freeze_source_segmenters()
    return state


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def _epoch_order(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    """``length`` indices into a set of ``n``: fresh permutations, concatenated."""
    reps = math.ceil(length / n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:length]


def _batches(total: int, batch_size: int):
    for start in range(0, total, batch_size):
        yield start, min(batch_size, total - start)


def _crop(rng: np.random.Generator, x: torch.Tensor, y: torch.Tensor | None, size: int):
    H, W = x.shape[-2:]
    if size >= H and size >= W:
        return x, y
    tops = rng.integers(0, H - size + 1, size=len(x))
    lefts = rng.integers(0, W - size + 1, size=len(x))
    xs = torch.stack([x[k, :, t:t + size, l:l + size] for k, (t, l) in enumerate(zip(tops, lefts))])
    ys = None
    if y is not None:
        ys = torch.stack([y[k, t:t + size, l:l + size] for k, (t, l) in enumerate(zip(tops, lefts))])
    return xs, ys


def _set_grad(modules, flag: bool):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


# ---------------------------------------------------------------------------
# Pixel-level steps (stages 1a and 2)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PixelTerms:
    sem: bool = False
    sad: bool = False
    ccd: bool = False
    train_frozen: bool = False  # stage 1a: also fit the per-source segmenters


def pixel_step(state: TrainState, xs: list[torch.Tensor], ys: list[torch.Tensor],
               xt: torch.Tensor, active: PixelTerms) -> dict[str, float]:
    """One discriminator update followed by one generator update.

    Discriminators are trained on the translations produced before this
    step's generator update.
    """
    b, cfg, opt = state.bundle, state.config, state.optimizers
    w = cfg.weights
    M = b.num_sources
    ccd_on = active.ccd and M > 1
    sad_on = active.sad and M > 1

    fake_t = [b.g_st[i](xs[i]) for i in range(M)]
    rec_s = [b.g_ts[i](fake_t[i]) for i in range(M)]
    fake_s = [b.g_ts[i](xt) for i in range(M)]
    rec_t = [b.g_st[i](fake_s[i]) for i in range(M)]
    cross = [[b.g_ts[i](fake_t[j]) for j in range(M) if j != i] for i in range(M)] if ccd_on else None

    out: dict[str, float] = {}

    # discriminators
    discs = [b.d_tgt, *b.d_src] + (list(b.d_agg) if sad_on else [])
    _set_grad(discs, True)
    opt["disc"].zero_grad(set_to_none=True)
    d_pix = 0.0
    real_t = b.d_tgt(xt)
    for i in range(M):
        d_pix = d_pix + adversarial_loss(real_t, b.d_tgt(fake_t[i].detach()), DISCRIMINATOR)
        d_pix = d_pix + adversarial_loss(b.d_src[i](xs[i]), b.d_src[i](fake_s[i].detach()), DISCRIMINATOR)
        if ccd_on:
            d_pix = d_pix + ccd_loss(xs[i], [c.detach() for c in cross[i]], b.d_src[i], DISCRIMINATOR)
    d_pix.backward()
    opt["disc"].step()
    out["d_pix"] = d_pix.item()

    if sad_on:
        opt["agg"].zero_grad(set_to_none=True)
        detached = [f.detach() for f in fake_t]
        d_agg = sum(sad_loss(detached, i, b.d_agg[i], DISCRIMINATOR) for i in range(M))
        d_agg.backward()
        opt["agg"].step()
        out["d_agg"] = d_agg.item()

    # generators
    _set_grad(discs, False)
    joint = active.sem and cfg.dsc_joint_update
    _set_grad([b.seg], joint)
    opt["gen"].zero_grad(set_to_none=True)
    if joint:
        opt["seg"].zero_grad(set_to_none=True)
    per_source = []
    g_total = 0.0
    for i in range(M):
        terms = {
            "gan_st": adversarial_loss(None, b.d_tgt(fake_t[i]), GENERATOR),
            "gan_ts": adversarial_loss(None, b.d_src[i](fake_s[i]), GENERATOR),
            "cyc": cycle_loss(xs[i], rec_s[i]) + cycle_loss(xt, rec_t[i]),
        }
        if active.sem:
            with torch.no_grad():
                src_logits, _ = b.frozen_seg[i](xs[i])
            adapted_logits, _ = b.seg_adapted(fake_t[i])
            terms["sem"] = dsc_loss(adapted_logits, src_logits)
        if sad_on:
            terms["sad"] = sad_loss(fake_t, i, b.d_agg[i], GENERATOR)
        if ccd_on:
            terms["ccd"] = ccd_loss(xs[i], cross[i], b.d_src[i], GENERATOR)
        for name, value in terms.items():
            g_total = g_total + getattr(w, TERM_WEIGHT[name]) * value
        per_source.append(terms)
    g_total.backward()
    opt["gen"].step()
    if joint:
        opt["seg"].step()
    _set_grad(discs, True)
    _set_grad([b.seg], True)

    report = total_loss(per_source, {}, w)
    out.update(report.terms)
    out["total"] = report.total

    if active.train_frozen:
        opt["frozen"].zero_grad(set_to_none=True)
        fi = sum(task_loss(b.frozen_seg[i](xs[i])[0], ys[i]) for i in range(M))
        fi.backward()
        opt["frozen"].step()
        out["fi_task"] = fi.item()
    return out


def pixel_epoch(state: TrainState, data: TrainData, active: PixelTerms) -> dict[str, float]:
    cfg, rng = state.config, state.rng
    n_steps = steps_per_epoch(cfg, data, "1a")
    length = n_steps * cfg.batch_size
    orders = [_epoch_order(rng, len(x), length) for x, _ in data.sources]
    t_order = _epoch_order(rng, len(data.target), length)
    sums: dict[str, float] = {}
    total = max(data.source_sizes)
    for start, size in _batches(total, cfg.batch_size):
        xs, ys = [], []
        for (x, y), order in zip(data.sources, orders):
            idx = torch.from_numpy(order[start:start + size])
            cx, cy = _crop(rng, x[idx], y[idx], cfg.crop_size)
            xs.append(cx)
            ys.append(cy)
        xt, _ = _crop(rng, data.target[torch.from_numpy(t_order[start:start + size])], None, cfg.crop_size)
        values = pixel_step(state, xs, ys, xt, active)
        state.step += 1
        for k, v in values.items():
            sums[k] = sums.get(k, 0.0) + v
    return {k: v / n_steps for k, v in sums.items()}


# ---------------------------------------------------------------------------
# Segmentation steps (stages 1b and 3)
# ---------------------------------------------------------------------------

@torch.no_grad()
def translate_sources(bundle: ModelBundle, data: TrainData, batch_size: int = 32):
    """Adapted images G_{Si->T}(X_i) with their source labels, concatenated."""
    xs, ys = [], []
    for i, (x, y) in enumerate(data.sources):
        g = bundle.g_st[i]
        xs.append(torch.cat([g(x[s:s + n]) for s, n in _batches(len(x), batch_size)]))
        ys.append(y)
    return torch.cat(xs), torch.cat(ys)


def seg_epoch(state: TrainState, x: torch.Tensor, y: torch.Tensor, target: torch.Tensor | None,
              feat_weight: float) -> dict[str, float]:
    """Supervised epoch on (x, y); with ``feat_weight > 0`` and a target set,
    alternates feature-discriminator and encoder updates."""
    b, cfg, rng, opt = state.bundle, state.config, state.rng, state.optimizers
    order = rng.permutation(len(x))
    use_feat = feat_weight > 0 and target is not None
    t_order = _epoch_order(rng, len(target), len(order)) if use_feat else None
    sums: dict[str, float] = {}
    n_steps = 0
    for start, size in _batches(len(x), cfg.batch_size):
        idx = torch.from_numpy(order[start:start + size])
        xb, yb = x[idx], y[idx]
        logits, feat_a = b.seg(xb)
        values = {}
        if use_feat:
            xt = target[torch.from_numpy(t_order[start:start + size])]
            feat_t = b.seg.features(xt)
            opt["feat"].zero_grad(set_to_none=True)
            d = feat_loss(feat_a.detach(), feat_t.detach(), b.d_feat, DISCRIMINATOR)
            d.backward()
            opt["feat"].step()
            values["d_feat"] = d.item()
        opt["seg"].zero_grad(set_to_none=True)
        t_loss = task_loss(logits, yb)
        shared = {"task": t_loss}
        loss = cfg.weights.w_task * t_loss
        if use_feat:
            _set_grad([b.d_feat], False)
            f_loss = feat_loss(feat_a, feat_t, b.d_feat, GENERATOR)
            _set_grad([b.d_feat], True)
            shared["feat"] = f_loss
            loss = loss + feat_weight * f_loss
        loss.backward()
        opt["seg"].step()
        report = total_loss([], shared, cfg.weights)
        values.update(task=report.terms["task"], feat=report.terms["feat"], total=report.total)
        state.step += 1
        n_steps += 1
        for k, v in values.items():
            sums[k] = sums.get(k, 0.0) + v
    return {k: v / n_steps for k, v in sums.items()}


@torch.no_grad()
def evaluate(seg, x: torch.Tensor, y: torch.Tensor, num_classes: int, batch_size: int = 32) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    was_training = seg.training
    seg.eval()
    for s, n in _batches(len(x), batch_size):
        logits, _ = seg(x[s:s + n])
        pred = logits.argmax(1).numpy()
        gt = y[s:s + n].numpy()
        cm.accumulate(upsample_nearest(pred, *gt.shape[-2:]), gt)
    seg.train(was_training)
    return cm


def target_miou(state: TrainState, data: TrainData) -> float:
    if data.target_eval is None:
        return float("nan")
    x, y = data.target_eval
    return iou(evaluate(state.bundle.seg, x, y, state.bundle.config.num_classes))[1]


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

EpochHook = Callable[[TrainState, dict], None]


def _stage2_terms(state: TrainState, epoch: int) -> PixelTerms:
    """Active adversarial-aggregation terms for a stage-2 epoch.  Freeze
    windows count stage-2 epochs across all rounds."""
    cfg, w = state.config, state.config.weights
    seen = epoch + state.round * cfg.epochs
    return PixelTerms(
        sem=w.w_sem > 0,
        sad=w.w_sad > 0 and seen >= cfg.sad_freeze_epochs,
        ccd=w.w_ccd > 0 and seen >= cfg.ccd_freeze_epochs,
    )


def _run_epoch(state: TrainState, data: TrainData, stage: str, epoch: int, cache: dict) -> dict:
    cfg = state.config
    if stage == "1a":
        values = pixel_epoch(state, data, PixelTerms(train_frozen=True))
    elif stage == "2":
        values = pixel_epoch(state, data, _stage2_terms(state, epoch))
    else:
        if "adapted" not in cache:
            cache["adapted"] = translate_sources(state.bundle, data)
        x, y = cache["adapted"]
        feat_w = cfg.weights.w_feat if stage == "3" else 0.0
        values = seg_epoch(state, x, y, data.target, feat_w)
        values["target_miou"] = target_miou(state, data)
    return values


def _begin_phase(state: TrainState, stage: str):
    b = state.bundle
    if stage == "1b" or stage == "2":
        b.freeze_source_segmenters()
    if stage == "3" and state.config.reinit_segmenter:
        gen = torch.Generator().manual_seed(state.config.seed + 7919 * (state.round + 1))
        init_weights(b.seg, gen)
        state.optimizers["seg"] = _adam(b.seg.parameters(), state.config.learning_rate,
                                        (state.config.seg_beta1, state.config.seg_beta2))


def _end_phase(state: TrainState, data: TrainData, stage: str):
    if stage != "3":
        return
    miou = target_miou(state, data)
    if data.target_eval is not None and (math.isnan(state.best_miou) or miou > state.best_miou):
        state.best_miou = miou
        state.best_round = state.round
        state.best_seg = {k: v.detach().clone() for k, v in state.bundle.seg.state_dict().items()}


def run_phases(state: TrainState, data: TrainData, until: Callable[[TrainState], bool],
               on_epoch: EpochHook | None = None, max_epochs: int | None = None) -> TrainState:
    """Run epochs from the state's position until ``until(state)`` holds,
    the schedule ends, or ``max_epochs`` epochs have run."""
    phases = schedule(state.config)
    ran = 0
    cache: dict = {}
    while state.phase < len(phases) and not until(state):
        rnd, stage, n_epochs = phases[state.phase]
        if state.epoch == 0:
            _begin_phase(state, stage)
        while state.epoch < n_epochs:
            if max_epochs is not None and ran >= max_epochs:
                return state
            try:
                values = _run_epoch(state, data, stage, state.epoch, cache)
            except (ValueError, RuntimeError) as exc:
                raise TrainingError(f"round {rnd} stage {stage} epoch {state.epoch}: {exc}") from exc
            row = {"round": rnd, "stage": stage, "epoch": state.epoch, "steps": state.step}
            row.update({k: values.get(k, "") for k in METRIC_TERMS})
            row["target_miou"] = values.get("target_miou", "")
            state.history.append(row)
            state.epoch += 1
            ran += 1
            log.info("round %d stage %s epoch %d: %s", rnd, stage, row["epoch"],
                     {k: round(v, 4) for k, v in values.items() if isinstance(v, float)})
            if state.epoch == n_epochs:
                _end_phase(state, data, stage)
                state.phase += 1
                state.epoch = 0
                cache.clear()
            if on_epoch is not None:
                on_epoch(state, row)
            if state.epoch == 0:
                break
        else:
            # zero-epoch phase
            _end_phase(state, data, stage)
            state.phase += 1
            state.epoch = 0
            cache.clear()
    return state


def _check_data(config: TrainConfig, data: TrainData):
    if len(data.sources) != config.num_sources:
        raise TrainingError(f"config expects {config.num_sources} sources, data has {len(data.sources)}")


def stage1_pretrain(config: TrainConfig, data: TrainData, state: TrainState | None = None, **kw) -> TrainState:
    """CycleGANs and per-source segmenters, then the task segmenter on the
    translated sources.  The per-source segmenters are frozen afterwards."""
    _check_data(config, data)
    state = state or new_state(config)
    return run_phases(state, data, until=lambda s: s.completed("1b"), **kw)


def _next_stage_index(state: TrainState, stage: str) -> int:
    for k, (_, s, _) in enumerate(schedule(state.config)):
        if k >= state.phase and s == stage:
            return k
    return -1


def stage2_adapt(state: TrainState, data: TrainData, **kw) -> TrainState:
    """Translation with semantic consistency and domain aggregation (one round)."""
    if not state.completed("1b"):
        raise TrainingError("stage 2 needs a completed stage-1 state")
    target = _next_stage_index(state, "2")
    if target < 0 or state.phase > target:
        raise TrainingError("no stage-2 phase left in the schedule")
    return run_phases(state, data, until=lambda s: s.phase > target, **kw)


def stage3_segment(state: TrainState, data: TrainData, **kw) -> TrainState:
    """Segmenter on the aggregated translated domain with feature alignment (one round)."""
    if not state.completed("2"):
        raise TrainingError("stage 3 needs a completed stage-2 state")
    target = _next_stage_index(state, "3")
    if target < 0 or state.phase > target:
        raise TrainingError("no stage-3 phase left in the schedule")
    return run_phases(state, data, until=lambda s: s.phase > target, **kw)


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv_text(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in history:
        writer.writerow([_fmt(row.get(c, "")) for c in METRIC_COLUMNS])
    return buf.getvalue()


def write_resolved_config(path, config: TrainConfig, extra: dict[str, str] | None = None):
    items = dict(config.to_dict())
    items.update(extra or {})
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()), encoding="utf-8")


def best_bundle(state: TrainState) -> ModelBundle:
    """Copy of the bundle whose segmenter is the best one seen at the end of a round."""
    bundle = copy.deepcopy(state.bundle)
    if state.best_seg is not None:
        bundle.seg.load_state_dict(state.best_seg)
    return bundle


def run_madan(config: TrainConfig, data: TrainData, out_dir=None, resume: TrainState | None = None,
              max_epochs: int | None = None):
    """Full schedule.  Returns (bundle with the best segmenter, metric history).

    With ``out_dir``: writes ``metrics.csv`` (rewritten from the state's
    history on start, appended per epoch), ``config.resolved.txt`` and
    checkpoints under ``checkpoints/`` (``last.ckpt`` at the configured
    cadence, ``round<r>_stage<s>.ckpt`` at each phase end, ``best.ckpt``).
    """
    _check_data(config, data)
    state = resume if resume is not None else new_state(config)
    if resume is not None and resume.config != config:
        raise TrainingError("resume checkpoint was written with a different configuration")
    hook = None
    if out_dir is not None:
        out = Path(out_dir)
        ckdir = out / "checkpoints"
        ckdir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(out / "config.resolved.txt", config)
        metrics_path = out / "metrics.csv"
        metrics_path.write_text(metrics_csv_text(state.history), encoding="utf-8")
        if resume is None:
            save_state(ckdir / "init.ckpt", state)

        def hook(st: TrainState, row: dict):
            with metrics_path.open("a", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(c, "")) for c in METRIC_COLUMNS])
            phase_done = st.epoch == 0
            if phase_done or len(st.history) % config.checkpoint_every == 0:
                save_state(ckdir / "last.ckpt", st)
            if phase_done:
                save_state(ckdir / f"round{row['round']}_stage{row['stage']}.ckpt", st)

    run_phases(state, data, until=lambda s: False, on_epoch=hook, max_epochs=max_epochs)
    if out_dir is not None:
        save_state(Path(out_dir) / "checkpoints" / "last.ckpt", state)
        if state.finished:
            ckpt.save_bundle(Path(out_dir) / "checkpoints" / "best.ckpt", best_bundle(state),
                             {"state.best_miou": repr(state.best_miou), "state.stage": "done",
                              "classes": ",".join(CLASS_NAMES[: state.bundle.config.num_classes])})
    return best_bundle(state), state.history, state


def train_source_only(config: TrainConfig, data: TrainData, epochs: int | None = None):
    """Source-combined baseline: the task segmenter trained on the raw union
    of all sources.  Same initialisation as the bundle's segmenter; by
    default the same number of segmenter epochs as a full run.  Returns
    (best target mIoU over evaluation points, per-point mIoUs)."""
    state = new_state(config)
    x = torch.cat([x for x, _ in data.sources])
    y = torch.cat([y for _, y in data.sources])
    block = max(config.seg_epochs, 1)
    total = epochs if epochs is not None else config.seg_epochs * (1 + config.outer_rounds)
    scores = []
    for e in range(total):
        seg_epoch(state, x, y, None, 0.0)
        if (e + 1) % block == 0 or e + 1 == total:
            scores.append(target_miou(state, data))
    return (max(scores) if scores else float("nan")), scores


def ablation_config(config: TrainConfig, row: str) -> TrainConfig:
    return replace(config, ablate=tuple(ABLATION_ROWS[row]))

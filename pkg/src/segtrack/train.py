"""Segmentation training on synthetic frame pairs.

A sample is a (train, test) frame pair from one sequence.  The GIM is built
from the train frame's mask, the location channel from the test target's
center perturbed uniformly by up to 1/8 of the target size per axis, and the
network predicts the test mask.  The GIM-branch reduction layers and the
refinement pathway are trained with crossentropy and ADAM.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gem, gim, nn
from .features import MODEL_STRIDE, HandcraftedBackbone, crop_mask, extract_search_region, reduce_features, \
    reduce_features_backward
from .model import SegmentationNetwork, TrackerConfig, preset
from .refine import refine_backward, refine_forward
from .synthetic import PAIR_RANGE, generate_synthetic_sample

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    batch_size: int = 8
    epochs: int = 25
    iterations_per_epoch: int = 200
    learning_rate: float = 1e-3
    decay_factor: float = 0.2
    decay_interval: int = 15
    pair_range: int = PAIR_RANGE
    perturbation: float = 1.0 / 8.0  # fraction of the target size
    region_jitter: float = 0.25  # search-region center offset, fraction of target size
    scale_jitter: float = 0.5  # log-uniform region scale in [1/(1+j), 1+j]
    n_pairs: int = 2000
    n_validation: int = 64
    validation_every: int = 0  # iterations; 0 = once per epoch
    divergence_factor: float = 10.0
    seed: int = 0
    model: TrackerConfig = field(default_factory=lambda: preset("desk"))

    def __post_init__(self):
        for name in ("batch_size", "epochs", "iterations_per_epoch", "learning_rate", "decay_interval",
                     "pair_range", "perturbation", "n_pairs", "divergence_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)


TRAINING_PRESETS = {
    "desk": dict(batch_size=8, epochs=25, iterations_per_epoch=200),
    "paper": dict(batch_size=64, epochs=40, iterations_per_epoch=1000, model=preset("paper")),
}


def training_preset(name: str) -> TrainingConfig:
    if name not in TRAINING_PRESETS:
        raise ValueError(f"unknown training preset {name!r}")
    return TrainingConfig(**TRAINING_PRESETS[name])


# ---------------------------------------------------------------------------
# samples


@dataclass
class PairSample:
    """Pre-cropped training pair: uint8 crops plus masks and the location prior."""

    train_crop: np.ndarray  # (3, S, S) uint8
    train_grid_mask: np.ndarray  # (G, G) bool
    test_crop: np.ndarray  # (3, S, S) uint8
    test_mask: np.ndarray  # (S, S) bool
    location: tuple  # perturbed target center on the test grid (row, col)
    seed: int = 0
    frames: tuple = (0, 0)


def is_validation_seed(seed: int) -> bool:
    """10% of sequences, by seed, are held out for validation."""
    return seed % 10 == 0


def _enclosure(mask):
    ys, xs = np.nonzero(mask)
    x0, x1, y0, y1 = xs.min() - 0.5, xs.max() + 0.5, ys.min() - 0.5, ys.max() + 0.5
    return ((x0 + x1) / 2, (y0 + y1) / 2), (x1 - x0, y1 - y0)


def perturbation_offsets(rng, target_size, fraction, n=None):
    """Uniform offsets in ``[-fraction*sigma, fraction*sigma]`` per axis, sigma = sqrt(w*h)."""
    sigma = math.sqrt(target_size[0] * target_size[1])
    shape = (2,) if n is None else (n, 2)
    return rng.uniform(-fraction * sigma, fraction * sigma, size=shape)


def _to_uint8(crop):
    return np.clip(np.round(crop * 255), 0, 255).astype(np.uint8)


def make_pair_sample(seed, config: TrainingConfig) -> PairSample:
    """Render and crop one training pair (deterministic in ``seed``)."""
    mc = config.model
    (f1, m1), (f2, m2), frames = generate_synthetic_sample(seed, config.pair_range)
    rng = np.random.default_rng([seed, config.seed, 31337])

    c1, s1 = _enclosure(m1)
    r1 = extract_search_region(f1, c1, s1, mc.crop_size, mc.context)
    grid = crop_mask(m1, r1).reshape(mc.grid_size, MODEL_STRIDE, mc.grid_size, MODEL_STRIDE).mean(axis=(1, 3))
    grid_mask = grid > 0.5
    if not grid_mask.any():
        grid_mask = grid >= grid.max()

    c2, s2 = _enclosure(m2)
    side = math.sqrt(s2[0] * s2[1])
    jitter = rng.uniform(-config.region_jitter, config.region_jitter, 2) * side
    scale = math.exp(rng.uniform(-1, 1) * math.log1p(config.scale_jitter))
    r2 = extract_search_region(f2, (c2[0] + jitter[0], c2[1] + jitter[1]), (s2[0] * scale, s2[1] * scale),
                               mc.crop_size, mc.context)
    dx, dy = perturbation_offsets(rng, s2, config.perturbation)
    gc, gr = r2.to_grid(c2[0] + dx, c2[1] + dy)
    return PairSample(_to_uint8(r1.image_crop), grid_mask, _to_uint8(r2.image_crop), crop_mask(m2, r2),
                      (float(gr), float(gc)), seed, frames)


def _make_many(args):
    seeds, config = args
    return [make_pair_sample(s, config) for s in seeds]


def build_pairs(seeds, config: TrainingConfig, workers=None):
    """Pair samples for ``seeds``, fanned out over a process pool when ``workers`` > 1."""
    seeds = list(seeds)
    workers = workers if workers is not None else int(os.environ.get("SEGTRACK_WORKERS", "1"))
    if workers <= 1 or len(seeds) < 2 * workers:
        return [make_pair_sample(s, config) for s in seeds]
    chunks = [seeds[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_make_many, [(c, config) for c in chunks]))
    # restore the original order
    out = [None] * len(seeds)
    for w, part in enumerate(parts):
        out[w::workers] = part
    return out


def split_seeds(n_train, n_validation, start=1):
    """Disjoint seed lists; validation seeds are the multiples of 10."""
    train, val = [], []
    s = start
    while len(train) < n_train or len(val) < n_validation:
        if is_validation_seed(s):
            if len(val) < n_validation:
                val.append(s)
        elif len(train) < n_train:
            train.append(s)
        s += 1
    return train, val


# ---------------------------------------------------------------------------
# forward / backward on a batch


def batch_loss(net: SegmentationNetwork, samples, backward=True, drop=None):
    """Mean crossentropy over a batch; accumulates parameter gradients when ``backward``."""
    mc = net.config
    drop = mc.drop if drop is None else drop
    backbone = HandcraftedBackbone()
    reduce, adjust = net.params["gim.reduce"], net.params["gim.adjust"]
    n = len(samples)
    G = mc.grid_size

    train_levels, test_pyr = [], []
    for s in samples:
        train_levels.append(backbone(s.train_crop.astype(np.float32) / 255).level(MODEL_STRIDE))
        test_pyr.append(backbone(s.test_crop.astype(np.float32) / 255))
    level8 = np.stack(train_levels + [p.level(MODEL_STRIDE) for p in test_pyr])
    feats, rcache = reduce_features(level8, reduce, adjust)
    f_train, f_test = feats[:n], feats[n:]

    stacks, caches, models = [], [], []
    for i, s in enumerate(samples):
        model = gim.build_gim_model(f_train[i], s.train_grid_mask, mc.K, (mc.foreground_cap, mc.background_cap),
                                    np.random.default_rng(s.seed))
        F, B, cache = gim.similarity_channels(f_test[i], model, return_cache=True)
        P = gim.posterior_channel(F, B)
        L = gem.location_channel(s.location, (G, G))
        stacks.append(gim.ChannelStack(L, F, B, P).fusion_input(drop))
        caches.append((cache, P))
        models.append(model)
    stack = np.stack(stacks).astype(feats.dtype)
    skips = [np.stack([p.level(4) for p in test_pyr]), np.stack([p.level(2) for p in test_pyr])]
    logits, fcache = refine_forward(stack, skips, net.refine)
    target = np.stack([s.test_mask for s in samples])
    loss, grad = nn.crossentropy_loss(logits, target)
    if not backward:
        return loss

    gstack = refine_backward(grad.astype(logits.dtype), fcache, net.refine)
    gfeats = np.zeros_like(feats)
    for i, ((cache, P), model) in enumerate(zip(caches, models)):
        gF = gstack[i, 1] if "F" not in drop else np.zeros_like(P)
        gPin = gstack[i, 2] if "P" not in drop else np.zeros_like(P)
        gpf, gpb = gim.posterior_backward(gPin, P)
        gtest, gfg, gbg = gim.similarity_backward(gF + gpf, gpb, cache)
        gfeats[n + i] = gtest
        flat = gfeats[i].reshape(gfeats.shape[1], -1)
        np.add.at(flat.T, model.foreground_cells, gfg)
        np.add.at(flat.T, model.background_cells, gbg)
    reduce_features_backward(gfeats, rcache, reduce, adjust)
    return loss


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingResult:
    net: SegmentationNetwork
    losses: list  # (epoch, iteration, loss)
    validation: list  # (epoch, iteration, loss)
    seconds: float = 0.0

    @property
    def initial_validation(self):
        return self.validation[0][2] if self.validation else float("nan")

    @property
    def final_validation(self):
        return self.validation[-1][2] if self.validation else float("nan")


def write_loss_csv(path, rows, header=("epoch", "iteration", "loss")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for e, i, loss in rows:
            w.writerow([e, i, f"{loss:.6f}"])


def validation_loss(net, samples, batch_size=16):
    total, count = 0.0, 0
    for k in range(0, len(samples), batch_size):
        chunk = samples[k:k + batch_size]
        total += batch_loss(net, chunk, backward=False) * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def train_network(config: TrainingConfig, pairs=None, validation=None, net=None, progress=None,
                  workers=None) -> TrainingResult:
    """Train the GIM reduction and refinement layers; returns weights and loss curves.

    ``pairs``/``validation`` default to freshly generated samples
    (``n_pairs`` training pairs, ``n_validation`` held-out pairs).
    """
    t0 = time.perf_counter()
    if pairs is None or validation is None:
        train_seeds, val_seeds = split_seeds(config.n_pairs, config.n_validation, start=config.seed * 100_000 + 1)
        pairs = pairs if pairs is not None else build_pairs(train_seeds, config, workers)
        validation = validation if validation is not None else build_pairs(val_seeds, config, workers)
    net = net or SegmentationNetwork.create(config.model, seed=config.seed)
    params = net.trainable()
    adam = nn.AdamState(config.learning_rate, decay_factor=config.decay_factor,
                        decay_interval_epochs=config.decay_interval)
    rng = np.random.default_rng([config.seed, 2])
    losses, val_curve = [], []
    if validation:
        val_curve.append((0, 0, validation_loss(net, validation)))
    reference = None
    step = 0
    for epoch in range(config.epochs):
        adam.set_epoch(epoch)
        order = rng.permutation(len(pairs))
        cursor = 0
        for it in range(config.iterations_per_epoch):
            if cursor + config.batch_size > len(order):
                order = rng.permutation(len(pairs))
                cursor = 0
            batch = [pairs[k] for k in order[cursor:cursor + config.batch_size]]
            cursor += config.batch_size
            net.zero_grad()
            loss = batch_loss(net, batch)
            if reference is None:
                reference = loss
            if not np.isfinite(loss) or loss > config.divergence_factor * reference:
                raise TrainingDiverged(
                    f"loss {loss:.4g} at epoch {epoch} iteration {it} exceeds {config.divergence_factor}x "
                    f"the initial {reference:.4g} (learning rate {adam.learning_rate:g})")
            nn.adam_step(params, adam)
            losses.append((epoch, it, loss))
            step += 1
            if validation and config.validation_every and step % config.validation_every == 0:
                val_curve.append((epoch, it + 1, validation_loss(net, validation)))
        if validation and not config.validation_every:
            val_curve.append((epoch + 1, 0, validation_loss(net, validation)))
        if progress:
            progress(epoch, losses[-1][2], val_curve[-1][2] if val_curve else float("nan"))
    return TrainingResult(net, losses, val_curve, time.perf_counter() - t0)


def continue_training(base: SegmentationNetwork, config: TrainingConfig, drop=None, pairs=None, validation=None,
                      progress=None, workers=None) -> TrainingResult:
    """Train a copy of ``base`` further, e.g. to adapt it to a channel-ablation variant.

    The copy keeps the architecture of ``base``; ``drop`` (default: the
    training config's) sets the zeroed channels.  ``config.epochs`` counts
    the additional epochs.
    """
    drop = config.model.drop if drop is None else tuple(drop)
    net = SegmentationNetwork.create(base.config.replace(drop=drop), seed=config.seed)
    for name, p in base.params.items():
        net.params[name].weights[...] = p.weights
        net.params[name].bias[...] = p.bias
    return train_network(config.replace(model=net.config), pairs, validation, net, progress, workers)


def overfit(config: TrainingConfig, steps=500, seed=1, target=0.01):
    """Fit a single fixed pair; returns the per-step loss list (stops early below ``target``)."""
    sample = make_pair_sample(seed, config)
    net = SegmentationNetwork.create(config.model, seed=config.seed)
    params = net.trainable()
    adam = nn.AdamState(config.learning_rate)
    losses = []
    for _ in range(steps):
        net.zero_grad()
        loss = batch_loss(net, [sample])
        losses.append(loss)
        if loss < target:
            break
        nn.adam_step(params, adam)
    return net, losses

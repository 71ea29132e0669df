"""Doubly stochastic single-slice training.

Each step draws, independently per constrained direction, a batch of
single-slice volumes: a random offset in {0..2^K-1} along the direction
(so every upsampling shift combination is exercised) plus a random noise
origin. Each sample is pushed through the generator in train mode, compared
with the direction's exemplar via the 2D perceptual loss, and
backpropagated individually; the accumulated parameter gradients are
averaged over the batch and applied with one Adam update.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import descriptor, noise, ops
from .autodiff import Tape, backward
from .generator import GeneratorModel

_ORIGIN_RANGE = 1 << 30  # random noise origins are drawn from +-2^30


class NumericError(RuntimeError):
    """Non-finite loss during training, with the offending sample attached."""


@dataclass
class TrainingConfig:
    net: descriptor.DescriptorNet
    exemplars: descriptor.ExemplarSet
    iterations: int = 3000
    learning_rate: float = 0.1
    batch_size: int = 10  # samples per slicing direction
    slice_size: int = None  # in-plane resolution; None = exemplar size
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    noise_seed: int = 0
    offset_seed: int = 1
    checkpoint_every: int = 0  # iterations between checkpoints; 0 = off
    checkpoint_path: str = None
    normalize_gradients: bool = False  # per-parameter gradient normalization

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.slice_size is not None and self.slice_size < 1:
            raise ValueError("slice_size must be a positive integer")

    def resolution_for(self, exemplar):
        if self.slice_size is not None:
            return self.slice_size
        return exemplar.image.shape[1]


@dataclass
class TrainingSample:
    direction: int
    offset: int  # Q_d in {0..2^K-1}
    region: noise.Region
    volume: object = None  # the generated single-slice volume (Var)


class AdamState:
    """First/second moment buffers shaped exactly like the parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(v.data) for n, v in params.items()}
        self.v = {n: np.zeros_like(v.data) for n, v in params.items()}

    def update(self, params, grads, lr):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            step = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= step.astype(p.data.dtype)


class Trainer:
    """Owns the model, optimizer state, RNG and loss log for one run."""

    def __init__(self, model, config, start_iteration=0, adam=None, rng=None):
        self.model = model
        self.config = config
        self.adam = adam or AdamState(model.trainable(), config.beta1,
                                      config.beta2, config.adam_eps)
        self.rng = rng or np.random.default_rng(config.offset_seed)
        self.iteration = start_iteration
        self.log = []  # (iteration, batch-mean loss, seconds)

    # -- sampling -----------------------------------------------------------

    def sample_training_slice(self, d):
        """Draw the offset and noise origin for one single-slice sample."""
        K = self.model.K
        q = int(self.rng.integers(0, 1 << K))
        base = self.rng.integers(-_ORIGIN_RANGE, _ORIGIN_RANGE, size=3)
        origin = [int(v) for v in base]
        origin[d] = (origin[d] << K) + q
        exemplar = self.config.exemplars.by_direction(d)
        n = self.config.resolution_for(exemplar)
        size = [n, n, n]
        size[d] = 1
        return TrainingSample(direction=d, offset=q,
                              region=noise.Region(tuple(origin), tuple(size)))

    def _forward_sample(self, sample, tape):
        spec = noise.noise_extents(sample.region, self.model.margins,
                                   self.config.noise_seed, self.model.m_i)
        zs = noise.sample_noise_vars(spec)
        out = self.model.forward(zs, spec, mode="train", tape=tape)
        sample.volume = out
        return ops.slice_to_image(out, sample.direction, tape=tape)

    # -- optimization -------------------------------------------------------

    def step(self):
        """One batch: per-sample forward/backward, averaged Adam update.

        Returns the batch-mean loss.
        """
        cfg = self.config
        trainable = self.model.trainable()
        for p in trainable.values():
            p.zero_grad()
        total = 0.0
        count = 0
        for exemplar in cfg.exemplars.exemplars:
            for _ in range(cfg.batch_size):
                sample = self.sample_training_slice(exemplar.direction)
                tape = Tape()
                image = self._forward_sample(sample, tape)
                loss = cfg.net.loss2d(image, exemplar.targets, tape=tape)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite loss {value} at iteration "
                        f"{self.iteration} (direction {sample.direction}, "
                        f"offset {sample.offset}, region {sample.region})")
                backward(tape, loss)
                total += value
                count += 1
        inv = 1.0 / count
        grads = {}
        for name, p in trainable.items():
            g = (p.grad if p.grad is not None else np.zeros_like(p.data)) * inv
            if cfg.normalize_gradients:
                norm = float(np.linalg.norm(g))
                if norm > 0.0:
                    g = g / norm
            grads[name] = g
        self.adam.update(trainable, grads, cfg.learning_rate)
        self.iteration += 1
        return total * inv

    def run(self, iterations=None, progress=None):
        """Run ``iterations`` steps (default: config.iterations), logging
        (iteration, loss, seconds) and writing periodic checkpoints."""
        cfg = self.config
        n = cfg.iterations if iterations is None else iterations
        for _ in range(n):
            t0 = time.perf_counter()
            loss = self.step()
            seconds = time.perf_counter() - t0
            self.log.append((self.iteration, loss, seconds))
            if progress is not None:
                progress(self.iteration, loss, seconds)
            if (cfg.checkpoint_every and cfg.checkpoint_path
                    and self.iteration % cfg.checkpoint_every == 0):
                self.save_checkpoint(cfg.checkpoint_path)
        return self.log

    # -- persistence --------------------------------------------------------

    def save_checkpoint(self, path):
        extra_tensors = []
        for name in sorted(self.adam.m):
            extra_tensors.append((f"adam.m.{name}", self.adam.m[name]))
            extra_tensors.append((f"adam.v.{name}", self.adam.v[name]))
        meta = {
            "iteration": self.iteration,
            "adam_step": self.adam.step_count,
            "rng_state": json.dumps(self.rng.bit_generator.state),
        }
        self.model.save(path, extra_metadata=meta, extra_tensors=extra_tensors)

    @classmethod
    def resume(cls, path, config):
        """Rebuild a trainer from a checkpoint; with the same seeds the
        subsequent loss sequence replays exactly."""
        model, extra, meta = GeneratorModel.load_with_extras(path)
        adam = AdamState(model.trainable(), config.beta1, config.beta2,
                         config.adam_eps)
        adam.step_count = int(meta.get("adam_step", 0))
        for name in adam.m:
            if f"adam.m.{name}" in extra:
                adam.m[name] = extra[f"adam.m.{name}"]
                adam.v[name] = extra[f"adam.v.{name}"]
        rng = np.random.default_rng(config.offset_seed)
        if "rng_state" in meta:
            rng.bit_generator.state = json.loads(meta["rng_state"])
        return cls(model, config, start_iteration=int(meta.get("iteration", 0)),
                   adam=adam, rng=rng)


def train(model, config, log_path=None, progress=None):
    """Train ``model`` in place; returns (model, loss log).

    The loss log is written as UTF-8 CSV ``iteration,loss,seconds`` when
    ``log_path`` is given.
    """
    trainer = Trainer(model, config)
    log = trainer.run(progress=progress)
    if log_path is not None:
        write_loss_log(log_path, log)
    return model, log


def write_loss_log(path, log):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss", "seconds"])
        for row in log:
            writer.writerow([row[0], repr(float(row[1])), f"{row[2]:.6f}"])

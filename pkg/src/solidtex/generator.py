"""Multi-scale 3D convolutional generator with on-demand evaluation.

The network consumes multi-channel uniform noise at K+1 scales. Each scale
runs the noise through a convolution block; starting from the coarsest
branch, the result is repeatedly upsampled, shift-compensated, concatenated
with the next finer branch and mixed by another convolution block, ending in
a 1x1x1 convolution to 3 color channels.

All convolutions are valid (no padding), so every output voxel depends on a
bounded noise footprint; together with the coordinate-seeded noise this
makes any box of the infinite texture computable independently. The forward
pass tracks the absolute coordinate of every intermediate tensor and crops
branches to their coordinate intersection before concatenation, which keeps
separately generated blocks bit-consistent.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import container, noise, ops
from .autodiff import Var
from .ops import ShapeError

LEAKY_SLOPE = 0.01

DEFAULT_K = 5
DEFAULT_M_I = 3
DEFAULT_M_S = 4


@dataclass
class SolidTexture:
    """A generated box of texture: unclamped float32 RGB voxels."""

    data: np.ndarray  # (3, N1, N2, N3)
    region: noise.Region
    global_seed: int


def _bn_param_names(prefix):
    return [f"{prefix}.weight", f"{prefix}.bias", f"{prefix}.mean", f"{prefix}.var"]


def parameter_manifest(K, m_i, m_s):
    """Full (name, shape) manifest of the generator parameters."""
    entries = []

    def conv(prefix, cin, cout, k):
        entries.append((f"{prefix}.weight", (cout, cin, k, k, k)))
        entries.append((f"{prefix}.bias", (cout,)))

    def bn(prefix, c):
        for name in _bn_param_names(prefix):
            entries.append((name, (c,)))

    for k in range(K + 1):
        conv(f"scale{k}.zblock.conv1", m_i, m_s, 3)
        bn(f"scale{k}.zblock.bn1", m_s)
        conv(f"scale{k}.zblock.conv2", m_s, m_s, 3)
        bn(f"scale{k}.zblock.bn2", m_s)
        conv(f"scale{k}.zblock.conv3", m_s, m_s, 1)
        bn(f"scale{k}.zblock.bn3", m_s)
    for k in range(K):
        w = (K - k + 1) * m_s
        bn(f"scale{k}.join.pre_bn_branch", w - m_s)
        bn(f"scale{k}.join.pre_bn_z", m_s)
        conv(f"scale{k}.join.conv1", w, w, 3)
        bn(f"scale{k}.join.bn1", w)
        conv(f"scale{k}.join.conv2", w, w, 3)
        bn(f"scale{k}.join.bn2", w)
        conv(f"scale{k}.join.conv3", w, w, 1)
        bn(f"scale{k}.join.bn3", w)
    conv("final", (K + 1) * m_s, 3, 1)
    return entries


class GeneratorModel:
    """Architecture constants plus learnable parameters.

    ``params`` maps manifest names to Vars; batch-norm running mean/variance
    live there too (updated by momentum in train mode, never by gradients).
    """

    def __init__(self, K=DEFAULT_K, m_i=DEFAULT_M_I, m_s=DEFAULT_M_S):
        if K < 1 or m_i < 1 or m_s < 1:
            raise ValueError("GeneratorModel: K, M_i, M_s must all be >= 1")
        self.K = K
        self.m_i = m_i
        self.m_s = m_s
        self.margins = noise.margin_table(K)
        self.params = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, K=DEFAULT_K, m_i=DEFAULT_M_I, m_s=DEFAULT_M_S, init_seed=0):
        """Deterministic initialization: fan-in-scaled uniform kernels, zero
        biases, batch-norm weight 1 / bias 0 / mean 0 / variance 1."""
        model = cls(K, m_i, m_s)
        rng = np.random.default_rng(init_seed)
        for name, shape in parameter_manifest(K, m_i, m_s):
            if name.endswith("conv1.weight") or name.endswith("conv2.weight") \
                    or name.endswith("conv3.weight") or name == "final.weight":
                fan_in = int(np.prod(shape[1:]))
                limit = np.sqrt(3.0 / fan_in)
                data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
            elif name.endswith(".weight") or name.endswith(".var"):
                data = np.ones(shape, dtype=np.float32)
            else:  # conv/bn biases and bn means
                data = np.zeros(shape, dtype=np.float32)
            model.params[name] = Var(data, name=name)
        return model

    def parameter_count(self):
        """Total scalar parameters, including batch-norm mean/variance."""
        return sum(int(v.data.size) for v in self.params.values())

    def trainable(self):
        """Gradient-updated parameters (kernels, biases, bn weight/bias)."""
        return {n: v for n, v in self.params.items()
                if not (n.endswith(".mean") or n.endswith(".var"))}

    def channel_schedule(self):
        """Channel width after the join block at each scale, fine to coarse."""
        return [(self.K - k + 1) * self.m_s for k in range(self.K + 1)]

    # -- forward ------------------------------------------------------------

    def _bn(self, x, prefix, mode, tape):
        p = self.params
        return ops.batch_norm(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"],
                              p[f"{prefix}.mean"], p[f"{prefix}.var"],
                              mode, tape=tape)

    def _conv_block(self, x, prefix, mode, tape):
        p = self.params
        for i in (1, 2, 3):
            x = ops.conv3d_valid(x, p[f"{prefix}.conv{i}.weight"],
                                 p[f"{prefix}.conv{i}.bias"], tape=tape)
            x = self._bn(x, f"{prefix}.bn{i}", mode, tape)
            x = ops.leaky_relu(x, LEAKY_SLOPE, tape=tape)
        return x

    def forward(self, noise_vars, spec, mode="infer", tape=None):
        """Run the generator over the noise windows of ``spec``.

        Returns a Var of shape (3, N1, N2, N3) matching the requested region
        exactly.
        """
        K = self.K
        region = spec.region
        schedules = [noise.shift_schedule(region.origin[d], K) for d in range(3)]
        self._check_noise(noise_vars, spec)

        def zpath(k):
            out = self._conv_block(noise_vars[k], f"scale{k}.zblock", mode, tape)
            start = tuple(spec.windows[k].origin[d] + 2 for d in range(3))
            return out, start

        branch, b_start = zpath(K)
        for k in range(K - 1, -1, -1):
            branch = ops.upsample_nn2(branch, tape=tape)
            s = tuple(schedules[d].s[k] for d in range(3))  # s_{k+1} per dim
            b_start = tuple(2 * b_start[d] + s[d] for d in range(3))
            if any(s):
                branch = ops.crop(branch, s,
                                  branch.data.shape[1:], tape=tape)
            zb, z_start = zpath(k)
            branch = self._bn(branch, f"scale{k}.join.pre_bn_branch", mode, tape)
            zb = self._bn(zb, f"scale{k}.join.pre_bn_z", mode, tape)
            lo = tuple(max(b_start[d], z_start[d]) for d in range(3))
            hi = tuple(min(b_start[d] + branch.data.shape[1 + d],
                           z_start[d] + zb.data.shape[1 + d]) for d in range(3))
            for d in range(3):
                if hi[d] <= lo[d]:
                    raise ShapeError(
                        f"scale {k} dim d{d + 1}: branches do not overlap")
            branch = ops.crop(branch,
                              tuple(lo[d] - b_start[d] for d in range(3)),
                              tuple(hi[d] - b_start[d] for d in range(3)),
                              tape=tape)
            zb = ops.crop(zb,
                          tuple(lo[d] - z_start[d] for d in range(3)),
                          tuple(hi[d] - z_start[d] for d in range(3)),
                          tape=tape)
            branch = ops.concat_channels(branch, zb, tape=tape)
            branch = self._conv_block(branch, f"scale{k}.join", mode, tape)
            b_start = tuple(lo[d] + 2 for d in range(3))

        out = ops.conv3d_valid(branch, self.params["final.weight"],
                               self.params["final.bias"], tape=tape)
        lo = tuple(region.origin[d] - b_start[d] for d in range(3))
        hi = tuple(lo[d] + region.size[d] for d in range(3))
        for d in range(3):
            if lo[d] < 0 or hi[d] > out.data.shape[1 + d]:
                raise ShapeError(
                    f"scale 0 dim d{d + 1}: output window [{lo[d]}, {hi[d]}) "
                    f"not covered by extent {out.data.shape[1 + d]}")
        return ops.crop(out, lo, hi, tape=tape)

    def _check_noise(self, noise_vars, spec):
        if len(noise_vars) != self.K + 1:
            raise ShapeError(
                f"expected {self.K + 1} noise scales, got {len(noise_vars)}")
        for k, (z, w) in enumerate(zip(noise_vars, spec.windows)):
            expected = (self.m_i,) + tuple(w.extent)
            if tuple(z.data.shape) != expected:
                for d in range(3):
                    if z.data.shape[1 + d] != w.extent[d]:
                        raise ShapeError(
                            f"noise scale {k} dim d{d + 1}: extent "
                            f"{z.data.shape[1 + d]}, expected {w.extent[d]}")
                raise ShapeError(
                    f"noise scale {k}: {z.data.shape[0]} channels, expected "
                    f"{self.m_i}")

    # -- on-demand synthesis ------------------------------------------------

    def generate_region(self, region, global_seed=0, _corrupt=False):
        """Pure function of (model, region, global_seed) in infer mode.

        ``_corrupt`` is fault injection for the tiling verifier: it samples
        the coarsest noise window from a wrong coordinate origin, simulating
        a broken shift/seeding chain.
        """
        spec = noise.noise_extents(region, self.margins, global_seed, self.m_i)
        zs = noise.sample_noise_vars(spec)
        if _corrupt:
            # fetch the coarsest window misaligned by one cell along x, as a
            # broken shift/seeding chain would
            w = spec.windows[-1]
            bad = noise.ScaleWindow(
                scale=w.scale,
                origin=(w.origin[0] + 1, w.origin[1], w.origin[2]),
                extent=w.extent, coverage=w.coverage)
            bad_spec = noise.NoiseSpec(global_seed=spec.global_seed,
                                       channels=spec.channels,
                                       windows=spec.windows[:-1] + (bad,),
                                       region=spec.region)
            zs[-1] = Var(noise.sample_noise(bad_spec, self.K))
        out = self.forward(zs, spec, mode="infer", tape=None)
        ops.require_finite(out.data, "generate_region")
        return SolidTexture(data=out.data, region=region, global_seed=global_seed)

    def generate_tiled(self, region, global_seed=0, block_size=32, workers=1,
                       _corrupt=False, _timings=None):
        """Partition the region into blocks, generate them independently and
        assemble; identical to ``generate_region`` by construction."""
        if isinstance(block_size, int):
            block_size = (block_size, block_size, block_size)
        if any(b < 1 for b in block_size):
            raise ValueError(f"block_size must be >= 1, got {block_size}")
        blocks = []
        for i0 in range(0, region.size[0], block_size[0]):
            for i1 in range(0, region.size[1], block_size[1]):
                for i2 in range(0, region.size[2], block_size[2]):
                    off = (i0, i1, i2)
                    size = tuple(min(block_size[d], region.size[d] - off[d])
                                 for d in range(3))
                    origin = tuple(region.origin[d] + off[d] for d in range(3))
                    blocks.append((off, noise.Region(origin, size)))
        out = np.empty((3,) + tuple(region.size), dtype=np.float32)

        def run(job):
            off, sub = job
            t0 = time.perf_counter()
            data = self.generate_region(sub, global_seed, _corrupt=_corrupt).data
            if _timings is not None:
                _timings.append((sub.origin, time.perf_counter() - t0))
            return off, data

        if workers <= 1:
            results = map(run, blocks)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, blocks))
        for off, data in results:
            sz = data.shape[1:]
            out[:, off[0]:off[0] + sz[0], off[1]:off[1] + sz[1],
                off[2]:off[2] + sz[2]] = data
        return SolidTexture(data=out, region=region, global_seed=global_seed)

    # -- persistence --------------------------------------------------------

    def save(self, path, extra_metadata=None, extra_tensors=()):
        meta = {"K": self.K, "M_i": self.m_i, "M_s": self.m_s,
                "leaky_slope": LEAKY_SLOPE, "bn_eps": ops.BN_EPS,
                "bn_momentum": ops.BN_MOMENTUM}
        if extra_metadata:
            meta.update(extra_metadata)
        tensors = [(n, self.params[n].data)
                   for n, _ in parameter_manifest(self.K, self.m_i, self.m_s)]
        tensors.extend(extra_tensors)
        container.save_tensors(path, container.MAGIC_GENERATOR, meta, tensors)

    @classmethod
    def load(cls, path):
        meta, tensors, _ = container.load_tensors(
            path, container.MAGIC_GENERATOR)
        model, extra = cls._from_tensors(meta, tensors)
        return model

    @classmethod
    def load_with_extras(cls, path):
        """Load a model plus any non-manifest tensors (checkpoint state)."""
        meta, tensors, _ = container.load_tensors(
            path, container.MAGIC_GENERATOR)
        return (*cls._from_tensors(meta, tensors), meta)

    def verify_tiling(self, region, block_size=32, global_seed=0, workers=1,
                      tolerance=1e-5, corrupt=False):
        """Compare monolithic generation against block assembly.

        Returns a report dict with the max abs voxel difference, pass/fail
        against ``tolerance`` and per-block timings. ``corrupt`` injects a
        deliberate shift fault into the tiled path (must then fail).
        """
        t0 = time.perf_counter()
        mono = self.generate_region(region, global_seed)
        mono_seconds = time.perf_counter() - t0
        timings = []
        tiled = self.generate_tiled(region, global_seed, block_size,
                                    workers=workers, _corrupt=corrupt,
                                    _timings=timings)
        max_diff = float(np.max(np.abs(mono.data - tiled.data)))
        return {
            "region": region,
            "block_size": block_size,
            "max_abs_diff": max_diff,
            "tolerance": tolerance,
            "passed": max_diff <= tolerance,
            "blocks": len(timings),
            "monolithic_seconds": mono_seconds,
            "block_timings": timings,
        }

    @classmethod
    def _from_tensors(cls, meta, tensors):
        try:
            model = cls(int(meta["K"]), int(meta["M_i"]), int(meta["M_s"]))
        except KeyError as e:
            raise container.ContainerError(f"missing header field {e}") from e
        manifest = parameter_manifest(model.K, model.m_i, model.m_s)
        for name, shape in manifest:
            if name not in tensors:
                raise container.ContainerError(f"missing tensor {name!r}")
            if tuple(tensors[name].shape) != shape:
                raise container.ContainerError(
                    f"tensor {name!r}: shape {tensors[name].shape}, expected "
                    f"{shape}")
            model.params[name] = Var(tensors[name], name=name)
        extra = {n: t for n, t in tensors.items()
                 if n not in {m for m, _ in manifest}}
        return model, extra

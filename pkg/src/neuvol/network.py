"""Encoder-decoder segmentation network with wavelet-fed encoder stages
and sub-pixel upsampling in the decoder.

The encoder is a full-resolution stem plus five downsampling stages. Each
downsampling stage halves the flagged axes in its first conv unit, runs a
separate conv unit over the multi-scale wavelet image of matching
resolution, concatenates the two feature sets, and fuses them in a second
unit. The decoder mirrors the stride schedule with sub-pixel upsampling,
skip concatenation, and a two-unit conv block per scale. A 1x1x1 head at
every decoder scale provides deep supervision, full resolution first.

Setting ``use_wavelet=False`` swaps the wavelet branch output for zeros of
the same shape; parameter layout and initialisation are untouched, so two
networks built from the same seed differ only in that signal.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .autograd import (
    Node,
    Parameter,
    Tape,
    concat_ch,
    conv3d_op,
    instance_norm_op,
    kaiming_conv_weights,
    leaky_relu_op,
    pixel_shuffle_op,
    tanh_op,
)
from .losses import softmax_channels
from .ops import same_padding
from .volume import LabelVolume, Volume4, load_volume, save_volume
from .wavelet import build_pyramid

NUM_STAGES = 6


def _kernel_for(stride) -> tuple[int, int, int]:
    """Kernel extent 1 on axes a stage leaves at native resolution."""
    return tuple(1 if s == 1 else 3 for s in stride)


@dataclass
class NetConfig:
    num_classes: int
    input_channels: int = 1
    base_channels: int = 32
    channel_cap: int = 320
    stride_schedule: tuple = ((2, 2, 2),) * 5
    num_layers: int = 6
    use_wavelet: bool = True

    def __post_init__(self):
        if self.num_layers != NUM_STAGES:
            raise ValueError(f"only num_layers={NUM_STAGES} is supported, got {self.num_layers}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.input_channels < 1 or self.base_channels < 1:
            raise ValueError("input_channels and base_channels must be positive")
        if self.channel_cap < self.base_channels:
            raise ValueError("channel_cap must be >= base_channels")
        self.stride_schedule = tuple(tuple(int(s) for s in t) for t in self.stride_schedule)
        if len(self.stride_schedule) != NUM_STAGES - 1:
            raise ValueError(f"stride_schedule needs {NUM_STAGES - 1} triples, "
                             f"got {len(self.stride_schedule)}")
        for t in self.stride_schedule:
            if len(t) != 3 or any(s not in (1, 2) for s in t) or 2 not in t:
                raise ValueError(f"each stride triple needs values in {{1, 2}} "
                                 f"with at least one 2, got {t}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(min(self.base_channels * 2 ** t, self.channel_cap)
                     for t in range(NUM_STAGES))

    @property
    def kernels(self) -> tuple[tuple[int, int, int], ...]:
        # the stem shares the first stage's anisotropy
        per_stage = [_kernel_for(s) for s in self.stride_schedule]
        return tuple([per_stage[0]] + per_stage)

    def wavelet_channels(self, stage: int) -> int:
        return max(8, self.channels[stage] // 4)

    @property
    def total_stride(self) -> tuple[int, int, int]:
        out = [1, 1, 1]
        for t in self.stride_schedule:
            out = [a * s for a, s in zip(out, t)]
        return tuple(out)


# ------------------------------------------------------------- modules

class ConvUnit:
    """conv -> instance norm (learned affine) -> leaky ReLU."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel, stride, rng):
        self.stride = tuple(stride)
        self.padding = same_padding(kernel)
        self.w = Parameter(f"{name}.w", kaiming_conv_weights(rng, out_ch, in_ch, kernel))
        self.b = Parameter(f"{name}.b", np.zeros(out_ch, np.float32))
        self.gamma = Parameter(f"{name}.gamma", np.ones(out_ch, np.float32))
        self.beta = Parameter(f"{name}.beta", np.zeros(out_ch, np.float32))

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b, self.gamma, self.beta]

    def forward(self, tape: Tape, x: Node) -> Node:
        y = conv3d_op(tape, x, tape.param(self.w), tape.param(self.b),
                      self.stride, self.padding)
        y = instance_norm_op(tape, y, tape.param(self.gamma), tape.param(self.beta))
        return leaky_relu_op(tape, y)


class StackedConvBlock:
    """Two conv units; the first may stride, and extra channels may be
    concatenated between the two (the wavelet fusion point)."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel, stride, rng,
                 mid_extra_ch: int = 0):
        self.unit1 = ConvUnit(f"{name}.unit1", in_ch, out_ch, kernel, stride, rng)
        self.unit2 = ConvUnit(f"{name}.unit2", out_ch + mid_extra_ch, out_ch,
                              kernel, (1, 1, 1), rng)

    def parameters(self) -> list[Parameter]:
        return self.unit1.parameters() + self.unit2.parameters()

    def forward(self, tape: Tape, x: Node, mid: Node | None = None) -> Node:
        h = self.unit1.forward(tape, x)
        if mid is not None:
            h = concat_ch(tape, [h, mid])
        return self.unit2.forward(tape, h)

    def forward_first(self, tape: Tape, x: Node) -> Node:
        return self.unit1.forward(tape, x)

    def forward_second(self, tape: Tape, h: Node) -> Node:
        return self.unit2.forward(tape, h)


class SubpixelUpsample:
    """5^3 conv + tanh, then 3^3 conv + leaky ReLU into r times the target
    channels, finished by pixel shuffling; no normalisation inside."""

    def __init__(self, name: str, in_ch: int, out_ch: int, factors, rng):
        self.factors = tuple(factors)
        r = int(np.prod(self.factors))
        mid = 2 * in_ch
        self.out_ch = out_ch
        self.w1 = Parameter(f"{name}.w1", kaiming_conv_weights(rng, mid, in_ch, (5, 5, 5)))
        self.b1 = Parameter(f"{name}.b1", np.zeros(mid, np.float32))
        self.w2 = Parameter(f"{name}.w2", kaiming_conv_weights(rng, r * out_ch, mid, (3, 3, 3)))
        self.b2 = Parameter(f"{name}.b2", np.zeros(r * out_ch, np.float32))

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, tape: Tape, x: Node) -> Node:
        h = conv3d_op(tape, x, tape.param(self.w1), tape.param(self.b1), (1, 1, 1), (2, 2, 2))
        h = tanh_op(tape, h)
        h = conv3d_op(tape, h, tape.param(self.w2), tape.param(self.b2), (1, 1, 1), (1, 1, 1))
        h = leaky_relu_op(tape, h)
        return pixel_shuffle_op(tape, h, self.factors)


class SegHead:
    """Plain 1x1x1 conv to class logits."""

    def __init__(self, name: str, in_ch: int, num_classes: int, rng):
        self.w = Parameter(f"{name}.w", kaiming_conv_weights(rng, num_classes, in_ch, (1, 1, 1)))
        self.b = Parameter(f"{name}.b", np.zeros(num_classes, np.float32))

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def forward(self, tape: Tape, x: Node) -> Node:
        return conv3d_op(tape, x, tape.param(self.w), tape.param(self.b), (1, 1, 1), (0, 0, 0))


# ------------------------------------------------------------- network

class SegNetwork:
    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.channels
        ks = config.kernels

        self.stem = StackedConvBlock("enc.stage0", config.input_channels, ch[0],
                                     ks[0], (1, 1, 1), rng)
        self.enc_blocks: list[StackedConvBlock] = []
        self.wavelet_units: list[ConvUnit] = []
        for t in range(1, NUM_STAGES):
            stride = config.stride_schedule[t - 1]
            wbc = config.wavelet_channels(t)
            iw_ch = config.input_channels * 2 ** sum(1 for s in stride if s == 2)
            self.enc_blocks.append(StackedConvBlock(
                f"enc.stage{t}", ch[t - 1], ch[t], ks[t], stride, rng,
                mid_extra_ch=wbc))
            self.wavelet_units.append(ConvUnit(
                f"enc.stage{t}.wavelet", iw_ch, wbc, ks[t], (1, 1, 1), rng))

        self.upsamples: list[SubpixelUpsample] = []
        self.dec_blocks: list[StackedConvBlock] = []
        self.heads: list[SegHead] = []
        for t in range(NUM_STAGES - 1, 0, -1):
            self.upsamples.append(SubpixelUpsample(
                f"dec.stage{t - 1}.up", ch[t], ch[t - 1],
                config.stride_schedule[t - 1], rng))
            self.dec_blocks.append(StackedConvBlock(
                f"dec.stage{t - 1}.block", 2 * ch[t - 1], ch[t - 1],
                ks[t - 1], (1, 1, 1), rng))
            self.heads.append(SegHead(
                f"dec.stage{t - 1}.head", ch[t - 1], config.num_classes, rng))

        self._params: list[Parameter] = []
        for mod in ([self.stem] + self.enc_blocks + self.wavelet_units
                    + self.upsamples + self.dec_blocks + self.heads):
            self._params.extend(mod.parameters())
        names = [p.name for p in self._params]
        assert len(set(names)) == len(names)

    def parameters(self) -> list[Parameter]:
        return self._params

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self._params)

    # --------------------------------------------------------- forward

    def _check_spatial(self, spatial):
        for n, d in zip(spatial, self.config.total_stride):
            if n % d:
                raise ValueError(f"spatial shape {tuple(spatial)} must be divisible "
                                 f"by the total stride {self.config.total_stride}")

    def forward_nodes(self, tape: Tape, vol: Volume4) -> list[Node]:
        """Head logits as tape nodes, full resolution first."""
        if vol.channels != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} input channels, "
                             f"got {vol.channels}")
        self._check_spatial(vol.spatial_shape)
        x_data = vol.data.astype(np.float32, copy=False)

        iw_nodes: list[Node | None] = [None] * (NUM_STAGES - 1)
        if self.config.use_wavelet:
            pyramid = build_pyramid(Volume4(x_data, vol.spacing), self.config.stride_schedule)
            for t in range(1, NUM_STAGES):
                iw_nodes[t - 1] = tape.leaf(pyramid.iw(t).data.astype(np.float32, copy=False))

        x = tape.leaf(x_data, "input")
        x = self.stem.forward(tape, x)
        skips = [x]
        for t in range(1, NUM_STAGES):
            block = self.enc_blocks[t - 1]
            h = block.forward_first(tape, x)
            if self.config.use_wavelet:
                branch = self.wavelet_units[t - 1].forward(tape, iw_nodes[t - 1])
            else:
                wbc = self.config.wavelet_channels(t)
                branch = tape.leaf(np.zeros(h.value.shape[:3] + (wbc,), np.float32))
            if branch.value.shape[:3] != h.value.shape[:3]:
                raise RuntimeError("wavelet image resolution does not match the carrier")
            x = block.forward_second(tape, concat_ch(tape, [h, branch]))
            if t < NUM_STAGES - 1:
                skips.append(x)

        logits = []
        for i, t in enumerate(range(NUM_STAGES - 1, 0, -1)):
            x = self.upsamples[i].forward(tape, x)
            x = concat_ch(tape, [x, skips[t - 1]])
            x = self.dec_blocks[i].forward(tape, x)
            logits.append(self.heads[i].forward(tape, x))
        logits.reverse()
        return logits

    def forward(self, vol: Volume4) -> list[Volume4]:
        """Head logits as volumes, full resolution first."""
        tape = Tape()
        nodes = self.forward_nodes(tape, vol)
        out = []
        cum = (1, 1, 1)
        strides = ((1, 1, 1),) + self.config.stride_schedule
        for node, st in zip(nodes, strides):
            cum = tuple(c * s for c, s in zip(cum, st))
            spacing = tuple(sp * c for sp, c in zip(vol.spacing, cum))
            out.append(Volume4(node.value, spacing))
        return out

    # ------------------------------------------------------- inference

    def infer(self, vol: Volume4, patch: tuple[int, int, int],
              step: tuple[int, int, int] | None = None) -> LabelVolume:
        """Sliding-window segmentation with uniform probability averaging.

        The volume is edge-padded up to the patch size (and window starts
        clamp to the far edge), so shapes that are smaller than the patch
        or not stride-divisible still segment cleanly.
        """
        patch = tuple(int(p) for p in patch)
        self._check_spatial(patch)
        if step is None:
            step = tuple(max(1, p // 2) for p in patch)

        orig = vol.spatial_shape
        padded = tuple(max(n, p) for n, p in zip(orig, patch))
        data = vol.data.astype(np.float32, copy=False)
        if padded != orig:
            data = np.pad(data, [(0, pn - n) for pn, n in zip(padded, orig)] + [(0, 0)],
                          mode="edge")

        starts = []
        for n, p, s in zip(padded, patch, step):
            pos = list(range(0, max(n - p, 0) + 1, s))
            if pos[-1] != n - p:
                pos.append(n - p)
            starts.append(sorted(set(pos)))

        probs = np.zeros(padded + (self.config.num_classes,), np.float64)
        counts = np.zeros(padded + (1,), np.float64)
        for i0 in starts[0]:
            for j0 in starts[1]:
                for k0 in starts[2]:
                    sl = (slice(i0, i0 + patch[0]), slice(j0, j0 + patch[1]),
                          slice(k0, k0 + patch[2]))
                    win = Volume4(data[sl], vol.spacing)
                    head = self.forward(win)[0]
                    probs[sl] += softmax_channels(head.data.astype(np.float64))
                    counts[sl] += 1.0
        probs /= counts
        crop = probs[: orig[0], : orig[1], : orig[2]]
        labels = np.argmax(crop, axis=3).astype(np.int32)
        return LabelVolume(labels, vol.spacing, self.config.num_classes)


# ----------------------------------------------------------- checkpoint

CKPT_FORMAT = "nvckpt1"


def save_checkpoint(path: str, network: SegNetwork, extra: dict[str, str] | None = None) -> None:
    """Write parameters, momentum buffers, and caller metadata to a
    checkpoint directory (plain-text manifest plus one blob per array)."""
    os.makedirs(path, exist_ok=True)
    lines = [f"format={CKPT_FORMAT}"]
    params = network.parameters()
    lines.append(f"num_params={len(params)}")
    for i, p in enumerate(params):
        blob = f"p{i:04d}.vol"
        lines.append(f"param.{i}.name={p.name}")
        lines.append(f"param.{i}.shape={','.join(str(s) for s in p.value.shape)}")
        lines.append(f"param.{i}.file={blob}")
        flat = p.value.astype(np.float32).reshape(-1, 1, 1, 1)
        save_volume(os.path.join(path, blob), Volume4(flat))
        if p.velocity is not None:
            vblob = f"v{i:04d}.vol"
            lines.append(f"param.{i}.velocity={vblob}")
            vflat = p.velocity.astype(np.float32).reshape(-1, 1, 1, 1)
            save_volume(os.path.join(path, vblob), Volume4(vflat))
    for key, value in (extra or {}).items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ValueError(f"extra key/value must be single-line, got {key!r}")
        lines.append(f"extra.{key}={value}")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str, network: SegNetwork) -> dict[str, str]:
    """Restore parameters and momentum in place; hand back the extra map."""
    manifest = os.path.join(path, "manifest.txt")
    with open(manifest) as fh:
        entries = {}
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition("=")
            entries[key] = value
    if entries.get("format") != CKPT_FORMAT:
        raise ValueError(f"unrecognised checkpoint format in {manifest}")
    params = network.parameters()
    if int(entries["num_params"]) != len(params):
        raise ValueError("checkpoint parameter count does not match the network")
    for i, p in enumerate(params):
        name = entries[f"param.{i}.name"]
        if name != p.name:
            raise ValueError(f"checkpoint parameter {i} is {name!r}, network has {p.name!r}")
        shape = tuple(int(s) for s in entries[f"param.{i}.shape"].split(","))
        if shape != p.value.shape:
            raise ValueError(f"shape mismatch for {name!r}: {shape} vs {p.value.shape}")
        blob = load_volume(os.path.join(path, entries[f"param.{i}.file"]))
        p.value = blob.data.reshape(shape).astype(np.float32)
        vfile = entries.get(f"param.{i}.velocity")
        if vfile is not None:
            vblob = load_volume(os.path.join(path, vfile))
            p.velocity = vblob.data.reshape(shape).astype(np.float32)
        else:
            p.velocity = None
    prefix = "extra."
    return {k[len(prefix):]: v for k, v in entries.items() if k.startswith(prefix)}

"""The parameterized networks and checkpoint persistence.

Three trainable architectures (encoder-decoder generator with skip
connections, patch discriminator, cascaded refinement generator) plus a
fixed seeded feature extractor standing in for a pretrained backbone.
All forward passes run on the autodiff engine; spatial tensors are (C,H,W).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (SemanticLayout, NoiseVector, noise_channel_array,
                   one_hot_array, resize_layout_nearest)

CHECKPOINT_MAGIC = b"DSYN"
CHECKPOINT_VERSION = 1
_META_ENTRY = "__meta__"


class ModelError(ValueError):
    pass


def _he_kernel(rng: np.random.Generator, cout, cin, kh, kw, gain=2.0):
    std = np.sqrt(gain / (cin * kh * kw))
    return rng.normal(0.0, std, size=(cout, cin, kh, kw))


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _dropout(x: ad.Tensor, rate: float, rng: np.random.Generator) -> ad.Tensor:
    keep = 1.0 - rate
    mask = (rng.uniform(size=x.shape) < keep).astype(x.data.dtype) / np.float32(keep)
    return ad.mul(x, ad.wrap(mask))


class _ConvBlock:
    """conv -> optional layer norm -> leaky relu, parameters owned here."""

    def __init__(self, rng, name, cin, cout, k, stride, pad, norm=True, slope=0.2):
        self.kernel = ad.Parameter(_he_kernel(rng, cout, cin, k, k), f"{name}/kernel")
        self.bias = ad.Parameter(np.zeros(cout), f"{name}/bias")
        self.stride, self.pad, self.slope = stride, pad, slope
        self.norm = norm
        if norm:
            self.ln_gain = ad.Parameter(np.ones(cout), f"{name}/ln_gain")
            self.ln_bias = ad.Parameter(np.zeros(cout), f"{name}/ln_bias")

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        y = ad.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.pad)
        if self.norm:
            y = ad.layer_norm(y, self.ln_gain, self.ln_bias)
        return ad.leaky_relu(y, self.slope)

    def parameters(self):
        ps = [self.kernel, self.bias]
        if self.norm:
            ps += [self.ln_gain, self.ln_bias]
        return ps


class GeneratorUNet:
    """Encoder-decoder generator with skip connections.

    Input is the one-hot layout stacked with the noise channel,
    (|C|+1, H, W); output is a (3, H, W) image squashed to (0,1).
    """

    def __init__(self, class_count: int, base_width: int = 16, depth: int = 3,
                 dropout_rate: float = 0.5, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.class_count = class_count
        self.depth = depth
        self.dropout_rate = dropout_rate
        widths = [base_width * (2 ** i) for i in range(depth)]
        self.enc = []
        cin = class_count + 1
        for i, w in enumerate(widths):
            self.enc.append(_ConvBlock(rng, f"gen/enc{i}", cin, w, 4, 2, 1, norm=(i > 0)))
            cin = w
        self.dec = []
        for i in reversed(range(depth)):
            # skip concat doubles the input width except at the bottleneck
            cin_dec = widths[i] * (2 if i < depth - 1 else 1)
            cout = widths[i - 1] if i > 0 else base_width
            self.dec.append(_ConvBlock(rng, f"gen/dec{i}", cin_dec, cout, 3, 1, 1))
        self.head_kernel = ad.Parameter(_he_kernel(rng, 3, base_width, 3, 3, gain=1.0),
                                        "gen/head/kernel")
        self.head_bias = ad.Parameter(np.zeros(3), "gen/head/bias")

    def parameters(self):
        ps = []
        for blk in self.enc + self.dec:
            ps += blk.parameters()
        return ps + [self.head_kernel, self.head_bias]

    def forward(self, layout_onehot: ad.Tensor, noise_channel: ad.Tensor,
                dropout_on: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
        _, h, w = layout_onehot.shape
        if not (_is_pow2(h) and _is_pow2(w)):
            raise ModelError(f"generator input must have power-of-two dims, got {h}x{w}")
        if min(h, w) < 2 ** self.depth:
            raise ModelError(f"generator input {h}x{w} smaller than 2^depth={2 ** self.depth}")
        if dropout_on and rng is None:
            raise ModelError("dropout_on requires an rng")
        x = ad.concat_channels([layout_onehot, noise_channel])
        skips = []
        for blk in self.enc:
            x = blk(x)
            skips.append(x)
        for j, blk in enumerate(self.dec):
            x = blk(ad.upsample2x(x))
            if dropout_on and self.dropout_rate > 0:
                x = _dropout(x, self.dropout_rate, rng)
            level = self.depth - 2 - j
            if level >= 0:
                x = ad.concat_channels([x, skips[level]])
        return ad.sigmoid(ad.conv2d(x, self.head_kernel, self.head_bias, padding=1))

    def generate(self, layout: SemanticLayout, noise: NoiseVector,
                 dropout_on: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
        onehot = ad.wrap(_cached_onehot(layout, layout.height, layout.width))
        chan = ad.wrap(noise_channel_array(layout, noise, dtype=np.float32))
        return self.forward(onehot, chan, dropout_on=dropout_on, rng=rng)

    def arch(self) -> dict:
        return {"kind": "unet", "class_count": self.class_count,
                "base_width": self.enc[0].kernel.shape[0], "depth": self.depth,
                "dropout_rate": self.dropout_rate}


class PatchDiscriminator:
    """Stride-2 conv stack scoring (layout, image) pairs per patch.

    Output is a (1, P, P) map of sigmoid scores; P = H / 2^stages.
    """

    def __init__(self, class_count: int, base_width: int = 16, stages: int = 3, seed: int = 1):
        rng = np.random.default_rng(seed)
        self.class_count = class_count
        self.stages = stages
        self.blocks = []
        cin = class_count + 3
        w = base_width
        for i in range(stages):
            self.blocks.append(_ConvBlock(rng, f"disc/c{i}", cin, w, 4, 2, 1, norm=(i > 0)))
            cin, w = w, w * 2
        self.head_kernel = ad.Parameter(_he_kernel(rng, 1, cin, 1, 1, gain=1.0), "disc/head/kernel")
        self.head_bias = ad.Parameter(np.zeros(1), "disc/head/bias")

    def parameters(self):
        ps = []
        for blk in self.blocks:
            ps += blk.parameters()
        return ps + [self.head_kernel, self.head_bias]

    def forward(self, layout_onehot: ad.Tensor, image: ad.Tensor) -> ad.Tensor:
        if layout_onehot.shape[1:] != image.shape[1:]:
            raise ModelError(f"discriminator dims differ: layout {layout_onehot.shape} "
                             f"vs image {image.shape}")
        x = ad.concat_channels([layout_onehot, image])
        for blk in self.blocks:
            x = blk(x)
        return ad.sigmoid(ad.conv2d(x, self.head_kernel, self.head_bias))

    def score(self, layout: SemanticLayout, image: ad.Tensor) -> ad.Tensor:
        onehot = ad.wrap(_cached_onehot(layout, layout.height, layout.width))
        return self.forward(onehot, image)

    def arch(self) -> dict:
        return {"kind": "patch_disc", "class_count": self.class_count,
                "base_width": self.blocks[0].kernel.shape[0], "stages": self.stages}


class CrnCascade:
    """Cascade of doubling refinement modules.

    Module i consumes the layout and noise channel downsampled to
    (h0*2^i, w0*2^i) concatenated with the previous module's features, and
    emits features at twice that resolution. After D modules a head conv
    produces 3*n_images channels squashed to (0,1).
    """

    def __init__(self, class_count: int, base_h: int = 2, base_w: int = 2,
                 doublings: int = 4, width: int = 32, n_images: int = 1, seed: int = 2,
                 noise_min_scale: int = 8):
        if doublings < 1:
            raise ModelError("cascade needs at least one doubling module")
        rng = np.random.default_rng(seed)
        self.class_count = class_count
        self.base_h, self.base_w = base_h, base_w
        self.doublings = doublings
        self.width = width
        self.n_images = n_images
        # the coarsest module scales mix segments too much for a localized
        # noise response, so the noise channel only joins finer modules
        self.noise_min_scale = noise_min_scale
        self.modules = []
        for i in range(doublings):
            with_noise = min(base_h, base_w) * 2 ** i >= noise_min_scale
            cin = class_count + (1 if with_noise else 0) + (width if i > 0 else 0)
            self.modules.append((
                _ConvBlock(rng, f"crn/m{i}/a", cin, width, 3, 1, 1),
                _ConvBlock(rng, f"crn/m{i}/b", width, width, 3, 1, 1),
            ))
        self.head_kernel = ad.Parameter(_he_kernel(rng, 3 * n_images, width, 3, 3, gain=1.0),
                                        "crn/head/kernel")
        self.head_bias = ad.Parameter(np.zeros(3 * n_images), "crn/head/bias")

    @property
    def output_size(self) -> tuple[int, int]:
        return self.base_h * 2 ** self.doublings, self.base_w * 2 ** self.doublings

    def parameters(self):
        ps = []
        for a, b in self.modules:
            ps += a.parameters() + b.parameters()
        return ps + [self.head_kernel, self.head_bias]

    def forward_all(self, layout: SemanticLayout, noise: NoiseVector) -> list[ad.Tensor]:
        out_h, out_w = self.output_size
        if (layout.height, layout.width) != (out_h, out_w):
            raise ModelError(f"layout is {layout.height}x{layout.width} but the cascade "
                             f"emits {out_h}x{out_w}")
        feats = None
        noise32 = noise.entries.astype(np.float32)
        if len(noise32) != self.class_count:
            raise ModelError(f"noise has {len(noise32)} entries, expected {self.class_count}")
        for i, (blk_a, blk_b) in enumerate(self.modules):
            h, w = self.base_h * 2 ** i, self.base_w * 2 ** i
            onehot, idx = _cached_onehot_and_index(layout, h, w)
            inputs = [ad.wrap(onehot)]
            if min(h, w) >= self.noise_min_scale:
                inputs.append(ad.wrap(noise32[idx][None, :, :]))
            if feats is not None:
                inputs.append(feats)
            x = blk_b(blk_a(ad.concat_channels(inputs)))
            feats = ad.upsample2x(x)
            assert feats.shape[1] == 2 * h and feats.shape[2] == 2 * w
        head = ad.sigmoid(ad.conv2d(feats, self.head_kernel, self.head_bias, padding=1))
        return [_slice_channels(head, 3 * j, 3 * (j + 1)) for j in range(self.n_images)]

    def generate(self, layout: SemanticLayout, noise: NoiseVector,
                 dropout_on: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
        # deterministic cascade: dropout args accepted for interface parity
        return self.forward_all(layout, noise)[0]

    def arch(self) -> dict:
        return {"kind": "crn", "class_count": self.class_count, "base_h": self.base_h,
                "base_w": self.base_w, "doublings": self.doublings, "width": self.width,
                "n_images": self.n_images, "noise_min_scale": self.noise_min_scale}


def _slice_channels(x: ad.Tensor, lo: int, hi: int) -> ad.Tensor:
    data = x.data[lo:hi]
    return ad.Tensor(data, x.requires_grad,
                     ((x, lambda g, lo=lo, hi=hi, shp=x.shape: _pad_channel_grad(g, lo, hi, shp)),)
                     if x.requires_grad else ())


def _pad_channel_grad(g, lo, hi, shape):
    out = np.zeros(shape, dtype=g.dtype)
    out[lo:hi] = g
    return out


class FeatureExtractor:
    """Fixed seeded conv stack; stage k halves resolution and returns its
    activation. Parameters are plain constants and never see an optimizer.

    The stack runs on six channels: raw RGB plus per-pixel log-chromaticity
    (log of each channel over the pixel's mean intensity, weighted by
    ``chroma_gain``). The chroma channels are exactly invariant to
    per-pixel brightness scaling, so the induced content distance prices
    hue/saturation distortions far above illumination-style ones --
    the kind of perceptual asymmetry the pretrained backbones it stands in
    for exhibit.

    Kernels are rescaled at construction so every stage's activations have
    standard deviation ~= ``feature_scale`` on a seeded probe image, pinning
    the content-loss magnitude regardless of depth.
    """

    LOG_EPS = 0.02  # bounds the log slope so dark channels stay well-behaved

    def __init__(self, stages: int = 2, base_width: int = 12, seed: int = 1234,
                 feature_scale: float = 4.0, chroma_gain: float = 4.0,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.stages = stages
        self.seed = seed
        self.base_width = base_width
        self.feature_scale = feature_scale
        self.chroma_gain = chroma_gain
        self.dtype = np.dtype(dtype)
        lum_kernel = np.full((1, 3, 1, 1), 1.0 / 3.0)
        self._lum_kernel = ad.tensor(lum_kernel, dtype=dtype)
        self._lum_bias = ad.tensor(np.zeros(1), dtype=dtype)
        self.layers = []
        probe = self._transform_raw(rng.uniform(0.05, 1.0, size=(3, 32, 32)).astype(dtype))
        cin = 6
        for k in range(stages):
            cout = base_width * (2 ** k)
            kernel = _he_kernel(rng, cout, cin, 3, 3).astype(dtype)
            bias = rng.normal(0.0, 0.1, size=cout).astype(dtype)
            raw = _conv_lrelu_raw(probe, kernel, bias)
            gain = dtype(feature_scale / max(float(raw.std()), 1e-6))
            kernel, bias = kernel * gain, bias * gain
            probe = _conv_lrelu_raw(probe, kernel, bias)
            self.layers.append((ad.tensor(kernel, dtype=dtype), ad.tensor(bias, dtype=dtype)))
            cin = cout

    def _transform(self, image: ad.Tensor) -> ad.Tensor:
        """[rgb ; chroma_gain * (log rgb - log mean_rgb)], per pixel."""
        lum = ad.conv2d(image, self._cast(self._lum_kernel, image),
                        self._cast(self._lum_bias, image))
        lum3 = ad.concat_channels([lum, lum, lum])
        chroma = ad.sub(ad.log_clamped(image, self.LOG_EPS),
                        ad.log_clamped(lum3, self.LOG_EPS))
        return ad.concat_channels([image, ad.scale(chroma, self.chroma_gain)])

    def _transform_raw(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(self._transform(ad.wrap(arr)).data)

    @staticmethod
    def _cast(t: ad.Tensor, like: ad.Tensor) -> ad.Tensor:
        if t.dtype == like.dtype:
            return t
        return ad.wrap(t.data.astype(like.data.dtype))

    def features(self, image: ad.Tensor) -> list[ad.Tensor]:
        if image.data.ndim != 3 or image.shape[0] != 3:
            raise ModelError(f"feature extractor expects (3,H,W), got {image.shape}")
        _, h, w = image.shape
        if h % (2 ** self.stages) or w % (2 ** self.stages):
            raise ModelError(f"image dims {h}x{w} not divisible by 2^{self.stages}")
        out = []
        x = self._transform(image)
        for kernel, bias in self.layers:
            kernel = self._cast(kernel, image)
            bias = self._cast(bias, image)
            x = ad.leaky_relu(ad.conv2d(x, kernel, bias, stride=2, padding=1), 0.2)
            out.append(x)
        return out

    def arch(self) -> dict:
        return {"kind": "phi", "stages": self.stages, "base_width": self.base_width,
                "seed": self.seed, "feature_scale": self.feature_scale,
                "chroma_gain": self.chroma_gain}


def _conv_lrelu_raw(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Plain-array stride-2 conv + leaky relu, used only for calibration."""
    out = ad.conv2d(ad.wrap(x), ad.wrap(kernel), ad.wrap(bias), stride=2, padding=1)
    return np.where(out.data >= 0, out.data, 0.2 * out.data)


# ---------------------------------------------------------------------------
# per-layout caches (layouts are immutable, so memoizing on the object is safe)

def _cached_onehot_and_index(layout: SemanticLayout, h: int, w: int):
    cache = layout.__dict__.setdefault("_scale_cache", {})
    key = (h, w)
    hit = cache.get(key)
    if hit is None:
        scaled = layout if (layout.height, layout.width) == key else \
            resize_layout_nearest(layout, h, w)
        idx = scaled.pixels.astype(np.int64)
        onehot = one_hot_array(scaled, dtype=np.float32)
        onehot.flags.writeable = False
        hit = (onehot, idx)
        cache[key] = hit
    return hit


def _cached_onehot(layout: SemanticLayout, h: int, w: int) -> np.ndarray:
    return _cached_onehot_and_index(layout, h, w)[0]


# ---------------------------------------------------------------------------
# checkpoint format: magic "DSYN", u32 version, u32 entry count, then per
# entry u16 name length, name bytes, u8 ndim, u32 dims..., f32 LE payload.
# All integers little-endian. Non-tensor state (config echo, optimizer step,
# RNG state) rides along as a JSON payload in the reserved __meta__ entry.

def checkpoint_save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries: list[tuple[str, bytes, tuple[int, ...]]] = []
    for name, arr in sorted(tensors.items()):
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append((name, a.tobytes(), a.shape))
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        blob += b" " * (-len(blob) % 4)
        entries.append((_META_ENTRY, blob, (len(blob) // 4,)))

    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    for name, payload, shape in entries:
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", len(shape))
        for d in shape:
            buf += struct.pack("<I", d)
        buf += payload

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(bytes(buf))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise ModelError(f"{path}: truncated {what} at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: checkpoint version {version} unsupported "
                         f"(expected {CHECKPOINT_VERSION})")
    tensors: dict[str, np.ndarray] = {}
    meta = None
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims")) if ndim else ()
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = take(4 * n, f"payload of {name}")
        if name == _META_ENTRY:
            meta = json.loads(payload.decode("utf-8"))
        else:
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != len(data):
        raise ModelError(f"{path}: {len(data) - pos} trailing bytes after entry {count}")
    return tensors, meta


def named_parameters(model) -> dict[str, ad.Parameter]:
    out = {}
    for p in model.parameters():
        if p.name in out:
            raise ModelError(f"duplicate parameter name {p.name}")
        out[p.name] = p
    return out


def load_parameters(model, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Assign checkpoint arrays into a model; unknown or missing names error."""
    params = named_parameters(model)
    seen = set()
    for name, arr in tensors.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix):]
        if key not in params:
            raise ModelError(f"checkpoint tensor {name!r} does not match any model parameter")
        params[key].assign(arr)
        seen.add(key)
    missing = sorted(set(params) - seen)
    if missing:
        raise ModelError(f"checkpoint is missing parameters: {missing[:4]}...")


def build_model(arch: dict):
    kind = arch.get("kind")
    if kind == "unet":
        return GeneratorUNet(arch["class_count"], base_width=arch["base_width"],
                             depth=arch["depth"], dropout_rate=arch["dropout_rate"])
    if kind == "patch_disc":
        return PatchDiscriminator(arch["class_count"], base_width=arch["base_width"],
                                  stages=arch["stages"])
    if kind == "crn":
        return CrnCascade(arch["class_count"], base_h=arch["base_h"], base_w=arch["base_w"],
                          doublings=arch["doublings"], width=arch["width"],
                          n_images=arch["n_images"],
                          noise_min_scale=arch.get("noise_min_scale", 8))
    if kind == "phi":
        return FeatureExtractor(stages=arch["stages"], base_width=arch["base_width"],
                                seed=arch["seed"],
                                feature_scale=arch.get("feature_scale", 4.0),
                                chroma_gain=arch.get("chroma_gain", 4.0))
    raise ModelError(f"unknown model kind {kind!r}")

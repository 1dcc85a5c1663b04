"""Generator / discriminator / perceptual-feature networks.

Generators are pruned U-Nets: each encoder level is a 4x4 stride-2
convolution + Instance Norm + LeakyReLU(0.2); the decoder mirrors it
with deconvolution + ReLU, concatenating the matching encoder features
through skip connections.  Output goes through a sigmoid into (0,1).
Discriminators follow PatchGAN: a stack of 4x4 convolutions emitting a
spatial grid of logits, each judging a local patch.

The perceptual backbone is a frozen, seed-deterministic random conv
pyramid (channels 16/32/64, stride-2 stages); its three stage outputs
are the activation set used by the perceptual and style losses.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, InvalidParameterError, ShapeError
from ..featmap import BinaryMap, FeatureMap
from ..image import GrayImage, RgbImage
from .. import autodiff as ad
from ..autodiff import Tensor

ROLES = ("G1", "G2", "G2prime", "D1", "D2", "PerceptNet")
_ROLE_IO = {"G1": (128, 1), "G2": (129, 3), "G2prime": (1, 3),
            "D1": (1, 1), "D2": (3, 1), "PerceptNet": (3, 64)}
_MAX_CH_MULT = 8
_PERCEPT_CHANNELS = (16, 32, 64)


@dataclass(frozen=True)
class NetworkSpec:
    role: str
    depth: int = 4
    base_channels: int = 32

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidParameterError(f"unknown role {self.role!r}")
        if self.depth < 1 or self.base_channels < 1:
            raise InvalidParameterError("depth and base_channels must be >= 1")

    @property
    def in_channels(self) -> int:
        return _ROLE_IO[self.role][0]

    @property
    def out_channels(self) -> int:
        return _ROLE_IO[self.role][1]


def _check_4d(x: Tensor, channels: int, who: str) -> None:
    if x.data.ndim != 4 or x.data.shape[1] != channels:
        raise ShapeError(f"{who} expects (N,{channels},H,W)", x.data.shape,
                         (None, channels, None, None))


class _Network:
    """Parameter container with stable names, checkpointable via CKP1."""

    def __init__(self, spec: NetworkSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.step = 0
        self._params: dict[str, Tensor] = {}

    def _add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(data, requires_grad=trainable)
        self._params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return [t for t in self._params.values() if t.requires_grad]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "_meta.role": np.asarray([float(ROLES.index(self.spec.role))], dtype=np.float32),
            "_meta.depth": np.asarray([float(self.spec.depth)], dtype=np.float32),
            "_meta.base_channels": np.asarray([float(self.spec.base_channels)], dtype=np.float32),
            "_meta.seed": np.asarray([float(self.seed)], dtype=np.float32),
            "_meta.step": np.asarray([float(self.step)], dtype=np.float32),
        }
        for name, t in self._params.items():
            out[name] = t.data
        return out

    def save(self, path: str | os.PathLike) -> None:
        ad.save_tensors(path, self.state_tensors())

    def load_state(self, named: dict[str, np.ndarray]) -> None:
        self.seed = int(named["_meta.seed"][0])
        self.step = int(named["_meta.step"][0])
        for name, t in self._params.items():
            if name not in named:
                raise FormatError(f"checkpoint missing tensor {name!r}")
            arr = named[name].astype(np.float32)
            if arr.shape != t.data.shape:
                raise ShapeError(f"checkpoint tensor {name!r} shape mismatch",
                                 arr.shape, t.data.shape)
            t.data = arr


class Generator(_Network):
    """Pruned U-Net; output spatial size equals input spatial size."""

    def __init__(self, spec: NetworkSpec, seed: int):
        if not spec.role.startswith("G"):
            raise InvalidParameterError(f"generator role expected, got {spec.role}")
        super().__init__(spec, seed)
        rng = np.random.Generator(np.random.PCG64(seed))
        chans = [min(spec.base_channels * 2 ** i, spec.base_channels * _MAX_CH_MULT)
                 for i in range(spec.depth)]
        self.enc_channels = chans

        c_in = spec.in_channels
        for i, c_out in enumerate(chans):
            fan = c_in * 16
            self._add(f"enc{i}.w", ad.he_normal(rng, (c_out, c_in, 4, 4), fan))
            self._add(f"enc{i}.b", np.zeros(c_out, dtype=np.float32))
            c_in = c_out
        # decoder input channels double after each skip concatenation
        for i in reversed(range(spec.depth)):
            c_out = spec.out_channels if i == 0 else chans[i - 1]
            fan = c_in * 16
            self._add(f"dec{i}.w", ad.he_normal(rng, (c_in, c_out, 4, 4), fan))
            self._add(f"dec{i}.b", np.zeros(c_out, dtype=np.float32))
            c_in = c_out * 2  # skip concat with encoder level i-1

    def forward(self, x: Tensor) -> Tensor:
        _check_4d(x, self.spec.in_channels, self.spec.role)
        h, w = x.data.shape[2], x.data.shape[3]
        div = 2 ** self.spec.depth
        if h % div or w % div:
            raise ShapeError(f"{self.spec.role} input spatial dims must divide {div}",
                             x.data.shape, (None, None, div, div))
        p = self._params
        skips = []
        cur = x
        for i in range(self.spec.depth):
            cur = ad.conv2d(cur, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, pad=1)
            cur = ad.leaky_relu(ad.instance_norm(cur), 0.2)
            skips.append(cur)
        for i in reversed(range(self.spec.depth)):
            cur = ad.deconv2d(cur, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=2, pad=1)
            if i == 0:
                return ad.sigmoid(cur)
            cur = ad.relu(ad.instance_norm(cur))
            cur = ad.concat([cur, skips[i - 1]], axis=1)

    __call__ = forward


class Discriminator(_Network):
    """PatchGAN: 4 conv layers (stride 2,2,1,1) emitting an h'xw' logit map."""

    _MIN_INPUT = 16

    def __init__(self, spec: NetworkSpec, seed: int):
        if not spec.role.startswith("D"):
            raise InvalidParameterError(f"discriminator role expected, got {spec.role}")
        super().__init__(spec, seed)
        rng = np.random.Generator(np.random.PCG64(seed))
        b = spec.base_channels
        plan = [(spec.in_channels, b, 2), (b, 2 * b, 2), (2 * b, 4 * b, 1), (4 * b, 1, 1)]
        self.plan = plan
        for i, (ci, co, _) in enumerate(plan):
            self._add(f"conv{i}.w", ad.he_normal(rng, (co, ci, 4, 4), ci * 16))
            self._add(f"conv{i}.b", np.zeros(co, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        _check_4d(x, self.spec.in_channels, self.spec.role)
        if min(x.data.shape[2], x.data.shape[3]) < self._MIN_INPUT:
            raise ShapeError(f"{self.spec.role} input must be at least "
                             f"{self._MIN_INPUT}x{self._MIN_INPUT}", x.data.shape, None)
        p = self._params
        cur = x
        for i, (_, _, stride) in enumerate(self.plan):
            cur = ad.conv2d(cur, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=stride, pad=1)
            if i == len(self.plan) - 1:
                return cur  # raw patch logits
            if i > 0:
                cur = ad.instance_norm(cur)
            cur = ad.leaky_relu(cur, 0.2)

    __call__ = forward


class PerceptNet(_Network):
    """Frozen random conv pyramid standing in for a pretrained backbone."""

    def __init__(self, seed: int, base_spec: NetworkSpec | None = None):
        super().__init__(base_spec or NetworkSpec("PerceptNet", depth=3, base_channels=16), seed)
        rng = np.random.Generator(np.random.PCG64(seed))
        c_in = 3
        for i, c_out in enumerate(_PERCEPT_CHANNELS):
            self._add(f"stage{i}.w", ad.he_normal(rng, (c_out, c_in, 3, 3), c_in * 9),
                      trainable=False)
            self._add(f"stage{i}.b", np.zeros(c_out, dtype=np.float32), trainable=False)
            c_in = c_out

    def forward(self, x: Tensor) -> list[Tensor]:
        """Returns the three stage activations (the loss layer set)."""
        _check_4d(x, 3, "PerceptNet")
        p = self._params
        acts = []
        cur = x
        for i in range(len(_PERCEPT_CHANNELS)):
            cur = ad.relu(ad.conv2d(cur, p[f"stage{i}.w"], p[f"stage{i}.b"], stride=2, pad=1))
            acts.append(cur)
        return acts

    __call__ = forward


def build_generator(spec: NetworkSpec, seed: int = 0) -> Generator:
    return Generator(spec, seed)


def build_discriminator(spec: NetworkSpec, seed: int = 0) -> Discriminator:
    return Discriminator(spec, seed)


def load_model(path: str | os.PathLike):
    """Rebuild a network from a CKP1 checkpoint."""
    named = ad.load_tensors(path)
    for key in ("_meta.role", "_meta.depth", "_meta.base_channels", "_meta.seed", "_meta.step"):
        if key not in named:
            raise FormatError(f"checkpoint missing {key!r}")
    role = ROLES[int(named["_meta.role"][0])]
    spec = NetworkSpec(role, depth=int(named["_meta.depth"][0]),
                       base_channels=int(named["_meta.base_channels"][0]))
    seed = int(named["_meta.seed"][0])
    if role.startswith("G"):
        net = Generator(spec, seed)
    elif role.startswith("D"):
        net = Discriminator(spec, seed)
    else:
        net = PerceptNet(seed, base_spec=spec)
    net.load_state(named)
    return net


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _map_to_tensor(m: FeatureMap | BinaryMap) -> Tensor:
    if isinstance(m, FeatureMap):
        data = np.transpose(m.data, (2, 0, 1))[None]
    else:
        data = m.data[None, None]
    return Tensor(np.ascontiguousarray(data))


@dataclass
class SliModel:
    """Trained generator pair; g1 is None on the binary-map (G2prime) path."""

    g1: Generator | None
    g2: Generator


def reconstruct(model: SliModel, source: FeatureMap | BinaryMap):
    """Invert a feature map into an image.

    FeatureMap input runs G1 then G2 and returns (lbp_estimate, image);
    BinaryMap input runs G2prime alone and returns (None, image).
    Discriminators play no role at inference time.
    """
    x = _map_to_tensor(source)
    with ad.no_grad():
        if isinstance(source, FeatureMap):
            if model.g1 is None or model.g2.spec.role != "G2":
                raise InvalidParameterError("FeatureMap input needs G1 and G2")
            lbp_t = model.g1(x)
            img_t = model.g2(ad.concat([x, lbp_t], axis=1))
            lbp = GrayImage(np.clip(lbp_t.data[0, 0], 0.0, 1.0))
        else:
            if model.g2.spec.role != "G2prime":
                raise InvalidParameterError("BinaryMap input needs a G2prime generator")
            img_t = model.g2(x)
            lbp = None
    img = RgbImage(np.clip(np.transpose(img_t.data[0], (1, 2, 0)), 0.0, 1.0))
    return lbp, img

"""Toy dual-head embedding network and its checkpoint format.

A small strided conv stack feeds two parallel fully-connected heads: a
recognition embedding used for verification and margin-softmax training,
and a mask embedding feeding a 2-way mask/no-mask classifier.  All forward
passes run on a Tape so the same code path serves training and inference.
Checkpoints are a text header (format version, config, layer list) followed
by the flat little-endian float32 parameter arrays in header order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, Tensor
from .params import (
    TOY_IN_CHANNELS,
    TOY_INPUT_HW,
    TOY_MASK_DIM,
    TOY_NUM_CLASSES,
    TOY_RECOGNITION_DIM,
    TOY_STAGES,
    toy_flat_dim,
    toy_scale_modules,
)

CHECKPOINT_MAGIC = "focusface-checkpoint v1"
FREEZE_MODES = ("none", "backbone")


@dataclass(frozen=True)
class ToyBackboneConfig:
    """Architecture of the toy model; every field is checkpointed."""

    input_hw: int = TOY_INPUT_HW
    in_channels: int = TOY_IN_CHANNELS
    stages: tuple = TOY_STAGES  # (out_channels, stride) pairs, 3x3 kernels
    recognition_dim: int = TOY_RECOGNITION_DIM
    mask_dim: int = TOY_MASK_DIM
    num_classes: int = TOY_NUM_CLASSES

    def __post_init__(self):
        if self.recognition_dim < 8:
            raise ValueError(f"recognition_dim must be >= 8, got {self.recognition_dim}")
        if self.mask_dim < 2:
            raise ValueError(f"mask_dim must be >= 2, got {self.mask_dim}")
        object.__setattr__(self, "stages", tuple((int(c), int(s)) for c, s in self.stages))
        if self.flat_dim <= 0:
            raise ValueError("conv stack reduces the input to an empty feature map")

    @property
    def flat_dim(self) -> int:
        return toy_flat_dim(self.input_hw, self.stages)


@dataclass
class DualHeadOutput:
    """Both embeddings and the mask logits from one forward pass."""

    recognition_embedding: Tensor  # (batch, recognition_dim)
    mask_embedding: Tensor  # (batch, mask_dim)
    mask_logits: Tensor  # (batch, 2)


def _param_layout(config: ToyBackboneConfig):
    """Ordered (name, shape) pairs; the single source of parameter order."""
    layout = []
    cin = config.in_channels
    for i, (cout, _) in enumerate(config.stages):
        layout += [
            (f"conv{i}.weight", (cout, cin, 3, 3)),
            (f"conv{i}.bias", (cout, 1, 1)),
            (f"conv{i}.slope", ()),
        ]
        cin = cout
    flat = config.flat_dim
    layout += [
        ("recognition.weight", (flat, config.recognition_dim)),
        ("recognition.bias", (config.recognition_dim,)),
        ("mask.weight", (flat, config.mask_dim)),
        ("mask.bias", (config.mask_dim,)),
        ("mask_classifier.weight", (config.mask_dim, 2)),
        ("mask_classifier.bias", (2,)),
        ("arcface.weight", (config.recognition_dim, config.num_classes)),
    ]
    return layout


# init gains over the usual sqrt(2/fan_in), tuned for stability at the fixed
# optimizer settings (lr 0.1, momentum 0.9, margin scale 64) with no batch
# norm in the stack:
#  - conv gain 2 halves the conv gradients (the renormalized feature path is
#    scale-invariant, so grads shrink as 1/gain), keeping early feature drift
#    gentle while the heads absorb the violent first margin-softmax steps
#  - the recognition bias starts at a shared constant, which multiplies the
#    embedding norm several-fold; the margin-softmax gradient falls as
#    1/norm, so the first updates move the head by a modest fraction of its
#    size instead of several times it, while the masked/unmasked embedding
#    difference (what the contrastive term sees) is untouched because a
#    shared bias cancels in the difference
#  - mask head and classifier stay at gain 1 so the 2-way logits start small
#    enough for the mask cross-entropy to be well out of saturation
CONV_INIT_GAIN = 2.0
RECOGNITION_INIT_GAIN = 1.0
RECOGNITION_BIAS_INIT = 4.0


def _init_param(name: str, shape, rng) -> np.ndarray:
    if name.startswith("conv") and name.endswith(".bias"):
        # small constant so an all-zero image still yields nonzero features
        # (the feature renormalization below rejects zero-norm rows)
        return np.full(shape, 0.01)
    if name == "recognition.bias":
        return np.full(shape, RECOGNITION_BIAS_INIT)
    if name.endswith(".bias"):
        return np.zeros(shape)
    if name.endswith(".slope"):
        return np.array(0.25)
    if name == "arcface.weight":
        return rng.normal(0.0, 0.01, size=shape)
    if name.startswith("conv"):
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, CONV_INIT_GAIN * np.sqrt(2.0 / fan_in), size=shape)
    gain = RECOGNITION_INIT_GAIN if name == "recognition.weight" else 1.0
    return rng.normal(0.0, gain * np.sqrt(2.0 / shape[0]), size=shape)


class ToyModel:
    """Trainable toy network; parameters are float64 numpy arrays by name."""

    def __init__(self, config: ToyBackboneConfig, params: dict, frozen: str = "none"):
        self.config = config
        layout = _param_layout(config)
        expected = [name for name, _ in layout]
        if list(params) != expected:
            raise ValueError(f"parameter names {list(params)} do not match layout {expected}")
        for name, shape in layout:
            if params[name].shape != shape:
                raise ShapeError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.frozen = "none"
        self.freeze(frozen)

    @classmethod
    def init(cls, config: ToyBackboneConfig = ToyBackboneConfig(), seed: int = 0) -> "ToyModel":
        params = {}
        for index, (name, shape) in enumerate(_param_layout(config)):
            rng = np.random.default_rng([seed, index])
            params[name] = _init_param(name, shape, rng)
        return cls(config, params)

    # -- freezing ------------------------------------------------------------

    def freeze(self, frozen: str = "backbone") -> "ToyModel":
        if frozen not in FREEZE_MODES:
            raise ValueError(f"frozen must be one of {FREEZE_MODES}, got {frozen!r}")
        self.frozen = frozen
        return self

    def is_trainable(self, name: str) -> bool:
        if self.frozen == "backbone" and name.startswith("conv"):
            return False
        return True

    def trainable_names(self):
        return [n for n in self.params if self.is_trainable(n)]

    def total_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable_count(self) -> int:
        return sum(self.params[n].size for n in self.trainable_names())

    # -- forward -------------------------------------------------------------

    def leaves(self, tape: Tape) -> dict:
        """Materialize every parameter on the tape once per iteration."""
        return {name: tape.leaf(value, trainable=self.is_trainable(name))
                for name, value in self.params.items()}

    def forward(self, tape: Tape, images: np.ndarray, leaves: dict | None = None) -> DualHeadOutput:
        images = np.asarray(images)
        c, hw = self.config.in_channels, self.config.input_hw
        if images.ndim != 4 or images.shape[1:] != (c, hw, hw):
            raise ShapeError(
                f"expected images of shape (batch, {c}, {hw}, {hw}), got {images.shape}")
        if leaves is None:
            leaves = self.leaves(tape)
        x = tape.leaf(images)
        for i, (_, stride) in enumerate(self.config.stages):
            x = tape.conv2d(x, leaves[f"conv{i}.weight"], stride=stride, padding=1)
            x = tape.add(x, leaves[f"conv{i}.bias"])
            x = tape.prelu(x, leaves[f"conv{i}.slope"])
        flat = tape.flatten(x)
        # renormalize features to norm sqrt(dim): head inputs stay scale-stable
        # no matter how far SGD drifts the conv weights, so the margin-softmax
        # and the raw-embedding MSE both see bounded magnitudes
        feats = tape.scale(tape.l2_normalize(flat),
                           float(np.sqrt(self.config.flat_dim)))
        recognition = tape.add(tape.matmul(feats, leaves["recognition.weight"]),
                               leaves["recognition.bias"])
        mask_embedding = tape.add(tape.matmul(feats, leaves["mask.weight"]),
                                  leaves["mask.bias"])
        mask_logits = tape.add(tape.matmul(mask_embedding, leaves["mask_classifier.weight"]),
                               leaves["mask_classifier.bias"])
        return DualHeadOutput(recognition, mask_embedding, mask_logits)

    def clone(self) -> "ToyModel":
        return ToyModel(self.config,
                        {k: v.copy() for k, v in self.params.items()},
                        frozen=self.frozen)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def embed_images(model: ToyModel, images: np.ndarray, threads: int = 1,
                 batch_size: int = 64):
    """Recognition embeddings and masked-class probabilities for a stack of images.

    Chunks are independent forward passes over read-only parameters, so any
    thread count produces identical results written by chunk index.
    """
    images = np.asarray(images)
    n = images.shape[0]
    embeddings = np.zeros((n, model.config.recognition_dim))
    mask_probs = np.zeros(n)

    def run_chunk(start):
        stop = min(start + batch_size, n)
        out = model.forward(Tape(), images[start:stop])
        emb = out.recognition_embedding.data
        emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        embeddings[start:stop] = emb
        mask_probs[start:stop] = _softmax_rows(out.mask_logits.data)[:, 1]

    starts = range(0, n, batch_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_chunk, starts))
    else:
        for start in starts:
            run_chunk(start)
    return embeddings, mask_probs


def descriptor_modules(config: ToyBackboneConfig) -> dict:
    """Shape-only descriptor table matching this live architecture."""
    return toy_scale_modules(num_classes=config.num_classes,
                             input_hw=config.input_hw,
                             in_channels=config.in_channels,
                             stages=config.stages,
                             recognition_dim=config.recognition_dim,
                             mask_dim=config.mask_dim)


# -- checkpoint io -----------------------------------------------------------

def save_checkpoint(model: ToyModel, path: str, seed: int = 0) -> None:
    """Text header then flat little-endian float32 arrays in header order."""
    config = model.config
    lines = [CHECKPOINT_MAGIC]
    lines.append(f"seed = {seed}")
    lines.append(f"input_hw = {config.input_hw}")
    lines.append(f"in_channels = {config.in_channels}")
    lines.append("stages = " + ",".join(f"{c}:{s}" for c, s in config.stages))
    lines.append(f"recognition_dim = {config.recognition_dim}")
    lines.append(f"mask_dim = {config.mask_dim}")
    lines.append(f"num_classes = {config.num_classes}")
    lines.append(f"frozen = {model.frozen}")
    for name, value in model.params.items():
        dims = " ".join(str(d) for d in value.shape) if value.ndim else "scalar"
        lines.append(f"param {name} {dims}")
    lines.append("end-header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    blobs = [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in model.params.values()]
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ToyModel, int]:
    """Rebuild the model from a checkpoint; returns (model, recorded seed)."""
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end-header\n")
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path} is not a recognized checkpoint file")
    header = raw[:end].decode("ascii").splitlines()[1:]
    body = raw[end + len(b"end-header\n"):]

    fields = {}
    order = []
    for line in header:
        if line.startswith("param "):
            _, name, *dims = line.split()
            shape = () if dims == ["scalar"] else tuple(int(d) for d in dims)
            order.append((name, shape))
        elif " = " in line:
            key, value = line.split(" = ", 1)
            fields[key] = value
    config = ToyBackboneConfig(
        input_hw=int(fields["input_hw"]),
        in_channels=int(fields["in_channels"]),
        stages=tuple(tuple(int(x) for x in part.split(":"))
                     for part in fields["stages"].split(",")),
        recognition_dim=int(fields["recognition_dim"]),
        mask_dim=int(fields["mask_dim"]),
        num_classes=int(fields["num_classes"]),
    )
    params = {}
    offset = 0
    for name, shape in order:
        size = int(np.prod(shape)) if shape else 1
        chunk = np.frombuffer(body, dtype="<f4", count=size, offset=offset)
        params[name] = chunk.reshape(shape).astype(np.float64)
        offset += size * 4
    if offset != len(body):
        raise ValueError(f"{path} has {len(body)} payload bytes, expected {offset}")
    model = ToyModel(config, params, frozen=fields.get("frozen", "none"))
    return model, int(fields.get("seed", 0))

"""Network definitions, deterministic initialization, and checkpoints.

Five parameter groups: online encoder / projector / predictor, target
encoder / projector (shape-identical twins of the online pair), plus an
optional classifier head attached for fine-tuning. The encoder is a
small conv stack (3x3 kernels, bias, relu, stride per stage) ending in
global average pooling; a deeper stack can be swapped in through
:class:`EncoderSpec`. All MLPs are linear -> relu -> linear.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .rng import SplitMix64, substream
from . import tensor as T

KERNEL_SIZE = 3
CONV_PAD = 1

CHECKPOINT_MAGIC = b"BKEC"
CHECKPOINT_VERSION = 1

Params = dict[str, np.ndarray]


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    """Conv stack: (out_channels, stride) per stage, then global avg pool."""

    input_side: int = 16
    conv_stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))

    @property
    def feature_dim(self) -> int:
        return self.conv_stages[-1][0]

    def validate(self) -> None:
        if self.input_side < 8:
            raise ValueError(f"input_side must be >= 8, got {self.input_side}")
        if not self.conv_stages:
            raise ValueError("conv_stages must be nonempty")
        for ch, stride in self.conv_stages:
            if ch < 1:
                raise ValueError(f"invalid channel count {ch}")
            if stride not in (1, 2):
                raise ValueError(f"stride must be 1 or 2, got {stride}")


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden_dim: int
    out_dim: int

    def validate(self) -> None:
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError(f"all MLP dims must be >= 1, got {self}")


@dataclass
class BundleSpecs:
    encoder: EncoderSpec
    projector: MlpSpec
    predictor: MlpSpec
    classifier: MlpSpec | None = None

    @staticmethod
    def default(input_side: int = 16) -> "BundleSpecs":
        enc = EncoderSpec(input_side=input_side)
        d = enc.feature_dim
        return BundleSpecs(
            encoder=enc,
            projector=MlpSpec(d, 128, 32),
            predictor=MlpSpec(32, 32, 32),
        )

    def validate(self) -> None:
        self.encoder.validate()
        self.projector.validate()
        self.predictor.validate()
        if self.projector.in_dim != self.encoder.feature_dim:
            raise ValueError("projector in_dim must equal encoder feature_dim")
        if self.predictor.in_dim != self.projector.out_dim:
            raise ValueError("predictor in_dim must equal projector out_dim")
        if self.classifier is not None:
            self.classifier.validate()
            if self.classifier.in_dim != self.encoder.feature_dim:
                raise ValueError("classifier in_dim must equal encoder feature_dim")


@dataclass
class ModelBundle:
    """All parameter groups plus the specs and seed that produced them."""

    specs: BundleSpecs
    init_seed: int
    online_encoder: Params
    online_projector: Params
    predictor: Params
    target_encoder: Params
    target_projector: Params
    classifier: Params | None = None


def _uniform_array(rng: SplitMix64, bound: float, shape: tuple[int, ...]) -> np.ndarray:
    flat = np.empty(int(np.prod(shape)))
    for i in range(flat.size):
        flat[i] = rng.uniform(-bound, bound)
    return flat.reshape(shape)


def _init_mlp(spec: MlpSpec, rng: SplitMix64) -> Params:
    # fan-in uniform bound sqrt(1/fan_in), applied to weights and biases alike
    b1 = math.sqrt(1.0 / spec.in_dim)
    b2 = math.sqrt(1.0 / spec.hidden_dim)
    return {
        "fc1.w": _uniform_array(rng, b1, (spec.in_dim, spec.hidden_dim)),
        "fc1.b": _uniform_array(rng, b1, (spec.hidden_dim,)),
        "fc2.w": _uniform_array(rng, b2, (spec.hidden_dim, spec.out_dim)),
        "fc2.b": _uniform_array(rng, b2, (spec.out_dim,)),
    }


def _init_encoder(spec: EncoderSpec, rng: SplitMix64) -> Params:
    params: Params = {}
    in_ch = 1
    for i, (out_ch, _stride) in enumerate(spec.conv_stages):
        fan_in = in_ch * KERNEL_SIZE * KERNEL_SIZE
        bound = math.sqrt(1.0 / fan_in)
        params[f"stage{i}.w"] = _uniform_array(rng, bound, (out_ch, in_ch, KERNEL_SIZE, KERNEL_SIZE))
        params[f"stage{i}.b"] = _uniform_array(rng, bound, (out_ch,))
        in_ch = out_ch
    return params


def _copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def init_bundle(specs: BundleSpecs, seed: int) -> ModelBundle:
    """Deterministic init; the target side starts as an exact copy of the
    online side."""
    specs.validate()
    online_encoder = _init_encoder(specs.encoder, substream(seed, "init", "encoder"))
    online_projector = _init_mlp(specs.projector, substream(seed, "init", "projector"))
    predictor = _init_mlp(specs.predictor, substream(seed, "init", "predictor"))
    bundle = ModelBundle(
        specs=specs,
        init_seed=seed,
        online_encoder=online_encoder,
        online_projector=online_projector,
        predictor=predictor,
        target_encoder=_copy_params(online_encoder),
        target_projector=_copy_params(online_projector),
    )
    if specs.classifier is not None:
        bundle.classifier = _init_mlp(specs.classifier, substream(seed, "init", "classifier"))
    return bundle


def attach_classifier(bundle: ModelBundle, n_classes: int, seed: int | None = None,
                      hidden_dim: int = 64) -> None:
    """Attach a freshly initialized classifier head (in place).

    The head is seeded independently of the rest of the bundle so a
    fine-tuning run can vary it without touching the pretrained weights.
    """
    if n_classes < 2:
        raise ValueError("classifier needs at least 2 classes")
    spec = MlpSpec(bundle.specs.encoder.feature_dim, hidden_dim, n_classes)
    spec.validate()
    head_seed = bundle.init_seed if seed is None else seed
    bundle.specs = replace(bundle.specs, classifier=spec)
    bundle.classifier = _init_mlp(spec, substream(head_seed, "init", "classifier"))


def encode(params: Mapping, spec: EncoderSpec, images) -> T.Tensor:
    """Conv stack + global average pool -> (N, feature_dim) features."""
    x = images if isinstance(images, T.Tensor) else T.Tensor(images)
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise ValueError(f"encode: expected (N, 1, H, W) images, got shape {x.shape}")
    if x.data.shape[2] != x.data.shape[3]:
        raise ValueError(f"encode: images must be square, got shape {x.shape}")
    for i, (_out_ch, stride) in enumerate(spec.conv_stages):
        x = T.conv2d(x, params[f"stage{i}.w"], params[f"stage{i}.b"], stride=stride, pad=CONV_PAD)
        x = T.relu(x)
    return T.global_avg_pool(x)


def mlp_forward(params: Mapping, x) -> T.Tensor:
    """linear -> relu -> linear."""
    h = T.relu(T.add(T.matmul(x, params["fc1.w"]), params["fc1.b"]))
    return T.add(T.matmul(h, params["fc2.w"]), params["fc2.b"])


def project(params: Mapping, features) -> T.Tensor:
    return mlp_forward(params, features)


def predict(params: Mapping, projections) -> T.Tensor:
    return mlp_forward(params, projections)


def classify(params: Mapping, features) -> T.Tensor:
    """Class logits (pre-softmax)."""
    return mlp_forward(params, features)


# --- checkpoint IO ----------------------------------------------------------
#
# Layout: magic "BKEC", u32 version, u32 tensor count, then per tensor
# { u16 name length, name bytes (UTF-8), u8 rank, u32 dims..., payload of
# little-endian f64 }, then a trailing u64 holding the byte count of
# everything before it. Specs and seed travel as "meta/*" tensors so one
# file round-trips the whole bundle bit-exactly.

_GROUP_ORDER = (
    "online_encoder",
    "online_projector",
    "predictor",
    "target_encoder",
    "target_projector",
    "classifier",
)


def _meta_records(bundle: ModelBundle) -> list[tuple[str, np.ndarray]]:
    specs = bundle.specs
    seed = bundle.init_seed & (1 << 64) - 1
    records = [
        ("meta/init_seed", np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.float64)),
        ("meta/input_side", np.array([specs.encoder.input_side], dtype=np.float64)),
        ("meta/conv_channels", np.array([c for c, _ in specs.encoder.conv_stages], dtype=np.float64)),
        ("meta/conv_strides", np.array([s for _, s in specs.encoder.conv_stages], dtype=np.float64)),
        ("meta/projector_dims", np.array(
            [specs.projector.in_dim, specs.projector.hidden_dim, specs.projector.out_dim],
            dtype=np.float64)),
        ("meta/predictor_dims", np.array(
            [specs.predictor.in_dim, specs.predictor.hidden_dim, specs.predictor.out_dim],
            dtype=np.float64)),
    ]
    if specs.classifier is not None:
        records.append(("meta/classifier_dims", np.array(
            [specs.classifier.in_dim, specs.classifier.hidden_dim, specs.classifier.out_dim],
            dtype=np.float64)))
    return records


def save_checkpoint(bundle: ModelBundle, path) -> None:
    records = _meta_records(bundle)
    for group in _GROUP_ORDER:
        params = getattr(bundle, group)
        if params is None:
            continue
        for name in sorted(params):
            records.append((f"{group}/{name}", params[name]))

    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<I", CHECKPOINT_VERSION)
    payload += struct.pack("<I", len(records))
    for name, arr in records:
        name_bytes = name.encode("utf-8")
        payload += struct.pack("<H", len(name_bytes))
        payload += name_bytes
        payload += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            payload += struct.pack("<I", dim)
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    payload += struct.pack("<Q", len(payload))
    with open(path, "wb") as fh:
        fh.write(payload)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("payload length mismatch: truncated checkpoint")
    return buf


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        consumed = 12
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            n_bytes = 8 * int(np.prod(dims)) if rank else 8
            data = np.frombuffer(_read_exact(fh, n_bytes), dtype="<f8").reshape(dims)
            tensors[name] = data.astype(np.float64)
            consumed += 2 + name_len + 1 + 4 * rank + n_bytes
        (declared,) = struct.unpack("<Q", _read_exact(fh, 8))
        if declared != consumed:
            raise CheckpointError(
                f"payload length mismatch: trailer says {declared}, read {consumed}"
            )
        if fh.read(1):
            raise CheckpointError("payload length mismatch: trailing bytes after checksum")

    def meta(name: str) -> np.ndarray:
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing {name}")
        return tensors.pop(name)

    seed_parts = meta("meta/init_seed")
    init_seed = int(seed_parts[0]) | (int(seed_parts[1]) << 32)
    input_side = int(meta("meta/input_side")[0])
    channels = [int(c) for c in meta("meta/conv_channels")]
    strides = [int(s) for s in meta("meta/conv_strides")]
    proj = [int(d) for d in meta("meta/projector_dims")]
    pred = [int(d) for d in meta("meta/predictor_dims")]
    specs = BundleSpecs(
        encoder=EncoderSpec(input_side=input_side, conv_stages=tuple(zip(channels, strides))),
        projector=MlpSpec(*proj),
        predictor=MlpSpec(*pred),
    )
    if "meta/classifier_dims" in tensors:
        specs.classifier = MlpSpec(*[int(d) for d in meta("meta/classifier_dims")])
    specs.validate()

    groups: dict[str, Params] = {g: {} for g in _GROUP_ORDER}
    for full_name, arr in tensors.items():
        group, _, pname = full_name.partition("/")
        if group not in groups or not pname:
            raise CheckpointError(f"unexpected tensor {full_name!r} in checkpoint")
        groups[group][pname] = arr
    if specs.classifier is None and groups["classifier"]:
        raise CheckpointError("classifier tensors present but no classifier spec")
    return ModelBundle(
        specs=specs,
        init_seed=init_seed,
        online_encoder=groups["online_encoder"],
        online_projector=groups["online_projector"],
        predictor=groups["predictor"],
        target_encoder=groups["target_encoder"],
        target_projector=groups["target_projector"],
        classifier=groups["classifier"] or None,
    )

"""The attention-MIL network.

A bag of ``m`` patches goes through a LeNet-style extractor
(conv 5×5 → relu → pool 2 → conv 5×5 → relu → pool 2 → fc → relu) to an
``m×L`` instance matrix ``H``.  Instances are pooled into one bag vector ``z``
by learned attention, max or mean, and a linear head plus sigmoid gives the
bag probability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, GeometryError
from .tensor import Tensor

POOLING_MODES = ("attention", "max", "mean")

KERNEL = 5
POOL = 2


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def extractor_geometry(patch_size: int, conv1: int = 20, conv2: int = 50) -> list[tuple[int, ...]]:
    """Shapes after each extractor stage for a square RGB patch."""
    shapes = [(3, patch_size, patch_size)]
    s = patch_size
    for channels in (conv1, conv2):
        s = s - KERNEL + 1
        if s < 1:
            raise GeometryError(f"patch size {patch_size} is too small for the feature extractor")
        shapes.append((channels, s, s))
        if s % POOL:
            raise GeometryError(f"patch size {patch_size}: {s}×{s} feature map is not divisible by {POOL}")
        s //= POOL
        shapes.append((channels, s, s))
    shapes.append((conv2 * s * s,))
    return shapes


@dataclass
class FeatureExtractorParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    fc_w: Tensor
    fc_b: Tensor

    @classmethod
    def init(cls, rng, patch_size=28, conv1=20, conv2=50, features=500, dtype=np.float32):
        flat = extractor_geometry(patch_size, conv1, conv2)[-1][0]
        k2 = KERNEL * KERNEL
        return cls(
            conv1_w=_glorot(rng, (conv1, 3, KERNEL, KERNEL), 3 * k2, conv1 * k2, dtype),
            conv1_b=_zeros((conv1,), dtype),
            conv2_w=_glorot(rng, (conv2, conv1, KERNEL, KERNEL), conv1 * k2, conv2 * k2, dtype),
            conv2_b=_zeros((conv2,), dtype),
            fc_w=_glorot(rng, (features, flat), flat, features, dtype),
            fc_b=_zeros((features,), dtype),
        )


@dataclass
class AttentionParams:
    """``V`` is hidden×features, ``w`` is hidden×1."""

    V: Tensor
    w: Tensor

    def __post_init__(self):
        if self.V.data.ndim != 2 or self.w.shape != (self.V.shape[0], 1):
            raise DimensionError(f"attention parameters disagree: V {self.V.shape}, w {self.w.shape}")

    @classmethod
    def init(cls, rng, features=500, hidden=128, dtype=np.float32):
        return cls(
            V=_glorot(rng, (hidden, features), features, hidden, dtype),
            w=_glorot(rng, (hidden, 1), hidden, 1, dtype),
        )


@dataclass
class ClassifierParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, features=500, dtype=np.float32):
        return cls(weight=_glorot(rng, (1, features), features, 1, dtype), bias=_zeros((1,), dtype))


@dataclass
class AttentionOutput:
    weights: Tensor
    bag_feature: Tensor


@dataclass
class AmilModel:
    extractor: FeatureExtractorParams
    attention: AttentionParams
    head: ClassifierParams
    pooling_mode: str = "attention"
    patch_size: int = 28

    def __post_init__(self):
        if self.pooling_mode not in POOLING_MODES:
            raise ContractError(f"unknown pooling mode {self.pooling_mode!r}; expected one of {POOLING_MODES}")

    @classmethod
    def init(
        cls,
        seed: int | np.random.Generator = 0,
        pooling_mode: str = "attention",
        patch_size: int = 28,
        hidden: int = 128,
        features: int = 500,
        conv1: int = 20,
        conv2: int = 50,
        dtype=np.float32,
    ) -> "AmilModel":
        """Glorot-uniform weights and zero biases from a seeded generator."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(
            extractor=FeatureExtractorParams.init(rng, patch_size, conv1, conv2, features, dtype),
            attention=AttentionParams.init(rng, features, hidden, dtype),
            head=ClassifierParams.init(rng, features, dtype),
            pooling_mode=pooling_mode,
            patch_size=patch_size,
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for group_name in ("extractor", "attention", "head"):
            group = getattr(self, group_name)
            for name in group.__dataclass_fields__:
                yield f"{group_name}.{name}", getattr(group, name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def copy(self, dtype=None) -> "AmilModel":
        clone = AmilModel.__new__(AmilModel)
        clone.pooling_mode = self.pooling_mode
        clone.patch_size = self.patch_size
        for group_name in ("extractor", "attention", "head"):
            group = getattr(self, group_name)
            fields = {n: Tensor(getattr(group, n).data, requires_grad=True, dtype=dtype) for n in group.__dataclass_fields__}
            setattr(clone, group_name, type(group)(**fields))
        return clone

    @property
    def dtype(self):
        return self.head.weight.dtype

    @property
    def hidden_size(self) -> int:
        return self.attention.V.shape[0]

    def config(self) -> dict[str, object]:
        e = self.extractor
        return {
            "pooling_mode": self.pooling_mode,
            "patch_size": self.patch_size,
            "hidden": self.hidden_size,
            "features": e.fc_w.shape[0],
            "conv1": e.conv1_w.shape[0],
            "conv2": e.conv2_w.shape[0],
        }


def _as_patch_batch(patches, patch_size: int, dtype) -> Tensor:
    if isinstance(patches, Tensor):
        x = patches
    else:
        arrs = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in patches]
        if not arrs:
            raise ContractError("empty bag")
        x = Tensor(np.stack(arrs).astype(dtype, copy=False))
    if x.data.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1:] != (3, patch_size, patch_size):
        raise GeometryError(f"patch shape {x.shape[1:]} does not match 3×{patch_size}×{patch_size}")
    return x


def extract_features(patches, params: FeatureExtractorParams, patch_size: int = 28) -> Tensor:
    """Instance embeddings for one patch (``3×s×s`` → ``L``) or a stack (``m×3×s×s`` → ``m×L``)."""
    if isinstance(patches, (list, tuple)):
        patches = _as_patch_batch(patches, patch_size, params.fc_w.dtype)
    elif not isinstance(patches, Tensor):
        patches = Tensor(np.asarray(patches, dtype=params.fc_w.dtype))
    single = patches.data.ndim == 3
    x = _as_patch_batch(patches, patch_size, params.fc_w.dtype)
    x = T.maxpool2d(T.relu(T.conv2d(x, params.conv1_w, params.conv1_b)), POOL)
    x = T.maxpool2d(T.relu(T.conv2d(x, params.conv2_w, params.conv2_b)), POOL)
    x = T.reshape(x, (x.shape[0], -1))
    h = T.relu(T.add(T.matmul(x, T.transpose(params.fc_w)), params.fc_b))
    return T.reshape(h, (h.shape[1],)) if single else h


def attention_logits(H: Tensor, params: AttentionParams) -> Tensor:
    """Unnormalized scores ``w^T tanh(V h_p^T)``, one per instance."""
    if H.data.ndim != 2 or H.shape[1] != params.V.shape[1]:
        raise DimensionError(f"instance matrix {H.shape} does not match V {params.V.shape}")
    s = T.matmul(T.tanh(T.matmul(H, T.transpose(params.V))), params.w)
    return T.reshape(s, (H.shape[0],))


def attention_weights(H: Tensor, params: AttentionParams) -> Tensor:
    if H.shape[0] < 1:
        raise ContractError("attention over an empty bag")
    return T.softmax(attention_logits(H, params))


def aggregate(H: Tensor, a: Tensor) -> Tensor:
    """Weighted sum ``z = sum_p a_p h_p``."""
    if a.data.ndim != 1 or H.data.ndim != 2 or a.shape[0] != H.shape[0]:
        raise DimensionError(f"weights {a.shape} do not match instances {H.shape}")
    z = T.matmul(T.reshape(a, (1, a.shape[0])), H)
    return T.reshape(z, (H.shape[1],))


def pool_max(H: Tensor) -> Tensor:
    if H.shape[0] < 1:
        raise ContractError("pooling over an empty bag")
    return T.reduce_max(H, axis=0)


def pool_mean(H: Tensor) -> Tensor:
    """Mean over instances, computed as aggregation with uniform weights ``1/m``."""
    m = H.shape[0]
    if m < 1:
        raise ContractError("pooling over an empty bag")
    return aggregate(H, Tensor(np.full(m, 1.0 / m, dtype=H.dtype)))


def head_logit(z: Tensor, params: ClassifierParams) -> Tensor:
    return T.add(T.matmul(T.reshape(z, (1, z.shape[0])), T.transpose(params.weight)), params.bias)


def forward_bag(bag, model: AmilModel) -> tuple[Tensor, AttentionOutput | None]:
    """Bag probability and, in attention mode, the attention output.

    ``bag`` may be a :class:`amil.bags.Bag`, a list of patch arrays, or an
    ``m×3×s×s`` tensor.
    """
    patches = getattr(bag, "patches", bag)
    if isinstance(patches, np.ndarray):
        patches = Tensor(patches.astype(model.dtype, copy=False))
    if not isinstance(patches, Tensor) and len(patches) == 0:
        raise ContractError("empty bag")
    H = extract_features(_as_patch_batch(patches, model.patch_size, model.dtype), model.extractor, model.patch_size)
    att = None
    if model.pooling_mode == "attention":
        a = attention_weights(H, model.attention)
        z = aggregate(H, a)
        att = AttentionOutput(weights=a, bag_feature=z)
    elif model.pooling_mode == "max":
        z = pool_max(H)
    else:
        z = pool_mean(H)
    prob = T.reshape(T.sigmoid(head_logit(z, model.head)), ())
    return prob, att


def instance_scores(bag, model: AmilModel) -> np.ndarray:
    """Head logit of each instance on its own, ``head(h_p)``."""
    patches = getattr(bag, "patches", bag)
    H = extract_features(_as_patch_batch(patches, model.patch_size, model.dtype), model.extractor, model.patch_size)
    return (H.data @ model.head.weight.data.T + model.head.bias.data).reshape(-1)


def bag_label(instance_labels: Sequence[int]) -> int:
    """1 when any instance is positive, else 0."""
    labels = list(instance_labels)
    if not labels:
        raise ContractError("bag_label needs at least one instance label")
    for y in labels:
        if y not in (0, 1):
            raise ContractError(f"instance labels must be 0 or 1, got {y!r}")
    return 0 if sum(labels) == 0 else 1

"""Slice-set model: slice a volume, embed slices, add positional encodings,
aggregate permutation-invariantly, predict.

The model computes, for a volume cut into K slices ``x_k`` along a chosen
anatomical axis, the per-slice embeddings ``r(x_k)`` with one shared 2D
encoder, optionally adds a trainable per-position vector ``p_k``, fuses the
K rows with a mean or attention aggregator, and applies a linear head.

With the positional table disabled (or all-zero) both aggregators are
permutation-invariant in the slice order; the mean aggregator additionally
fixes its summation order by row content, making its output bit-identical
under slice permutations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import Volume
from .encoders import EncoderConfig, build_encoder
from .nn import LayerNorm, Linear, Module, relu, softmax
from .tensor import Tensor

AXES = ("sagittal", "coronal", "axial")
TASKS = ("regression", "classification")


def axis_index(axis: str) -> int:
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; choose from {AXES}")
    return AXES.index(axis)


@dataclass
class SliceStack:
    """K slices of a volume as a (K, C, H, W) array plus provenance."""

    axis: str
    data: np.ndarray
    source_extents: tuple[int, int, int]

    @property
    def slice_count(self) -> int:
        return self.data.shape[0]


def slice_volume(volume: Volume, axis: str, input_channels: int = 1) -> SliceStack:
    """Cut a volume into K planes orthogonal to ``axis``.

    K equals the volume extent along the axis; each slice keeps the two
    remaining extents in canonical order.  The single voxel channel is
    replicated to ``input_channels``.
    """
    i = axis_index(axis)
    planes = np.moveaxis(volume.voxels, i, 0).astype(np.float32)
    stacked = np.repeat(planes[:, None, :, :], input_channels, axis=1)
    return SliceStack(axis=axis, data=np.ascontiguousarray(stacked), source_extents=volume.extents)


def restack_volume(stack: SliceStack) -> np.ndarray:
    """Inverse of :func:`slice_volume` (first channel), bit-exact."""
    return np.ascontiguousarray(np.moveaxis(stack.data[:, 0], 0, axis_index(stack.axis)))


def permute_volume(volume: Volume, axis: str, permutation: np.ndarray) -> Volume:
    """Reorder the slices of a volume along ``axis``."""
    i = axis_index(axis)
    vox = np.take(volume.voxels, permutation, axis=i)
    return Volume(voxels=vox, subject_id=volume.subject_id, target=volume.target)


class PositionalTable(Module):
    """Trainable K x d table of per-position vectors added to slice embeddings.

    Zero initialization makes an enabled table exactly equivalent to a
    disabled one until training moves it.
    """

    def __init__(self, slice_count: int, dim: int, enabled: bool = True):
        super().__init__()
        self.enabled = enabled
        self.table = Tensor(np.zeros((slice_count, dim)), requires_grad=True)

    def __call__(self, embeddings: Tensor) -> Tensor:
        if not self.enabled:
            return embeddings
        if embeddings.shape != self.table.shape:
            raise ValueError(
                f"positional table shape {self.table.shape} does not match embeddings {embeddings.shape}"
            )
        return embeddings + self.table


def aggregate_mean(embeddings: Tensor) -> Tensor:
    """Arithmetic mean over the K embedding rows.

    Contributions are summed in row-content lexicographic order with 64-bit
    accumulation, so any permutation of the rows produces a bit-identical
    result.
    """
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise ValueError(f"aggregate_mean expects a nonempty (K, d) matrix, got {embeddings.shape}")
    k = embeddings.shape[0]
    order = np.lexsort(embeddings.data.T[::-1])
    data = (embeddings.data[order].sum(axis=0, dtype=np.float64) / k).astype(embeddings.dtype)

    def backward_fn(out):
        if embeddings.requires_grad:
            embeddings.accumulate_grad(np.broadcast_to(out.grad / k, embeddings.shape))

    return embeddings._make(data, (embeddings,), backward_fn)


class MeanAggregator(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.output_dim = dim

    def __call__(self, embeddings: Tensor) -> Tensor:
        return aggregate_mean(embeddings)


class AttentionAggregator(Module):
    """Self-attention over slice embeddings, then mean pool, feed-forward, layer norm.

    Single-head scaled dot-product attention where queries, keys and values
    are the rows after one learned projection to ``model_dim``.
    """

    def __init__(self, dim: int, model_dim: int | None = None, ff_hidden_dim: int | None = None):
        super().__init__()
        m = model_dim or dim
        ff = ff_hidden_dim or 4 * m
        self.proj = Linear(dim, m)
        self.ff1 = Linear(m, ff)
        self.ff2 = Linear(ff, m)
        self.norm = LayerNorm(m)
        self.output_dim = m
        self.scale = 1.0 / float(np.sqrt(m))

    def attention_weights(self, embeddings: Tensor) -> np.ndarray:
        """The K x K row-stochastic attention matrix (diagnostic path)."""
        z = self.proj(embeddings)
        scores = (z @ z.transpose()) * self.scale
        return softmax(scores, axis=-1).data

    def __call__(self, embeddings: Tensor) -> Tensor:
        z = self.proj(embeddings)                      # (K, m)
        scores = (z @ z.transpose()) * self.scale      # (K, K)
        attn = softmax(scores, axis=-1)
        attended = attn @ z                            # (K, m)
        pooled = attended.mean(axis=0).reshape(1, -1)  # (1, m)
        h = self.ff2(relu(self.ff1(pooled)))
        return self.norm(h).reshape(-1)


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "mean"
    model_dim: int | None = None
    ff_hidden_dim: int | None = None

    def __post_init__(self):
        if self.kind not in ("mean", "attention"):
            raise ValueError(f"unknown aggregator kind {self.kind!r}; choose 'mean' or 'attention'")


@dataclass(frozen=True)
class ModelConfig:
    task: str = "regression"
    axis: str = "sagittal"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    positional_enabled: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        axis_index(self.axis)

    @property
    def output_dim(self) -> int:
        return 1 if self.task == "regression" else 2


class SliceSetModel(Module):
    """Shared 2D encoder + positional table + aggregator + linear head.

    One encoder parameter set is shared by all K slices; only the K x d
    positional table depends on the slice count.
    """

    def __init__(self, config: ModelConfig, slice_count: int):
        super().__init__()
        self.config = config
        self.slice_count = slice_count
        self.encoder = build_encoder(config.encoder)
        d = self.encoder.embedding_dim
        self.positional = PositionalTable(slice_count, d, enabled=config.positional_enabled)
        if config.aggregator.kind == "mean":
            self.aggregator = MeanAggregator(d)
        else:
            self.aggregator = AttentionAggregator(
                d, config.aggregator.model_dim, config.aggregator.ff_hidden_dim
            )
        self.head = Linear(self.aggregator.output_dim, config.output_dim)

    # -- forward ---------------------------------------------------------

    def embed_stack(self, stack: SliceStack) -> Tensor:
        """Per-slice embeddings r(x_k) as a (K, d) tensor."""
        return self.encoder(Tensor(stack.data))

    def forward_stack(self, stack: SliceStack) -> Tensor:
        if stack.slice_count != self.slice_count:
            raise ValueError(
                f"model was built for {self.slice_count} slices, volume yields {stack.slice_count}"
            )
        emb = self.embed_stack(stack)
        emb = self.positional(emb)
        agg = self.aggregator(emb)
        out = self.head(agg.reshape(1, -1))
        if self.config.task == "regression":
            return out.reshape(())
        return out.reshape(-1)

    def forward_volume(self, volume: Volume) -> Tensor:
        stack = slice_volume(volume, self.config.axis, self.config.encoder.input_channels)
        return self.forward_stack(stack)

    __call__ = forward_volume


def build_model(config: ModelConfig, slice_count: int) -> SliceSetModel:
    return SliceSetModel(config, slice_count)


def slice_count_for(extents: tuple[int, int, int], axis: str) -> int:
    return extents[axis_index(axis)]


# ---------------------------------------------------------------------------
# config (de)serialization
# ---------------------------------------------------------------------------

def build_dataclass(cls, mapping: dict, context: str):
    """Construct a dataclass from a mapping, rejecting unknown keys by name."""
    if not isinstance(mapping, dict):
        raise ValueError(f"{context} must be a JSON object, got {type(mapping).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ValueError(f"unknown key(s) in {context}: {unknown}")
    return cls(**mapping)


def model_config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def model_config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    kwargs = {}
    if "encoder" in data:
        kwargs["encoder"] = build_dataclass(EncoderConfig, data.pop("encoder"), "encoder")
    if "aggregator" in data:
        kwargs["aggregator"] = build_dataclass(AggregatorConfig, data.pop("aggregator"),
                                               "aggregator")
    base = build_dataclass(ModelConfig, data, "model config")
    return replace(base, **kwargs) if kwargs else base

"""Named-tensor weight archives, full/partial imports, and 2D pretraining.

The archive container is deliberately simple and auditable: an 8-byte magic,
an 8-byte little-endian index size, a canonical JSON index mapping tensor
names to {shape, offset, length} plus a string→string metadata map, then the
raw little-endian float32 payloads concatenated in sorted-name order.  The
same bytes always come back out: serialization is bit-exact.

Partial import (``import_encoder``) carries a pretrained 2D encoder into a
slice-set model by name, skipping whatever else the archive holds (e.g. a
pretraining classification head) and reporting exactly which model tensors
were matched, which archive entries were skipped, and which model tensors
keep their fresh initialization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .encoders import EncoderConfig, build_encoder
from .model import SliceSetModel
from .tensor import Tensor, no_grad

MAGIC = b"SSNWGT01"
FORMAT_VERSION = 1


class WeightArchiveError(ValueError):
    """Raised for malformed archive bytes or import mismatches."""


@dataclass
class WeightArchive:
    """Immutable-by-convention map of tensor name → float32 array."""

    entries: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.entries = {str(k): np.ascontiguousarray(v, dtype=np.float32)
                        for k, v in self.entries.items()}
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise WeightArchiveError(f"metadata must map str to str, got {k!r}: {v!r}")

    def names(self) -> list[str]:
        return sorted(self.entries)

    def __contains__(self, name) -> bool:
        return name in self.entries

    def __getitem__(self, name) -> np.ndarray:
        return self.entries[name]

    def to_bytes(self) -> bytes:
        names = self.names()
        index_entries = {}
        payloads = []
        offset = 0
        for name in names:
            arr = np.ascontiguousarray(self.entries[name], dtype="<f4")
            raw = arr.tobytes()
            index_entries[name] = {"shape": list(arr.shape), "offset": offset,
                                   "length": len(raw)}
            payloads.append(raw)
            offset += len(raw)
        index = {"version": self.version, "entries": index_entries,
                 "metadata": dict(sorted(self.metadata.items()))}
        index_bytes = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<Q", len(index_bytes)) + index_bytes + b"".join(payloads)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WeightArchive":
        if raw[:8] != MAGIC:
            raise WeightArchiveError(f"bad magic {raw[:8]!r}; not a weight archive")
        if len(raw) < 16:
            raise WeightArchiveError("archive truncated before index length")
        (index_len,) = struct.unpack("<Q", raw[8:16])
        if len(raw) < 16 + index_len:
            raise WeightArchiveError("archive truncated inside index")
        try:
            index = json.loads(raw[16:16 + index_len].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WeightArchiveError(f"archive index is not valid JSON: {exc}") from exc
        version = index.get("version")
        if version != FORMAT_VERSION:
            raise WeightArchiveError(f"unsupported archive version {version!r}")
        payload = raw[16 + index_len:]
        entries = {}
        for name, meta in index.get("entries", {}).items():
            shape = tuple(int(s) for s in meta["shape"])
            offset, length = int(meta["offset"]), int(meta["length"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if length != 4 * count:
                raise WeightArchiveError(
                    f"entry {name!r}: length {length} != 4 x product{shape}")
            if offset < 0 or offset + length > len(payload):
                raise WeightArchiveError(f"entry {name!r}: payload out of bounds")
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            entries[name] = arr.reshape(shape).astype(np.float32)
        return cls(entries=entries, metadata=dict(index.get("metadata", {})),
                   version=version)

    def save(self, path):
        from pathlib import Path

        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightArchive":
        from pathlib import Path

        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# full export / strict import
# ---------------------------------------------------------------------------

def export_weights(module: nn.Module, metadata: dict[str, str] | None = None) -> WeightArchive:
    """Archive every parameter and buffer (running statistics included)."""
    entries = {name: arr.copy() for name, arr, _ in module.named_state()}
    return WeightArchive(entries=entries, metadata=dict(metadata or {}))


def import_strict(module: nn.Module, archive: WeightArchive) -> nn.Module:
    """Load an archive that must cover the model exactly (names and shapes)."""
    model_state = {name: arr for name, arr, _ in module.named_state()}
    missing = sorted(set(model_state) - set(archive.entries))
    extra = sorted(set(archive.entries) - set(model_state))
    if missing or extra:
        raise WeightArchiveError(
            f"strict import mismatch; missing from archive: {missing}; "
            f"unexpected in archive: {extra}")
    for name, arr in model_state.items():
        src = archive[name]
        if src.shape != arr.shape:
            raise WeightArchiveError(
                f"entry {name!r} has shape {src.shape}, model expects {arr.shape}")
        arr[...] = src
    return module


# ---------------------------------------------------------------------------
# partial encoder import
# ---------------------------------------------------------------------------

@dataclass
class LoadReport:
    """Accounting for a partial import.

    ``matched`` ∪ ``reinitialized`` covers every model tensor; ``skipped``
    lists archive entries that were not applied (foreign heads, shape
    mismatches).  ``adapted`` ⊆ ``matched`` flags tensors that went through
    the channel adapter rather than a straight copy.
    """

    matched: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    reinitialized: list[str] = field(default_factory=list)
    adapted: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"matched {len(self.matched)} tensors"
                 + (f" ({len(self.adapted)} channel-adapted)" if self.adapted else ""),
                 f"skipped {len(self.skipped)} archive entries",
                 f"kept fresh init for {len(self.reinitialized)} tensors"]
        if self.adapted:
            lines.append("adapted: " + ", ".join(self.adapted))
        if self.skipped:
            lines.append("skipped: " + ", ".join(self.skipped))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"matched": list(self.matched), "skipped": list(self.skipped),
                "reinitialized": list(self.reinitialized), "adapted": list(self.adapted)}


def _adapt_channels(src: np.ndarray, target_shape: tuple) -> np.ndarray | None:
    """Collapse a multi-channel conv stem to fewer channels by summing.

    Valid because summing kernel channels is exactly equivalent to running
    the original kernel on channel-replicated input.  Returns None when the
    shapes differ in any other way.
    """
    if len(src.shape) != 4 or len(target_shape) != 4:
        return None
    if src.shape[0] != target_shape[0] or src.shape[2:] != tuple(target_shape[2:]):
        return None
    if target_shape[1] != 1 or src.shape[1] <= 1:
        return None
    return src.sum(axis=1, keepdims=True).astype(np.float32)


def import_encoder(model: SliceSetModel, archive: WeightArchive,
                   freeze_batchnorm_stats: bool = False) -> tuple[SliceSetModel, LoadReport]:
    """Load pretrained 2D-encoder tensors into a slice-set model by name.

    Archive entries outside the encoder (e.g. a pretraining head) are
    skipped; the model's own head, positional table, and aggregator keep
    their current initialization.  Fewer than half of the encoder's
    parameters matching is treated as an incompatible archive.
    """
    report = LoadReport()
    used_archive_names = set()
    encoder_params = 0
    encoder_params_matched = 0

    for name, arr, is_param in model.named_state():
        in_encoder = name.startswith("encoder.")
        if in_encoder and is_param:
            encoder_params += 1
        src = archive.entries.get(name) if in_encoder else None
        if src is None:
            report.reinitialized.append(name)
            continue
        if src.shape == arr.shape:
            arr[...] = src
            report.matched.append(name)
            used_archive_names.add(name)
            if is_param:
                encoder_params_matched += 1
            continue
        adapted = _adapt_channels(src, arr.shape)
        if adapted is not None:
            arr[...] = adapted
            report.matched.append(name)
            report.adapted.append(name)
            used_archive_names.add(name)
            if is_param:
                encoder_params_matched += 1
        else:
            report.reinitialized.append(name)

    report.skipped = sorted(set(archive.entries) - used_archive_names)

    if encoder_params == 0 or encoder_params_matched * 2 < encoder_params:
        raise WeightArchiveError(
            f"archive incompatible with encoder: only {encoder_params_matched} of "
            f"{encoder_params} encoder parameters matched (need at least half)")

    if freeze_batchnorm_stats:
        for _, module in model.encoder.named_modules():
            if isinstance(module, nn.BatchNorm2d):
                module.freeze_stats = True

    return model, report


# ---------------------------------------------------------------------------
# synthetic 2D pretraining
# ---------------------------------------------------------------------------

class Classifier2D(nn.Module):
    """2D encoder plus a linear class head, for pretraining on images."""

    def __init__(self, encoder_config: EncoderConfig, n_classes: int = 2):
        super().__init__()
        self.config = encoder_config
        self.encoder = build_encoder(encoder_config)
        self.head = nn.Linear(encoder_config.embedding_dim, n_classes)

    def __call__(self, images: Tensor) -> Tensor:
        return self.head(self.encoder(images))


@dataclass
class Pretrain2DResult:
    archive: WeightArchive
    train_accuracy: float
    losses: list[float]


def pretrain_2d(encoder_config: EncoderConfig, images: np.ndarray, labels: np.ndarray,
                epochs: int = 30, batch_size: int = 32, learning_rate: float = 1e-3,
                seed: int = 0, progress=None) -> Pretrain2DResult:
    """Train encoder+head on a 2D image classification set; archive the encoder.

    The returned archive holds only ``encoder.*`` tensors (weights and
    running statistics), so its names line up one-to-one with a slice-set
    model's encoder. Deterministic for a fixed (config, data, seed).
    """
    from .train import Adam, OptimizerConfig, he_init

    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4:
        raise ValueError(f"images must be (N, C, H, W), got shape {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ValueError("labels must be one integer per image")
    n_classes = int(labels.max()) + 1 if labels.size else 2

    model = Classifier2D(encoder_config, n_classes=max(2, n_classes))
    he_init(model, seed=seed)
    optimizer = Adam(model.parameters(), OptimizerConfig(kind="adam", learning_rate=learning_rate))
    rng = np.random.default_rng(seed)

    losses = []
    n = images.shape[0]
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad()
            logits = model(Tensor(images[idx]))
            loss = nn.cross_entropy(logits, labels[idx])
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(idx)
        losses.append(loss_sum / n)
        if progress is not None:
            progress({"epoch": epoch, "train_loss": losses[-1]})

    model.eval()
    correct = 0
    with no_grad():
        for start in range(0, n, batch_size):
            logits = model(Tensor(images[start:start + batch_size]))
            correct += int(np.sum(np.argmax(logits.numpy(), axis=1) == labels[start:start + batch_size]))
    accuracy = correct / n

    entries = {name: arr.copy() for name, arr, _ in model.named_state()
               if name.startswith("encoder.")}
    metadata = {
        "contents": "2d-encoder",
        "encoder_kind": encoder_config.kind,
        "input_channels": str(encoder_config.input_channels),
        "width_multiplier": repr(encoder_config.width_multiplier),
        "min_input": str(encoder_config.min_input),
        "embedding_dim": str(encoder_config.embedding_dim),
        "train_accuracy": f"{accuracy:.6f}",
        "seed": str(seed),
    }
    return Pretrain2DResult(archive=WeightArchive(entries=entries, metadata=metadata),
                            train_accuracy=accuracy, losses=losses)

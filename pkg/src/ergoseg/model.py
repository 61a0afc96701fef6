"""GCN backbone plus segmentation and risk heads, in four task variants."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .graph import AdjacencySet, SkeletonTopology, canonical_topology, parse_topology
from .layers import PAD_VALUE, EdTcn, EdTcnConfig, GcnLayer, Linear, Module, RecurrentStack
from .tensor import Tensor, concat, reshape, softmax, tanh, transpose

CHECKPOINT_VERSION = 1


class Variant(str, enum.Enum):
    STL_AS = "stl-as"      # segmentation only
    STL_PA = "stl-pa"      # risk regression only
    MTL_BASE = "mtl-base"  # shared backbone, independent heads
    MTL_EMB = "mtl-emb"    # segmentation softmax fused into the regressor input

    @property
    def has_segmentation(self) -> bool:
        return self is not Variant.STL_PA

    @property
    def has_risk(self) -> bool:
        return self is not Variant.STL_AS


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.MTL_BASE
    num_classes: int = 17
    gcn_channels: tuple[int, ...] = (64, 128, 256)
    pool_width: int = 2048
    tcn: EdTcnConfig = field(default_factory=EdTcnConfig)
    regressor_width: int = 256
    lstm_hidden: int = 128
    lstm_layers: int = 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["variant"] = Variant(d["variant"])
        d["gcn_channels"] = tuple(d["gcn_channels"])
        tcn = dict(d["tcn"])
        tcn["hidden"] = tuple(tcn["hidden"])
        tcn["dilations"] = tuple(tcn["dilations"])
        d["tcn"] = EdTcnConfig(**tcn)
        return cls(**d)


class AbsentOutput(LookupError):
    """The requested head does not exist in this model variant."""


@dataclass
class ModelOutput:
    logits: Tensor | None
    risk: Tensor | None
    mask: np.ndarray

    def require_logits(self) -> Tensor:
        if self.logits is None:
            raise AbsentOutput("this variant has no segmentation head")
        return self.logits

    def require_risk(self) -> Tensor:
        if self.risk is None:
            raise AbsentOutput("this variant has no risk head")
        return self.risk


def frame_mask(joints: np.ndarray) -> np.ndarray:
    """Real-frame mask for (B, 3, N, T) joints: padded frames are PAD_VALUE everywhere."""
    return ~np.all(joints == PAD_VALUE, axis=(1, 2))


class Backbone(Module):
    """Stacked per-frame GCN layers, joint-major flatten, adaptive average pool."""

    def __init__(self, adjacency: AdjacencySet, channels, pool_width: int,
                 rng: np.random.Generator):
        self.layers = []
        c_in = 3
        for c_out in channels:
            self.layers.append(GcnLayer(c_in, c_out, adjacency, rng))
            c_in = c_out
        self.flat_width = c_in * adjacency.num_joints
        self.pool_width = pool_width
        self._pool = ops.adaptive_avg_pool_matrix(self.flat_width, pool_width)

    def flatten(self, x: Tensor) -> Tensor:
        """(B, T, 3, N) joints -> (B, T, C_last * N) channel-major, before pooling."""
        B, T, C, N = x.shape
        h = reshape(transpose(x, (3, 0, 1, 2)), (N, B * T, C))
        for layer in self.layers:
            h = layer(h)
        return reshape(transpose(h, (1, 2, 0)), (B, T, self.flat_width))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear_map(self.flatten(x), self._pool)


class RiskHead(Module):
    def __init__(self, n_in: int, width: int, hidden: int, layers: int,
                 rng: np.random.Generator):
        self.fc_in = Linear(n_in, width, rng)
        self.recurrent = RecurrentStack(width, hidden, layers, rng)
        self.fc_out = Linear(hidden, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.recurrent(tanh(self.fc_in(x)))
        y = self.fc_out(h)
        return reshape(y, y.shape[:2])


class AssessmentModel(Module):
    def __init__(self, config: ModelConfig, topology: SkeletonTopology | None = None,
                 seed: int = 0):
        self.config = config
        self.topology = topology or canonical_topology()
        self.adjacency = AdjacencySet.from_topology(self.topology)
        self.rng = np.random.default_rng(seed)
        init = np.random.default_rng([seed, 1])
        self.backbone = Backbone(self.adjacency, config.gcn_channels, config.pool_width, init)
        v = config.variant
        self.segmenter = self.regressor = None
        if v.has_segmentation:
            self.segmenter = EdTcn(config.pool_width, config.num_classes, config.tcn, init)
            self.segmenter.rng = self.rng  # dropout masks use the run stream
        if v.has_risk:
            n_in = config.pool_width + (config.num_classes if v is Variant.MTL_EMB else 0)
            self.regressor = RiskHead(n_in, config.regressor_width, config.lstm_hidden,
                                      config.lstm_layers, init)

    @property
    def variant(self) -> Variant:
        return self.config.variant

    @property
    def regressor_input_width(self) -> int | None:
        if self.regressor is None:
            return None
        return self.regressor.fc_in.weight.shape[0]

    def reseed_dropout(self, seed) -> None:
        self.rng = np.random.default_rng(seed)
        if self.segmenter is not None:
            self.segmenter.rng = self.rng

    def __call__(self, joints, mask: np.ndarray | None = None) -> ModelOutput:
        """Forward a (B, 3, N, T) batch; a single (3, N, T) sequence is promoted."""
        data = joints.data if isinstance(joints, Tensor) else np.asarray(joints, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.shape[1] != 3 or data.shape[2] != self.topology.num_joints:
            raise ValueError(
                f"expected joints shaped (B, 3, {self.topology.num_joints}, T), got {data.shape}")
        if mask is None:
            mask = frame_mask(data)
        mask = np.asarray(mask, dtype=bool).reshape(data.shape[0], data.shape[3])
        x = Tensor(np.transpose(data, (0, 3, 1, 2)))  # (B, T, 3, N)
        features = ops.fill_masked(self.backbone(x), mask, PAD_VALUE)
        logits = risk = None
        if self.segmenter is not None:
            logits = self.segmenter(features)
        if self.regressor is not None:
            reg_in = features
            if self.variant is Variant.MTL_EMB:
                reg_in = concat([features, softmax(logits, axis=-1)], axis=-1)
            risk = self.regressor(reg_in)
        return ModelOutput(logits, risk, mask)


def save_checkpoint(path: str | Path, model: AssessmentModel, loss_params: dict | None = None,
                    metadata: dict | None = None) -> None:
    """Write an ``.npz`` container: little-endian float64 tensors plus a JSON header."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant.value,
        "model_config": model.config.to_dict(),
        "topology": model.topology.to_text(),
        "topology_hash": model.topology.hash,
        "metadata": metadata or {},
    }
    arrays = {f"param/{k}": v.data.astype("<f8") for k, v in model.named_parameters().items()}
    for k, v in (loss_params or {}).items():
        arrays[f"loss/{k}"] = np.asarray(v.data if isinstance(v, Tensor) else v).astype("<f8")
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    model: AssessmentModel
    loss_params: dict[str, np.ndarray]
    metadata: dict
    header: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        config = ModelConfig.from_dict(header["model_config"])
        topology = parse_topology(header["topology"])
        if topology.hash != header["topology_hash"]:
            raise ValueError("checkpoint topology hash does not match its topology")
        model = AssessmentModel(config, topology)
        params = model.named_parameters()
        stored = {k[len("param/"):] for k in z.files if k.startswith("param/")}
        if stored != set(params):
            raise ValueError("checkpoint parameters do not match the model layout")
        for name, t in params.items():
            arr = z[f"param/{name}"]
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = np.array(arr, dtype=np.float64)
        loss = {k[len("loss/"):]: np.array(z[k], dtype=np.float64)
                for k in z.files if k.startswith("loss/")}
    return Checkpoint(model, loss, header["metadata"], header)


def small_config(variant: Variant | str, num_classes: int = 4, **overrides) -> ModelConfig:
    """A shrunken architecture for gradient checks and quick tests."""
    cfg = ModelConfig(
        variant=Variant(variant), num_classes=num_classes, gcn_channels=(4, 5),
        pool_width=12, tcn=EdTcnConfig(hidden=(8, 8), kernel=3, dropout=0.0, fc_hidden=6),
        regressor_width=6, lstm_hidden=4, lstm_layers=3)
    return replace(cfg, **overrides)

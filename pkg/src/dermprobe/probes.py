"""Trainable heads over frozen features.

Segmentation: an ensemble of 5 per-pixel MLPs (hidden 128/128, batch norm
before each rectifier) producing 5 class logits per pixel. Prediction
averages the members' softmax distributions and takes the argmax, ties
resolved toward the lower class index.

Classification: a 3-layer head of widths 64, 32, 1 with batch norm after
each linear layer (before the nonlinearity) and dropout of 0.5 then 0.25
after the nonlinearities, ending in a sigmoid malignancy probability.

Head checkpoints use the versioned schema ``dermprobe-head/1``: a dict with
``format``, ``kind`` ("classifier" | "segmentation"), ``blocks`` (provenance
(block_index, timestep) pairs), ``feature_dim``, ``member_seeds`` (ensemble
only), ``state`` (state dict, or list of member state dicts), and ``meta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import BlockSpec
from .errors import CheckpointCorruptError, CheckpointMissingError, ParameterError
from .features import POOLED_SIZE, ClassificationVector, PixelFeatureMap

HEAD_FORMAT = "dermprobe-head/1"
CLASS_COUNT = 5
ENSEMBLE_SIZE = 5


def _seeded_linear_init(module: nn.Module, seed: int) -> None:
    # Default U(+-1/sqrt(fan_in)) init drawn from a local generator.
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = m.weight.shape[1] ** -0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.uniform_(-bound, bound, generator=gen)


class PixelProbeMember(nn.Module):
    """One per-pixel MLP: feature_dim -> 128 -> 128 -> 5 class logits."""

    def __init__(self, feature_dim: int, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.seed = seed
        self.fc1 = nn.Linear(feature_dim, 128)
        self.bn1 = nn.BatchNorm1d(128)
        self.fc2 = nn.Linear(128, 128)
        self.bn2 = nn.BatchNorm1d(128)
        self.fc3 = nn.Linear(128, CLASS_COUNT)
        _seeded_linear_init(self, seed)

    def forward(self, x):
        x = torch.relu(self.bn1(self.fc1(x)))
        x = torch.relu(self.bn2(self.fc2(x)))
        return self.fc3(x)


class SegmentationProbeEnsemble:
    """Exactly 5 per-pixel probes sharing one feature dimension."""

    def __init__(self, feature_dim: int, member_seeds=(0, 1, 2, 3, 4)):
        member_seeds = tuple(int(s) for s in member_seeds)
        if len(member_seeds) != ENSEMBLE_SIZE:
            raise ParameterError(f"ensemble needs exactly {ENSEMBLE_SIZE} member seeds, got {len(member_seeds)}")
        self.feature_dim = feature_dim
        self.member_seeds = member_seeds
        self.members = [PixelProbeMember(feature_dim, seed=s) for s in member_seeds]

    def eval(self):
        for m in self.members:
            m.eval()
        return self


class ClassifierHead(nn.Module):
    """Malignancy head: 512 -> 64 -> 32 -> 1 with BN and dropout 0.5/0.25."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.fc1 = nn.Linear(POOLED_SIZE, 64)
        self.bn1 = nn.BatchNorm1d(64)
        self.drop1 = nn.Dropout(0.5)
        self.fc2 = nn.Linear(64, 32)
        self.bn2 = nn.BatchNorm1d(32)
        self.drop2 = nn.Dropout(0.25)
        self.fc3 = nn.Linear(32, 1)
        _seeded_linear_init(self, seed)

    def forward(self, x):
        x = self.drop1(torch.relu(self.bn1(self.fc1(x))))
        x = self.drop2(torch.relu(self.bn2(self.fc2(x))))
        return torch.sigmoid(self.fc3(x))


def ensemble_probabilities(ensemble: SegmentationProbeEnsemble, features: PixelFeatureMap) -> np.ndarray:
    """Mean of member softmax distributions, shape (5, H, W)."""
    if features.feature_dim != ensemble.feature_dim:
        raise ParameterError(
            f"feature_dim {features.feature_dim} does not match ensemble's {ensemble.feature_dim}"
        )
    h, w = features.height, features.width
    x = torch.from_numpy(features.data.reshape(-1, features.feature_dim))
    total = torch.zeros(x.shape[0], CLASS_COUNT)
    with torch.no_grad():
        for member in ensemble.members:
            member.eval()
            total += torch.softmax(member(x), dim=1)
    probs = (total / len(ensemble.members)).numpy()
    return np.ascontiguousarray(probs.T.reshape(CLASS_COUNT, h, w))


def seg_predict(
    ensemble: SegmentationProbeEnsemble, features: PixelFeatureMap
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel class map plus the averaged per-class probability maps.

    Ties in the averaged distribution go to the lower class index.
    """
    probs = ensemble_probabilities(ensemble, features)
    labels = np.argmax(probs, axis=0).astype(np.int64)
    return labels, probs


def cls_predict(head: ClassifierHead, vector, mode: str = "eval") -> float:
    """Malignancy probability for one 512-entry vector.

    Eval mode (the default) is deterministic: dropout off, batch-norm running
    statistics. Train mode applies dropout and is meant for diagnostics only.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    values = vector.values if isinstance(vector, ClassificationVector) else np.asarray(vector, dtype=np.float32)
    if values.shape != (POOLED_SIZE,):
        raise ParameterError(f"vector must have shape (512,), got {values.shape}")
    was_training = head.training
    head.train(mode == "train")
    try:
        with torch.no_grad():
            out = head(torch.from_numpy(values.astype(np.float32))[None])
    finally:
        head.train(was_training)
    return float(out.item())


def save_head(path, obj, blocks, meta: dict | None = None) -> None:
    """Serialize a head or ensemble with its provenance blocks."""
    blocks = [(int(b.block_index), int(b.timestep)) for b in blocks]
    if isinstance(obj, ClassifierHead):
        payload = {
            "format": HEAD_FORMAT,
            "kind": "classifier",
            "blocks": blocks,
            "feature_dim": POOLED_SIZE,
            "state": obj.state_dict(),
            "meta": meta or {},
        }
    elif isinstance(obj, SegmentationProbeEnsemble):
        payload = {
            "format": HEAD_FORMAT,
            "kind": "segmentation",
            "blocks": blocks,
            "feature_dim": obj.feature_dim,
            "member_seeds": list(obj.member_seeds),
            "state": [m.state_dict() for m in obj.members],
            "meta": meta or {},
        }
    else:
        raise ParameterError(f"cannot serialize {type(obj).__name__}")
    torch.save(payload, path)


@dataclass
class LoadedHead:
    kind: str
    model: object
    blocks: list[BlockSpec]
    meta: dict


def load_head(path) -> LoadedHead:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissingError(f"head checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointCorruptError(f"cannot parse head checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != HEAD_FORMAT:
        raise CheckpointCorruptError(f"{path} is not in the {HEAD_FORMAT!r} schema")
    try:
        blocks = [BlockSpec(int(i), int(t)) for i, t in payload["blocks"]]
        if payload["kind"] == "classifier":
            head = ClassifierHead()
            head.load_state_dict(payload["state"])
            head.eval()
            return LoadedHead("classifier", head, blocks, payload.get("meta", {}))
        if payload["kind"] == "segmentation":
            ens = SegmentationProbeEnsemble(
                int(payload["feature_dim"]), tuple(payload["member_seeds"])
            )
            for member, state in zip(ens.members, payload["state"]):
                member.load_state_dict(state)
            ens.eval()
            return LoadedHead("segmentation", ens, blocks, payload.get("meta", {}))
        raise ValueError(f"unknown head kind {payload['kind']!r}")
    except CheckpointCorruptError:
        raise
    except Exception as exc:
        raise CheckpointCorruptError(f"head checkpoint {path} is corrupt: {exc}") from exc

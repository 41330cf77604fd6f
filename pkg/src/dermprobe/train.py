"""Probe training over frozen-backbone features.

Both heads train with Adam (weight decay 1e-5), full-subset batches, at
most 500 epochs, and early stopping that monitors validation loss and
restores the best weights seen. Classification minimizes binary
cross-entropy on the malignancy probability; segmentation minimizes
per-pixel multi-class cross-entropy, one independent run per ensemble
member from that member's seed.

Determinism: the run seed fixes weight init, dropout, and the per-sample
noise used for feature extraction (one epsilon per sample per run, derived
from the run seed and the sample id), so identical configs reproduce
identical weights and histories bit for bit. The backbone is frozen; its
fingerprint is re-checked after every run.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from . import data as dat
from .backbone import BlockSpec, FrozenBackbone, fingerprint_weights
from .errors import ConfigError, DataError, ParameterError
from .features import classification_vector, segmentation_features
from .probes import ClassifierHead, PixelProbeMember, SegmentationProbeEnsemble

SUBSET_BATCH_SIZES = {5: 30, 10: 60, 15: 90, 20: 120}
DEFAULT_SEG_BLOCKS = (BlockSpec(6, 100), BlockSpec(8, 100))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of parts (never Python's salted hash)."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one probe-training run.

    ``subset_percent`` ties the run to a plan subset, in which case the
    batch is the full subset (30/60/90/120). ``None`` trains on whatever
    records are passed, again in one full batch.
    """

    subset_percent: int | None = 5
    batch_size: int | None = None
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.subset_percent is not None:
            if self.subset_percent not in SUBSET_BATCH_SIZES:
                problems.append(f"subset_percent must be one of {sorted(SUBSET_BATCH_SIZES)} or None")
            else:
                expect = SUBSET_BATCH_SIZES[self.subset_percent]
                if self.batch_size is None:
                    object.__setattr__(self, "batch_size", expect)
                elif self.batch_size != expect:
                    problems.append(
                        f"batch_size must be {expect} for the {self.subset_percent}% subset, "
                        f"got {self.batch_size}"
                    )
        if self.weight_decay != 1e-5:
            problems.append(f"weight_decay is fixed at 1e-05, got {self.weight_decay!r}")
        if self.max_epochs < 0:
            problems.append("max_epochs must be >= 0")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.learning_rate <= 0:
            problems.append("learning_rate must be positive")
        if problems:
            raise ConfigError(problems)


@dataclass
class TrainHistory:
    """Per-epoch loss rows; ``member`` is empty for the classifier."""

    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, train_loss: float, val_loss: float, member: int | None = None):
        self.rows.append(
            {
                "member": "" if member is None else member,
                "epoch": epoch,
                "train_loss": float(train_loss),
                "val_loss": float(val_loss),
            }
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["member", "epoch", "train_loss", "val_loss"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow(
                    {
                        "member": row["member"],
                        "epoch": row["epoch"],
                        "train_loss": repr(row["train_loss"]),
                        "val_loss": repr(row["val_loss"]),
                    }
                )

    def final_val_loss(self, member: int | None = None) -> float:
        rows = [r for r in self.rows if r["member"] == ("" if member is None else member)]
        return rows[-1]["val_loss"] if rows else float("nan")


class _EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_state = None
        self.bad_epochs = 0

    def step(self, val_loss: float, module: torch.nn.Module) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_state = copy.deepcopy(module.state_dict())
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, module: torch.nn.Module) -> None:
        if self.best_state is not None:
            module.load_state_dict(self.best_state)


def _check_subset_size(config: TrainConfig, n: int) -> None:
    if config.subset_percent is not None and n != config.batch_size:
        raise ConfigError(
            [f"{config.subset_percent}% subset must have {config.batch_size} samples, got {n}"]
        )


def _load_x0(record: dat.SampleRecord, root: Path, resolution: int) -> np.ndarray:
    return dat.load_image_array(Path(root) / record.image_path, resolution)


def classification_features(
    backbone: FrozenBackbone,
    block: BlockSpec,
    records: Sequence[dat.SampleRecord],
    root,
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pooled 512-vectors and malignancy targets for a record list."""
    res = backbone.descriptor.input_resolution
    xs, ys = [], []
    for rec in records:
        x0 = _load_x0(rec, root, res)
        vec = classification_vector(backbone, x0, block, derive_seed(seed, "eps", rec.id))
        xs.append(vec.values)
        ys.append(1.0 if rec.malignant else 0.0)
    return torch.from_numpy(np.stack(xs)), torch.tensor(ys, dtype=torch.float32)[:, None]


def train_classifier(
    backbone: FrozenBackbone,
    block: BlockSpec,
    train_records: Sequence[dat.SampleRecord],
    val_records: Sequence[dat.SampleRecord],
    config: TrainConfig,
    root,
    run_dir=None,
) -> tuple[ClassifierHead, TrainHistory]:
    """Train the malignancy head on one block's pooled features."""
    _check_subset_size(config, len(train_records))
    before = backbone.fingerprint
    torch.manual_seed(derive_seed(config.seed, "cls-run"))
    x_train, y_train = classification_features(backbone, block, train_records, root, config.seed)
    x_val, y_val = classification_features(backbone, block, val_records, root, config.seed)

    head = ClassifierHead(seed=derive_seed(config.seed, "cls-init"))
    history = TrainHistory()
    stopper = _EarlyStopper(config.patience)
    opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    for epoch in range(config.max_epochs):
        head.train()
        prob = head(x_train)
        loss = F.binary_cross_entropy(prob, y_train)
        opt.zero_grad()
        loss.backward()
        opt.step()
        head.eval()
        with torch.no_grad():
            val_loss = F.binary_cross_entropy(head(x_val), y_val)
        history.add(epoch, loss.item(), val_loss.item())
        if stopper.step(val_loss.item(), head):
            break
    stopper.restore(head)
    head.eval()
    if backbone.fingerprint != before or fingerprint_weights(backbone.net) != before:
        raise RuntimeError("backbone weights changed during training; freeze contract violated")
    if run_dir is not None:
        _write_run_artifacts(run_dir, history, head=head, blocks=[block], config=config)
    return head, history


def segmentation_pixels(
    backbone: FrozenBackbone,
    blocks: Sequence[BlockSpec],
    records: Sequence[dat.SampleRecord],
    root,
    seed: int,
    max_pixels_per_image: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel feature rows and class targets for masked records.

    ``max_pixels_per_image`` caps each image's contribution with a seeded
    subsample; prediction always runs on full images regardless.
    """
    res = backbone.descriptor.input_resolution
    xs, ys = [], []
    for rec in records:
        if rec.mask_path is None:
            raise DataError(f"sample {rec.id!r} has no mask and cannot train segmentation")
        x0 = _load_x0(rec, root, res)
        fmap = segmentation_features(backbone, x0, blocks, derive_seed(seed, "eps", rec.id))
        feats = fmap.data.reshape(-1, fmap.feature_dim)
        labels = dat.load_mask_array(Path(root) / rec.mask_path, res).reshape(-1)
        if max_pixels_per_image is not None and max_pixels_per_image < len(labels):
            keep = np.random.default_rng(derive_seed(seed, "px", rec.id)).choice(
                len(labels), size=max_pixels_per_image, replace=False
            )
            keep.sort()
            feats, labels = feats[keep], labels[keep]
        xs.append(feats)
        ys.append(labels)
    return (
        torch.from_numpy(np.concatenate(xs)),
        torch.from_numpy(np.concatenate(ys)),
    )


def train_segmentation(
    backbone: FrozenBackbone,
    train_records: Sequence[dat.SampleRecord],
    val_records: Sequence[dat.SampleRecord],
    config: TrainConfig,
    root,
    blocks: Sequence[BlockSpec] = DEFAULT_SEG_BLOCKS,
    member_seeds: Sequence[int] | None = None,
    max_pixels_per_image: int | None = None,
    run_dir=None,
) -> tuple[SegmentationProbeEnsemble, TrainHistory]:
    """Train the 5-member per-pixel ensemble on upsampled concatenated blocks."""
    _check_subset_size(config, len(train_records))
    before = backbone.fingerprint
    x_train, y_train = segmentation_pixels(
        backbone, blocks, train_records, root, config.seed, max_pixels_per_image
    )
    x_val, y_val = segmentation_pixels(
        backbone, blocks, val_records, root, config.seed, max_pixels_per_image
    )
    if member_seeds is None:
        member_seeds = tuple(derive_seed(config.seed, "member", k) for k in range(5))
    ensemble = SegmentationProbeEnsemble(x_train.shape[1], member_seeds)
    history = TrainHistory()
    for k, member in enumerate(ensemble.members):
        torch.manual_seed(derive_seed(member_seeds[k], "seg-run"))
        _train_member(member, x_train, y_train, x_val, y_val, config, history, k)
    if backbone.fingerprint != before or fingerprint_weights(backbone.net) != before:
        raise RuntimeError("backbone weights changed during training; freeze contract violated")
    if run_dir is not None:
        _write_run_artifacts(run_dir, history, ensemble=ensemble, blocks=list(blocks), config=config)
    return ensemble, history


def _train_member(
    member: PixelProbeMember,
    x_train: torch.Tensor,
    y_train: torch.Tensor,
    x_val: torch.Tensor,
    y_val: torch.Tensor,
    config: TrainConfig,
    history: TrainHistory,
    index: int,
    chunk: int = 8192,
) -> None:
    opt = torch.optim.Adam(member.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    stopper = _EarlyStopper(config.patience)
    n = len(x_train)
    for epoch in range(config.max_epochs):
        member.train()
        opt.zero_grad()
        total = 0.0
        # Pixel chunks bound memory; gradients accumulate into one full-batch step.
        for start in range(0, n, chunk):
            xb, yb = x_train[start : start + chunk], y_train[start : start + chunk]
            loss = F.cross_entropy(member(xb), yb) * (len(xb) / n)
            loss.backward()
            total += loss.item()
        opt.step()
        val_loss = _eval_member_loss(member, x_val, y_val, chunk)
        history.add(epoch, total, val_loss, member=index)
        if stopper.step(val_loss, member):
            break
    stopper.restore(member)
    member.eval()


def _eval_member_loss(member, x, y, chunk: int = 8192) -> float:
    member.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(x), chunk):
            xb, yb = x[start : start + chunk], y[start : start + chunk]
            total += F.cross_entropy(member(xb), yb).item() * (len(xb) / len(x))
    return total


def _write_run_artifacts(run_dir, history, config, blocks, head=None, ensemble=None) -> None:
    from .probes import save_head

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    history.write_csv(run_dir / "history.csv")
    meta = {"train_config": asdict(config)}
    obj = head if head is not None else ensemble
    save_head(run_dir / "checkpoint.pt", obj, blocks, meta=meta)


def snapshot_config(run_dir, document: dict) -> None:
    """Persist the fully resolved config for a run (reproducibility contract)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

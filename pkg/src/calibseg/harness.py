"""Training configuration, mini-batching, the training loop and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .datagen import Dataset, load_dataset
from .errors import ConfigurationError, TrainingError
from .metrics import MetricsReport, evaluate_model
from .model import ModelConfig, ProbabilisticUNet, load_checkpoint, save_checkpoint
from .objectives import Batch, LossBreakdown, batch_from_items, total_loss

log = logging.getLogger(__name__)

PROFILES = {
    # Table-1 style settings for the two reference datasets
    "lidc": dict(epochs=800, batch_size=32, beta=1.0, gamma=100.0, learning_rate=1e-6),
    "miccai": dict(epochs=1000, batch_size=12, beta=100.0, gamma=100.0, learning_rate=1e-4),
    # CPU-sized runs on synthetic data
    "desk": dict(epochs=50, batch_size=16, beta=1.0, gamma=100.0, learning_rate=1e-3),
}

LOG_COLUMNS = ("epoch", "reconstruction", "latent_kl", "weight_kl", "calibration", "total", "split")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta: float = 1.0
    gamma: float = 100.0
    latent_dim: int = 6
    k_train: int = 4
    s_eval: int = 50
    seed: int = 0
    dataset: str | None = None
    profile: str = "desk"
    output_dir: str = "runs/default"
    variational_dropout: bool = True
    num_threads: int | None = None

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ConfigurationError(f"beta and gamma must be >= 0 (got {self.beta}, {self.gamma})")
        if self.batch_size < 1 or self.epochs < 1 or self.k_train < 1 or self.s_eval < 1:
            raise ConfigurationError("epochs, batch_size, k_train and s_eval must all be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")

    @classmethod
    def from_profile(cls, profile: str = "desk", **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        values = dict(PROFILES[profile], profile=profile)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields in {path}: {sorted(unknown)}")
        profile = overrides.pop("profile", None) or data.pop("profile", "desk")
        data.pop("profile", None)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_profile(profile, **data)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=1))
        return path


def make_batches(items: Sequence, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Shuffle images and yield batches holding every annotation of each image."""
    if len(items) == 0:
        raise ConfigurationError("cannot batch an empty dataset")
    order = rng.permutation(len(items))
    for start in range(0, len(order), batch_size):
        yield batch_from_items([items[i] for i in order[start:start + batch_size]])


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    history: list[dict] = field(default_factory=list)
    model: ProbabilisticUNet | None = None


def _check_finite(breakdown: LossBreakdown, epoch: int, split: str):
    bad = breakdown.nonfinite_terms()
    if bad:
        values = breakdown.as_dict()
        raise TrainingError(
            f"non-finite loss in epoch {epoch} ({split}): "
            + ", ".join(f"{name}={values[name]}" for name in bad),
            term=bad[0], epoch=epoch,
        )


def _accumulate(acc: dict, breakdown: LossBreakdown, weight: int):
    for name, value in breakdown.as_dict().items():
        acc[name] = acc.get(name, 0.0) + weight * value


def _evaluate_loss(model, items, config, n_train, seed) -> dict:
    generator = torch.Generator().manual_seed(seed)
    acc, count = {}, 0
    with torch.no_grad():
        for start in range(0, len(items), config.batch_size):
            batch = batch_from_items(items[start:start + config.batch_size])
            bd = total_loss(batch, model, config.beta, config.gamma, config.k_train, n_train, generator)
            _accumulate(acc, bd, batch.size)
            count += batch.size
    return {k: v / count for k, v in acc.items()}


def train(config: TrainConfig, dataset: Dataset | None = None) -> TrainResult:
    """Adam on the full objective; keeps the checkpoint with the lowest validation total."""
    if config.num_threads:
        torch.set_num_threads(config.num_threads)
    if dataset is None:
        if not config.dataset:
            raise ConfigurationError("TrainConfig.dataset must name a manifest when no dataset is passed")
        dataset = load_dataset(config.dataset)
    train_items = dataset.subset("train").items
    val_items = dataset.subset("val").items
    if not train_items:
        raise ConfigurationError("dataset has no training images")

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.to_json(out / "config.json")

    model = ProbabilisticUNet(ModelConfig(
        height=dataset.height, width=dataset.width, latent_dim=config.latent_dim,
        variational_dropout=config.variational_dropout, seed=config.seed,
    ))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    n_train = sum(it.annotations.grader_count for it in train_items)
    batch_rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed)
    extra = {"train_config": asdict(config)}

    history = []
    best_val = math.inf
    best_path = out / "best.pt"
    for epoch in range(1, config.epochs + 1):
        model.train()
        acc, count = {}, 0
        for batch in make_batches(train_items, config.batch_size, batch_rng):
            bd = total_loss(batch, model, config.beta, config.gamma, config.k_train, n_train, noise_gen)
            _check_finite(bd, epoch, "train")
            optimizer.zero_grad()
            bd.total.backward()
            optimizer.step()
            model.dropout.clamp_()
            _accumulate(acc, bd, batch.size)
            count += batch.size
        row = {"epoch": epoch, **{k: v / count for k, v in acc.items()}, "split": "train"}
        history.append(row)

        model.eval()
        if val_items:
            # same validation noise every epoch so totals are comparable
            vrow = {"epoch": epoch, **_evaluate_loss(model, val_items, config, n_train, config.seed + 1),
                    "split": "val"}
            if not math.isfinite(vrow["total"]):
                bad = [k for k in LOG_COLUMNS[1:-1] if not math.isfinite(vrow[k])]
                raise TrainingError(f"non-finite validation loss in epoch {epoch}: {bad}", term=bad[0], epoch=epoch)
            history.append(vrow)
            score = vrow["total"]
        else:
            score = row["total"]
        log.info("epoch %d train %.3f val %.3f", epoch, row["total"], score)
        if score < best_val:
            best_val = score
            save_checkpoint(model, best_path, {**extra, "epoch": epoch, "val_total": score})
        _write_log(out / "train_log.csv", history)

    save_checkpoint(model, out / "last.pt", {**extra, "epoch": config.epochs})
    return TrainResult(best_path, out / "train_log.csv", history, model)


def _write_log(path: Path, history: list[dict]):
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["epoch"] = int(row["epoch"])
        for k in LOG_COLUMNS[1:-1]:
            row[k] = float(row[k])
    return rows


def evaluate(checkpoint, split: str = "test", seeds: Sequence[int] = (0,), dataset: Dataset | str | None = None,
             samples: int | None = None, out_dir=None, name: str | None = None) -> MetricsReport:
    """Load a checkpoint, score it on ``split`` and write ``<name>_<split>.json/.csv``."""
    checkpoint = Path(checkpoint)
    model = load_checkpoint(checkpoint)
    sidecar = json.loads(Path(str(checkpoint) + ".json").read_text())
    tc = sidecar.get("train_config", {})
    if dataset is None:
        dataset = tc.get("dataset")
        if not dataset:
            raise ConfigurationError(f"no dataset given and checkpoint {checkpoint} does not record one")
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    if samples is None:
        samples = int(tc.get("s_eval", 50))
    name = name or checkpoint.parent.name or checkpoint.stem
    report = evaluate_model(model, dataset.subset(split).items, samples, seeds, name=name, split=split)
    out = Path(out_dir) if out_dir is not None else checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / f"{name}_{split}.json")
    report.to_csv(out / f"{name}_{split}.csv")
    return report

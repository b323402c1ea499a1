"""Optimisation schedule, training loop, checkpoints, multi-scale inference, ordering experiment."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import DataConfig, ExperimentConfig, SynthSpec, TrainConfig
from .data import SegmentationSample, augment, generate_synth_dataset, load_dataset, stack
from .dca import resize
from .metrics import ConfusionMatrix, mean_iou
from .network import DCANet, build_model, compute_losses, median_frequency_weights

logger = logging.getLogger(__name__)

MS_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
VAL_SEED_OFFSET = 7919
CHECKPOINT_FORMAT = "dcanet-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, checkpoint: Optional[Path]):
        super().__init__(f"non-finite loss at iteration {iteration}; last good checkpoint: {checkpoint}")
        self.iteration = iteration
        self.checkpoint = checkpoint


TOY_ORDERING_OVERRIDES = {
    "train.class_balance": "uniform",
    "train.scale_range": [0.75, 1.5],
    "train.base_lr": 0.02,
}


def toy_ordering_config() -> ExperimentConfig:
    """Default experiment with the recipe used for the toy ablation ordering.

    Uniform class weights, a narrower scale range, and base_lr 0.02. All
    three were chosen on the baseline (no long-range structure) alone.
    """
    return ExperimentConfig().with_overrides(TOY_ORDERING_OVERRIDES)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """base_lr * (1 - iteration / max_iter) ** power, clamped to 0 past max_iter."""
    if iteration > cfg.max_iter:
        logger.warning("poly_lr: iteration %d exceeds max_iter %d; lr clamped to 0", iteration, cfg.max_iter)
        return 0.0
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.power


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def build_seeded_model(cfg, seed: int) -> DCANet:
    seed_everything(seed)
    return build_model(cfg)


def make_splits(data: DataConfig, num_classes: int):
    """Return (train, val) sample lists from the synthetic spec or a dataset directory."""
    if data.path is not None:
        root = Path(data.path)
        return load_dataset(root / "train", num_classes), load_dataset(root / "val", num_classes)
    train = generate_synth_dataset(data.synth)
    val = generate_synth_dataset(dataclasses.replace(
        data.synth, num_images=data.num_val, seed=data.synth.seed + VAL_SEED_OFFSET))
    return train, val


# ----------------------------------------------------------------------------
# checkpoints


def _zip_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(path, model: torch.nn.Module, config: ExperimentConfig, iteration: int) -> Path:
    """Write a zip archive: parameter arrays keyed by state-dict name, config, iteration count.

    Entry timestamps are fixed so identical states give identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "iteration": iteration,
            "keys": list(state)}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_entry(zf, "meta.json", json.dumps(meta, indent=1).encode())
        _zip_entry(zf, "config.json", config.to_json().encode())
        for name, tensor in state.items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            _zip_entry(zf, f"params/{name}.npy", buf.getvalue())
    return path


def load_checkpoint(path):
    """Return ``(model, config, meta)``. Raises ``KeyError`` listing any key differences."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r} v{meta.get('version')}")
        config = ExperimentConfig.from_dict(json.loads(zf.read("config.json")))
        arrays = {name: np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                  for name in meta["keys"]}
    model = build_model(config.model)
    expected = set(model.state_dict())
    missing, unexpected = sorted(expected - set(arrays)), sorted(set(arrays) - expected)
    if missing or unexpected:
        raise KeyError(f"checkpoint/config mismatch: missing {missing}, unexpected {unexpected}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model, config, meta


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    log: List[dict]
    checkpoint: Optional[Path] = None
    class_weights: Optional[np.ndarray] = None


def _to_batch(samples: Sequence[SegmentationSample]):
    images, labels, present = stack(list(samples))
    return torch.from_numpy(images), torch.from_numpy(labels), torch.from_numpy(present)


def train(model: DCANet, dataset: Sequence[SegmentationSample], cfg: TrainConfig,
          out_dir=None, experiment: Optional[ExperimentConfig] = None) -> TrainResult:
    """Mini-batch SGD with momentum, weight decay and the poly schedule.

    With ``out_dir`` the metric log goes to ``metrics.jsonl`` and
    checkpoints to ``checkpoint_<iter>.zip`` / ``checkpoint_final.zip``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    k = model.cfg.num_classes
    rng = np.random.default_rng(cfg.seed)
    class_weights = None
    if cfg.class_balance == "median":
        class_weights = median_frequency_weights(np.stack([s.labels for s in dataset]), k)
    cw = torch.as_tensor(class_weights, dtype=torch.float32) if class_weights is not None else None
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "metrics.jsonl", "w")
    experiment = experiment or ExperimentConfig(model=model.cfg, train=cfg,
                                                data=DataConfig(synth=SynthSpec(num_classes=k)))
    last_ckpt = None
    log: List[dict] = []
    model.train()
    try:
        for it in range(cfg.max_iter):
            lr = poly_lr(it, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = rng.choice(len(dataset), size=cfg.batch_size, replace=len(dataset) < cfg.batch_size)
            images, labels, present = _to_batch([augment(dataset[i], cfg, rng) for i in idx])
            terms = compute_losses(model(images), labels, present, cfg.loss_weights, cw)
            if not torch.isfinite(terms.total):
                raise TrainingAborted(it, last_ckpt)
            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()
            if it % cfg.log_every == 0 or it == cfg.max_iter - 1:
                vals = [float(t.detach()) for t in terms]
                rec = {"iter": it, "lr": lr, "loss_total": vals[0], "loss_main": vals[1],
                       "loss_aux": vals[2], "loss_sem": vals[3]}
                log.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
            if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                last_ckpt = save_checkpoint(out_dir / f"checkpoint_{it + 1:06d}.zip", model, experiment, it + 1)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    final = None
    if out_dir is not None:
        final = save_checkpoint(out_dir / "checkpoint_final.zip", model, experiment, cfg.max_iter)
    return TrainResult(log, final, class_weights)


# ----------------------------------------------------------------------------
# inference


@torch.no_grad()
def multi_scale_infer(model: DCANet, images: torch.Tensor, scales: Sequence[float] = MS_SCALES,
                      out_size: Optional[tuple] = None) -> torch.Tensor:
    """Average softmax probability maps over rescaled copies of ``images``."""
    scales = list(scales)
    if not scales:
        raise ValueError("scales must not be empty")
    model.eval()
    h, w = images.shape[-2:]
    out_size = tuple(out_size) if out_size is not None else (h, w)
    total = None
    for s in scales:
        size = (max(int(round(h * s)), 8), max(int(round(w * s)), 8))
        probs = F.softmax(model(resize(images, size)).scores, dim=1)
        probs = resize(probs, out_size)
        total = probs if total is None else total + probs
    return total / len(scales)


@torch.no_grad()
def predict_proba(model: DCANet, images: np.ndarray, scales: Sequence[float] = (1.0,),
                  batch_size: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i:i + batch_size], dtype=torch.float32)
        out.append(multi_scale_infer(model, x, scales).numpy())
    return np.concatenate(out)


def evaluate(model: DCANet, samples: Sequence[SegmentationSample], scales: Sequence[float] = (1.0,),
             batch_size: int = 16) -> ConfusionMatrix:
    images, labels, _ = stack(list(samples))
    pred = predict_proba(model, images, scales, batch_size).argmax(axis=1)
    return ConfusionMatrix(model.cfg.num_classes).update(pred, labels)


# ----------------------------------------------------------------------------
# ordering experiment

VARIANTS: Dict[str, dict] = {
    "baseline": {"structure": "none"},
    "crs": {"structure": "crs"},
    "cascade": {"structure": "cascade"},
    "pyramid": {"structure": "pyramid"},
}


@dataclass
class OrderingResult:
    scores: Dict[str, Dict[int, float]] = field(default_factory=dict)
    failures: Dict[str, Dict[int, str]] = field(default_factory=dict)
    logs: Dict[str, Dict[int, List[dict]]] = field(default_factory=dict, repr=False)
    models: Dict[str, Dict[int, DCANet]] = field(default_factory=dict, repr=False)

    @property
    def complete(self) -> bool:
        return not any(self.failures.values())

    def median(self, variant: str) -> float:
        return float(np.median(list(self.scores[variant].values())))

    def wins(self, a: str, b: str) -> int:
        """Seeds on which ``a`` scored strictly higher than ``b``."""
        common = set(self.scores[a]) & set(self.scores[b])
        return sum(self.scores[a][s] > self.scores[b][s] for s in common)

    def table(self) -> dict:
        names = list(self.scores)
        return {
            "complete": self.complete,
            "median_miou": {v: self.median(v) for v in names if self.scores[v]},
            "per_seed": {v: {str(s): m for s, m in self.scores[v].items()} for v in names},
            "pairwise_wins": {f"{a}>{b}": self.wins(a, b) for a in names for b in names if a != b},
        }


def run_ordering_experiment(variants, base: ExperimentConfig, seeds: Sequence[int],
                            keep_models: bool = False) -> OrderingResult:
    """Train every variant once per seed on the same synthetic split and score val mIoU.

    ``variants`` is a list of names from :data:`VARIANTS` or a mapping
    ``name -> model-config overrides``. The seed drives initialisation and
    batch sampling; the dataset stays fixed.
    """
    if isinstance(variants, dict):
        specs = dict(variants)
    else:
        specs = {v: VARIANTS[v] for v in variants}
    train_set, val_set = make_splits(base.data, base.model.num_classes)
    result = OrderingResult()
    for name, overrides in specs.items():
        result.scores[name], result.failures[name], result.logs[name] = {}, {}, {}
        if keep_models:
            result.models[name] = {}
        model_cfg = dataclasses.replace(base.model, **overrides)
        for seed in seeds:
            train_cfg = dataclasses.replace(base.train, seed=seed)
            try:
                model = build_seeded_model(model_cfg, seed)
                run = train(model, train_set, train_cfg)
                miou, _ = mean_iou(evaluate(model, val_set))
            except (TrainingAborted, ValueError) as e:
                logger.error("variant %s seed %d aborted: %s", name, seed, e)
                result.failures[name][seed] = str(e)
                continue
            logger.info("variant %s seed %d: val mIoU %.4f", name, seed, miou)
            result.scores[name][seed] = miou
            result.logs[name][seed] = run.log
            if keep_models:
                result.models[name][seed] = model
    return result

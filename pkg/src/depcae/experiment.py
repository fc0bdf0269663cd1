"""Training loop, experiment configs, and the four-arm ablation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from depcae.benchmark import config_hash
from depcae.detect import (
    ScoredWindow, ThresholdReport, classify, score_windows, threshold_from_annotations, threshold_from_iqr,
)
from depcae.loss import DepthWeights, depth_weighted_mse, depth_weighted_mse_backward, mse_loss, mse_loss_backward
from depcae.metrics import MetricsReport, evaluate
from depcae.model import DepCaeModel, build_model
from depcae.pipeline import Window, load_depth, load_manifest, load_windows, validate_manifest
from depcae.tensor import AdamState, NonFiniteError, adam_step

log = logging.getLogger(__name__)

LOSSES = ("mse", "depth")
THRESHOLD_METHODS = ("iqr", "annotated")
ARM_NAMES = {
    ("mse", "iqr"): "baseline",
    ("depth", "iqr"): "depWgtOnly",
    ("mse", "annotated"): "anntThrOnly",
    ("depth", "annotated"): "depCAE",
}


@dataclass
class TrainConfig:
    channel_plan: Tuple[int, int, int] = (16, 32, 64)
    loss: str = "depth"
    depth_exponent: float = 1.0
    depth_normalization: str = "max-to-one"
    lr: float = 1e-3
    batch_size: int = 4
    epochs: int = 50
    seed: int = 0
    # frames drawn at random from each window per step; None trains on whole windows.
    # The network sees one frame at a time, so a frame subset is an unbiased sample
    # of the window loss at a fraction of the cost.
    frames_per_sample: Optional[int] = None

    def __post_init__(self):
        self.channel_plan = tuple(int(c) for c in self.channel_plan)
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.batch_size < 1 or self.epochs < 0 or not self.lr > 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")
        if self.frames_per_sample is not None and self.frames_per_sample < 1:
            raise ValueError("frames_per_sample must be at least 1")


@dataclass
class ExperimentConfig:
    dataset: str = "data"
    out: str = "runs/default"
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: str = "annotated"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.threshold not in THRESHOLD_METHODS:
            raise ValueError(f"threshold must be one of {THRESHOLD_METHODS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["channel_plan"] = list(self.train.channel_plan)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, last_good: Optional[Dict[str, np.ndarray]], history: list):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


def make_weights(cfg: TrainConfig, depth: Optional[np.ndarray]) -> Optional[DepthWeights]:
    if cfg.loss == "mse":
        return None
    if depth is None:
        raise ValueError("depth-weighted loss needs a depth map")
    return DepthWeights(depth, cfg.depth_exponent, cfg.depth_normalization)


def _loss_and_grad(x, y, weights):
    if weights is None:
        return mse_loss(x, y), mse_loss_backward(x, y)
    return depth_weighted_mse(x, y, weights), depth_weighted_mse_backward(x, y, weights)


def _sample_frames(window: np.ndarray, k: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if k is None or k >= len(window):
        return window
    return window[np.sort(rng.choice(len(window), size=k, replace=False))]


def train_model(windows: Sequence, cfg: TrainConfig, depth: Optional[np.ndarray] = None,
                model: Optional[DepCaeModel] = None,
                on_epoch: Optional[Callable[[dict], None]] = None,
                initial_loss: bool = True) -> Tuple[DepCaeModel, List[dict]]:
    """Fit the autoencoder to normal windows with Adam.

    History row 0 is the loss of the untrained model (skipped when
    ``initial_loss`` is false, which saves one pass over the data); row ``e``
    is the mean step loss of epoch ``e``. Everything is a function of
    ``cfg.seed``.
    """
    frames = [np.asarray(getattr(w, "frames", w), dtype=np.float32) for w in windows]
    if not frames:
        raise ValueError("no training windows")
    shape = frames[0].shape
    model = model or build_model(cfg.channel_plan, cfg.seed, input_shape=shape)
    weights = make_weights(cfg, depth)
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    model.set_training(True)

    history = []
    if initial_loss:
        # a forward pass in training mode moves the batchnorm running stats; put them back
        buffers = {k: v.copy() for k, v in model.buffers().items()}
        init = [_loss_and_grad(np.stack(frames[i:i + cfg.batch_size]),
                               model.forward(np.stack(frames[i:i + cfg.batch_size])), weights)[0]
                for i in range(0, len(frames), cfg.batch_size)]
        for k, v in model.buffers().items():
            v[...] = buffers[k]
        history.append({"epoch": 0, "loss": float(np.mean(init)), "seconds": 0.0})
        if on_epoch:
            on_epoch(history[0])
    last_good = {k: v.copy() for k, v in model.state_dict().items()}
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(frames))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = order[i:i + cfg.batch_size]
            x = np.stack([_sample_frames(frames[j], cfg.frames_per_sample, rng) for j in batch])
            y = model.forward(x)
            loss, grad = _loss_and_grad(x, y, weights)
            if not np.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", last_good, history)
            model.backward(grad)
            try:
                adam_step(model.parameters(), model.gradients(), state, lr=cfg.lr)
            except NonFiniteError as exc:
                raise TrainingAborted(str(exc), last_good, history) from None
            losses.append(loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "seconds": round(time.perf_counter() - t0, 3)}
        history.append(row)
        last_good = {k: v.copy() for k, v in model.state_dict().items()}
        if on_epoch:
            on_epoch(row)
    model.set_training(False)
    return model, history


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class ArmResult:
    name: str
    loss: str
    threshold_method: str
    threshold: ThresholdReport
    metrics: MetricsReport
    test_scores: List[ScoredWindow]


@dataclass
class AblationResult:
    arms: Dict[str, ArmResult]
    histories: Dict[str, List[dict]]

    def metrics(self) -> Dict[str, MetricsReport]:
        return {name: arm.metrics for name, arm in self.arms.items()}


def select_threshold(method: str, train_scored: Sequence[ScoredWindow]) -> ThresholdReport:
    if method == "iqr":
        return threshold_from_iqr([w.anomaly_score for w in train_scored])
    return threshold_from_annotations(train_scored)


def _copy_scores(scored):
    return [ScoredWindow(w.window_id, w.anomaly_score, w.label, None, w.group) for w in scored]


def ablation_run(root, cfg: TrainConfig, losses: Sequence[str] = LOSSES,
                 methods: Sequence[str] = THRESHOLD_METHODS,
                 on_epoch: Optional[Callable[[str, dict], None]] = None, workers: int = 1) -> AblationResult:
    """Train one model per loss (same seed), then threshold each with every method.

    Arms: baseline (MSE, IQR), depWgtOnly (depth, IQR), anntThrOnly (MSE,
    annotated) and depCAE (depth, annotated).
    """
    manifest = load_manifest(root)
    problems = validate_manifest(manifest, root)
    if problems:
        raise ValueError("invalid dataset: " + "; ".join(problems))
    depth = load_depth(root, manifest)
    train = load_windows(root, "train", manifest)
    test = load_windows(root, "test", manifest)
    arms: Dict[str, ArmResult] = {}
    histories: Dict[str, List[dict]] = {}
    for loss in losses:
        lcfg = replace(cfg, loss=loss)
        model, hist = train_model(train, lcfg, depth,
                                  on_epoch=(lambda row, loss=loss: on_epoch(loss, row)) if on_epoch else None,
                                  initial_loss=False)
        histories[loss] = hist
        weights = make_weights(lcfg, depth)
        train_scored = score_windows(model, train, weights, workers=workers)
        test_scored = score_windows(model, test, weights, workers=workers)
        for method in methods:
            report = select_threshold(method, train_scored)
            scored = _copy_scores(test_scored)
            classify(scored, report.threshold)
            name = ARM_NAMES[(loss, method)]
            arms[name] = ArmResult(name, loss, method, report, evaluate(scored), scored)
    return AblationResult(arms, histories)


@dataclass
class SeedOutcome:
    """One seed of a multi-seed sweep: both-loss ablation on a freshly rendered dataset."""
    seed: int
    result: AblationResult
    seconds: float

    def fpr_claim(self, weighted: str = "depCAE", unweighted: str = "anntThrOnly") -> bool:
        return self.result.arms[weighted].metrics.fpr <= self.result.arms[unweighted].metrics.fpr


def seed_sweep(profile, seeds: Sequence[int], cfg: TrainConfig, workdir,
               on_seed: Optional[Callable[[SeedOutcome], None]] = None) -> List[SeedOutcome]:
    """Render one benchmark per seed and run the four-arm ablation on it.

    Data seed and training seed are the same number, so a seed names the
    whole experiment.
    """
    from depcae.benchmark import make_benchmark

    out = []
    for seed in seeds:
        t0 = time.perf_counter()
        root = Path(workdir) / f"seed{seed}"
        make_benchmark(profile, seed, root)
        result = ablation_run(root, replace(cfg, seed=seed))
        outcome = SeedOutcome(seed, result, time.perf_counter() - t0)
        out.append(outcome)
        if on_seed:
            on_seed(outcome)
    return out

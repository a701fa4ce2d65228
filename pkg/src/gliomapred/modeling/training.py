"""Training, inference, head gradient checks and checkpoints."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .. import defaults
from .backbones import BackboneSpec
from .network import FusionModel, HeadConfig, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gliomapred-checkpoint/1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = defaults.LEARNING_RATE
    batch_size: int = defaults.BATCH_SIZE
    epochs: int = defaults.EPOCHS
    seed: int = defaults.SEED
    optimizer: str = "adam"
    loss: str = "categorical_crossentropy"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.optimizer != "adam" or self.loss != "categorical_crossentropy":
            raise ValueError("only Adam with categorical cross-entropy is supported")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def to_dict(self):
        return asdict(self)


@dataclass
class Prediction:
    probabilities: np.ndarray
    labels: np.ndarray


# --------------------------------------------------------------------------
# data plumbing


def _pixels(stack):
    return stack.pixels if hasattr(stack, "pixels") else stack


def sample_tensors(samples, stacks, task: str):
    """(images N x 3 x H x W, tabular N x T, labels N) for ``samples``."""
    images = np.stack([_pixels(stacks[s.slice_stack_ref]) for s in samples]).astype(np.float32)
    images = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    tabular = torch.tensor([s.tabular for s in samples], dtype=torch.float32)
    labels = torch.tensor([s.labels.for_task(task) for s in samples], dtype=torch.long)
    return images, tabular, labels


class FeatureCache:
    """Pooled features of frozen backbones, memoized per sample.

    A frozen trunk is a fixed function of (backbone, weights, init seed), so
    features computed once can be reused by every trial sharing it.
    """

    def __init__(self, batch_size: int = 32):
        self.batch_size = batch_size
        self._store: dict[tuple, dict[str, torch.Tensor]] = {}

    @staticmethod
    def key(model: FusionModel):
        spec = model.backbone_spec
        seed = model.seed if spec.weights == "random" else None
        return (spec.id, spec.weights, seed)

    def features(self, model: FusionModel, samples, stacks) -> torch.Tensor:
        if not model.frozen:
            raise ValueError("feature caching is only valid for frozen backbones")
        table = self._store.setdefault(self.key(model), {})
        todo = [s.slice_stack_ref for s in samples if s.slice_stack_ref not in table]
        todo = list(dict.fromkeys(todo))
        if todo:
            was_training = model.training
            model.eval()
            with torch.no_grad():
                for start in range(0, len(todo), self.batch_size):
                    refs = todo[start : start + self.batch_size]
                    imgs = np.stack([_pixels(stacks[r]) for r in refs]).astype(np.float32)
                    imgs = torch.from_numpy(imgs).permute(0, 3, 1, 2)
                    feats = model.features(imgs)
                    for r, f in zip(refs, feats):
                        table[r] = f.clone()
            model.train(was_training)
        return torch.stack([table[s.slice_stack_ref] for s in samples])

    def clear(self):
        self._store.clear()


def _batches(n: int, batch_size: int, generator: torch.Generator, avoid_singleton: bool):
    perm = torch.randperm(n, generator=generator)
    chunks = list(torch.split(perm, batch_size))
    # batch norm cannot normalize a batch of one
    if avoid_singleton and len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = torch.cat([chunks[-2], chunks.pop()])
    return chunks


# --------------------------------------------------------------------------
# training


def train(model: FusionModel, train_samples, val_samples, config: TrainConfig, stacks,
          cache: FeatureCache | None = None):
    """Fit ``model`` with Adam on categorical cross-entropy.

    Frozen backbones are run once per sample (through ``cache``) and only the
    head is optimized; this is numerically the same as running the frozen
    trunk inside every step.

    Returns:
        ``(model, TrainHistory)``; the model is updated in place.
    """
    if not train_samples or not val_samples:
        raise ValueError("training and validation partitions must be non-empty")
    task = model.task
    y_tr =torch.tensor([s.labels.for_task(task) for s in train_samples])
    y_va = torch.tensor([s.labels.for_task(task) for s in val_samples])
    for y in (y_tr, y_va):
        if y.min() < 0 or y.max() >= model.n_classes:
            raise ValueError(f"labels outside [0, {model.n_classes})")

    if model.frozen:
        cache = cache if cache is not None else FeatureCache()
        x_tr = cache.features(model, train_samples, stacks)
        x_va = cache.features(model, val_samples, stacks)
        tab_tr = torch.tensor([s.tabular for s in train_samples], dtype=torch.float32)
        tab_va = torch.tensor([s.tabular for s in val_samples], dtype=torch.float32)
        forward = model.head_logits
    else:
        x_tr, tab_tr, _ = sample_tensors(train_samples, stacks, task)
        x_va, tab_va, _ = sample_tensors(val_samples, stacks, task)
        forward = model.forward

    params = [p for p in model.parameters() if p.requires_grad]
    history = TrainHistory()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = torch.Generator().manual_seed(config.seed)
        optim = torch.optim.Adam(params, lr=config.learning_rate)
        avoid_singleton = model.head_config.bn_layers > 0
        for epoch in range(config.epochs):
            model.train()
            total_loss, correct = 0.0, 0
            for b, idx in enumerate(_batches(len(y_tr), config.batch_size, gen, avoid_singleton)):
                logits = forward(x_tr[idx], tab_tr[idx])
                loss = F.cross_entropy(logits, y_tr[idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch {b} "
                        f"(lr={config.learning_rate}, batch_size={config.batch_size})"
                    )
                optim.zero_grad()
                loss.backward()
                optim.step()
                total_loss += loss.item() * len(idx)
                correct += int((logits.argmax(1) == y_tr[idx]).sum())
            history.train_loss.append(total_loss / len(y_tr))
            history.train_accuracy.append(correct / len(y_tr))

            model.eval()
            with torch.no_grad():
                logits = forward(x_va, tab_va)
                history.val_loss.append(float(F.cross_entropy(logits, y_va)))
                history.val_accuracy.append(float((logits.argmax(1) == y_va).float().mean()))
            log.debug("epoch %d: %s", epoch, {k: v[-1] for k, v in history.to_dict().items()})
    model.eval()
    return model, history


def argmax_labels(probabilities) -> np.ndarray:
    """Row-wise argmax; ties go to the lower class index."""
    return np.argmax(np.asarray(probabilities), axis=1)


def predict(model: FusionModel, samples, stacks, cache: FeatureCache | None = None) -> Prediction:
    model.eval()
    tab = torch.tensor([s.tabular for s in samples], dtype=torch.float32)
    with torch.no_grad():
        if model.frozen and cache is not None:
            logits = model.head_logits(cache.features(model, samples, stacks), tab)
        else:
            images, _, _ = sample_tensors(samples, stacks, model.task)
            logits = model(images, tab)
        probs = torch.softmax(logits.double(), dim=1).numpy()
    return Prediction(probs, argmax_labels(probs))


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheck:
    max_rel_error: float
    n_checked: int
    backbone_grad_max: float


def gradient_check(model: FusionModel, batch, n_params: int = 40, step: float = 1e-4,
                   seed: int = 0) -> GradCheck:
    """Compare analytic head gradients with central finite differences.

    ``batch`` is ``(images, tabular, labels)``. The head is copied to float64
    and evaluated in inference mode, so dropout is off and batch norm uses
    its running statistics.
    """
    images, tabular, labels = batch
    model.eval()

    # backbone gradient under the real model (zero when frozen)
    model.zero_grad(set_to_none=True)
    F.cross_entropy(model(images, tabular), labels).backward()
    trunk_grads = [p.grad for p in model.trunk.parameters() if p.grad is not None]
    backbone_grad_max = max((float(g.abs().max()) for g in trunk_grads), default=0.0)
    model.zero_grad(set_to_none=True)

    with torch.no_grad():
        feats = model.features(images).double()
    inputs = torch.cat([feats, tabular.double()], dim=1)
    head = copy.deepcopy(model.head).double().eval()

    def loss_fn():
        return F.cross_entropy(head(inputs), labels)

    loss = loss_fn()
    head.zero_grad()
    loss.backward()
    params = [p for p in head.parameters()]
    for p in params:
        if not torch.all(torch.isfinite(p.grad)):
            raise FloatingPointError("non-finite analytic gradient")

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            p = params[pi].view(-1)
            i = int(flat - offsets[pi])
            orig = p[i].item()
            p[i] = orig + step
            up = loss_fn().item()
            p[i] = orig - step
            down = loss_fn().item()
            p[i] = orig
            numeric = (up - down) / (2 * step)
            analytic = params[pi].grad.view(-1)[i].item()
            if not np.isfinite(numeric):
                raise FloatingPointError("non-finite numerical gradient")
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return GradCheck(worst, len(picks), backbone_grad_max)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: FusionModel, path, train_config: TrainConfig | None = None,
                    age_normalizer=None, extra: dict | None = None) -> Path:
    """Self-describing archive: configs, weights, cohort constants, seed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "backbone": asdict(model.backbone_spec),
        "head": asdict(model.head_config),
        "n_classes": model.n_classes,
        "tabular_width": model.tabular_width,
        "seed": model.seed,
        "train_config": asdict(train_config) if train_config else None,
        "age_normalizer": asdict(age_normalizer) if age_normalizer else None,
        "extra": extra or {},
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Returns ``(model, payload)``; weights come from the archive, never downloaded."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    spec = BackboneSpec(**{**payload["backbone"], "weights": "random"})
    model = build_model(spec, HeadConfig(**payload["head"]), payload["n_classes"],
                        payload["tabular_width"], payload["seed"])
    model.backbone_spec = BackboneSpec(**payload["backbone"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload

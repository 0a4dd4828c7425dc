"""Three-step training: single-branch pretraining, cross-wired base training,
k-shot fine-tuning; plus the optimizer, schedule, checkpoints and evaluation
loops shared by all steps.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    DatasetIndex,
    Detection,
    EpisodeBatch,
    ImageStore,
    crop_support,
    evaluate_ap50,
    sample_episode,
)
from .detector import FewShotDetector
from .tensor import Tensor, zero_grads


class TrainingDiverged(RuntimeError):
    pass


# -- optimizer --------------------------------------------------------------------


class MilestoneSchedule:
    """Constant learning rate decimated at each milestone step."""

    def __init__(self, base_lr, total_steps, milestone_frac=0.6, factor=0.1, milestones=None):
        self.base_lr = base_lr
        if milestones is None:
            milestones = [int(round(total_steps * milestone_frac))]
        self.milestones = sorted(milestones)
        self.factor = factor

    def lr_at(self, step):
        passed = sum(1 for m in self.milestones if step >= m)
        return self.base_lr * self.factor ** passed


class AdamW:
    """Adam with decoupled weight decay; skips parameters without gradients."""

    def __init__(self, params: dict, lr=2e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.moments = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for name, p in self.params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.moments[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def clip_global_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# -- checkpoints --------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FCTK"
CHECKPOINT_VERSION = 1
_META_PREFIX = "__meta__."


def config_hash_bytes(text: str) -> np.ndarray:
    digest = hashlib.sha256(text.encode("utf-8")).digest()[:8]
    return np.frombuffer(digest, dtype=np.uint8).astype(np.float64)


@dataclass
class Checkpoint:
    params: dict                      # name -> float64 array
    step: int = 0
    config_hash: np.ndarray = field(default_factory=lambda: np.zeros(8))

    @classmethod
    def from_model(cls, model, step=0, config_hash=None):
        params = {name: p.data.copy() for name, p in model.named_params()}
        ch = config_hash if config_hash is not None else np.zeros(8)
        return cls(params, step, np.asarray(ch, dtype=np.float64))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary layout: magic "FCTK", u32 version, then per-tensor records of
    (u64 name length, name bytes, u64 rank, u64 extents..., f64 values...),
    all little-endian.  Metadata rides along as reserved-name records."""
    records = dict(ckpt.params)
    records[_META_PREFIX + "step"] = np.array([float(ckpt.step)])
    records[_META_PREFIX + "config_hash"] = np.asarray(ckpt.config_hash, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in records.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    records = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
        records[name] = arr
    step = int(records.pop(_META_PREFIX + "step", np.zeros(1))[0])
    config_hash = records.pop(_META_PREFIX + "config_hash", np.zeros(8))
    return Checkpoint(records, step, config_hash)


# -- training loops ------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 2e-4
    weight_decay: float = 1e-4
    milestone_frac: float = 0.6
    clip_norm: float = 1.0
    b_support: int = 2


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)   # (step, loss, lr)

    def add(self, step, loss, lr):
        self.rows.append((step, float(loss), float(lr)))

    def losses(self):
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("step,loss,lr\n")
            for step, loss, lr in self.rows:
                f.write(f"{step},{loss:.6f},{lr:.8f}\n")


def _run_steps(model, cfg: TrainConfig, make_loss, seed_tag) -> TrainLog:
    params = model.param_dict()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = MilestoneSchedule(cfg.lr, cfg.steps, cfg.milestone_frac)
    log = TrainLog()
    for step in range(cfg.steps):
        try:
            loss = make_loss(step)
            value = loss.item()
        except FloatingPointError as e:
            raise TrainingDiverged(f"{seed_tag}: non-finite loss at step {step}: {e}") from e
        if not math.isfinite(value):
            raise TrainingDiverged(f"{seed_tag}: loss diverged at step {step} ({value})")
        zero_grads(params.values())
        loss.backward()
        clip_global_norm(params.values(), cfg.clip_norm)
        opt.step(sched.lr_at(step))
        log.add(step, value, sched.lr_at(step))
    return log


def pretrain_single_branch(model: FewShotDetector, index: DatasetIndex, store: ImageStore,
                           cfg: TrainConfig, seed) -> TrainLog:
    """Step 1: multi-class detector on base-class annotations only."""
    rng = np.random.default_rng(seed)
    base = set(index.base_classes)
    eligible = sorted({a.image_id for a in index.annotations if a.class_id in base})
    if not eligible:
        raise ValueError("no image carries a base-class annotation")

    def make_loss(step):
        image_id = int(rng.choice(eligible))
        anns = [a for a in index.annotations_for(image_id) if a.class_id in base]
        boxes = np.stack([a.box.as_array() for a in anns])
        labels = np.array([a.class_id for a in anns])
        loss, _ = model.single_loss(store.get(image_id)[None], boxes, labels)
        return loss

    return _run_steps(model, cfg, make_loss, f"pretrain(seed={seed})")


def _episode_classes(index: DatasetIndex, classes, b_s, allow_same_image):
    out = []
    for c in classes:
        n = len(index.instances_of(c))
        if n == 0:
            continue
        if allow_same_image or n >= b_s + 1:
            out.append(c)
    return out


def _episode_loss_fn(model, index, store, cfg, rng, classes, allow_same_image, b_s=None):
    b_s = b_s or cfg.b_support
    eligible = _episode_classes(index, classes, b_s, allow_same_image)
    if not eligible:
        raise ValueError("no class has enough instances for episodic training")

    def make_loss(step):
        c = int(eligible[int(rng.integers(len(eligible)))])
        episode = sample_episode(
            index, store, c, b_s, rng,
            support_size=model.plan.support_size, allow_same_image=allow_same_image,
        )
        loss, _ = model.episode_loss(episode, train=True)
        return loss

    return make_loss


def train_two_branch(model: FewShotDetector, index: DatasetIndex, store: ImageStore,
                     cfg: TrainConfig, seed, init: Checkpoint | None = None) -> TrainLog:
    """Step 2: episodic training over base classes, seeded from step 1."""
    rng = np.random.default_rng(seed)
    if init is not None:
        model.load_state(init.params)
        model.reinit_new_parameters(rng)
    make_loss = _episode_loss_fn(model, index, store, cfg, rng, index.base_classes,
                                 allow_same_image=False)
    return _run_steps(model, cfg, make_loss, f"train-base(seed={seed})")


def finetune_k_shot(model: FewShotDetector, subset: DatasetIndex, store: ImageStore,
                    k: int, cfg: TrainConfig, seed, init: Checkpoint | None = None) -> TrainLog:
    """Step 3: same episodic objective over the k-shot base+novel subset."""
    for c in subset.all_classes:
        have = len(subset.instances_of(c))
        if have != k:
            raise ValueError(f"k-shot subset malformed: class {c} has {have} != {k} boxes")
    rng = np.random.default_rng(seed)
    if init is not None:
        model.load_state(init.params)
    b_s = min(cfg.b_support, k)
    make_loss = _episode_loss_fn(model, subset, store, cfg, rng, subset.all_classes,
                                 allow_same_image=True, b_s=b_s)
    return _run_steps(model, cfg, make_loss, f"finetune(seed={seed},k={k})")


# -- evaluation loops -----------------------------------------------------------------


def support_crops_for_class(index: DatasetIndex, store: ImageStore, class_id, support_size,
                            limit=None) -> np.ndarray:
    anns = index.instances_of(class_id)
    if limit is not None:
        anns = anns[:limit]
    if not anns:
        raise ValueError(f"no support instances for class {class_id}")
    return np.stack([crop_support(store.get(a.image_id), a.box, support_size) for a in anns])


def evaluate_two_branch(model: FewShotDetector, eval_index: DatasetIndex, eval_store: ImageStore,
                        support_index: DatasetIndex, support_store: ImageStore,
                        class_ids, score_thresh=None):
    """Episodic evaluation: every eval image is queried against each class's
    full support set; returns (detections, per-class AP50, mean AP50)."""
    detections = []
    for c in class_ids:
        supports = support_crops_for_class(support_index, support_store, c,
                                           model.plan.support_size)
        for rec in eval_index.images:
            episode = EpisodeBatch(
                class_id=c,
                query_image=eval_store.get(rec.id)[None],
                gt_boxes=np.zeros((0, 4)),
                support_images=supports,
                query_id=rec.id,
            )
            for det in model.detect_episode(episode, score_thresh=score_thresh):
                detections.append(Detection(rec.id, c, det.score, det.box))
    per_class, mean = evaluate_ap50(detections, eval_index, class_ids)
    return detections, per_class, mean


def evaluate_single_branch(model: FewShotDetector, eval_index: DatasetIndex,
                           eval_store: ImageStore, class_ids):
    detections = []
    for rec in eval_index.images:
        for det in model.detect_single(eval_store.get(rec.id)[None], class_ids):
            detections.append(Detection(rec.id, det.class_id, det.score, det.box))
    per_class, mean = evaluate_ap50(detections, eval_index, class_ids)
    return detections, per_class, mean

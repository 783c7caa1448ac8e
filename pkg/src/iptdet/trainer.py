"""Finetuning loop: SGD with momentum, cosine learning-rate schedule,
global gradient clipping, extractor freezing, and checkpoint selection on
validation frame-level macro-F1."""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import ClassMap, Sample, class_weights as compute_class_weights
from .encoder import StubEncoder, set_extractor_frozen
from .losses import LossWeights, total_loss
from .metrics import DEFAULT_ONSET_TOLERANCE, EvalReport, build_report, frame_f1
from .model import VARIANTS, build_model
from .postprocess import DecodeConfig, binarize_onsets, decode_events, decode_frames


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 10
    grad_clip_norm: float = 3.0
    epochs: int = 50
    seed: int = 0
    freeze_extractor: bool = True
    variant: str = "MERTech"
    dataset: str = "toy"
    fold: int = 0
    max_steps: int | None = None
    early_stop_patience: int = 10
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.grad_clip_norm <= 0:
            raise ValueError("invalid training hyperparameters")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Anneal from base_lr at step 0 towards 0 at the final step."""
    if total_steps <= 1:
        return base_lr
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def clip_gradients(parameters, max_norm: float = 3.0) -> float:
    """Scale gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm; raises on non-finite gradients.
    """
    params = [p for p in parameters if p.grad is not None]
    if not params:
        return 0.0
    total = torch.sqrt(sum((p.grad.detach() ** 2).sum() for p in params))
    if not torch.isfinite(total):
        bad = [i for i, p in enumerate(params) if not torch.isfinite(p.grad).all()]
        raise RuntimeError(f"non-finite gradient in parameter group(s) {bad}")
    norm = float(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad.mul_(scale)
    return norm


def _stack_batch(samples: list[Sample], backend, cache: dict | None = None):
    """Encode a batch of samples: layers (13, B, T, 768) plus target tensors."""
    stacks = []
    for s in samples:
        key = (s.source_id, s.window_offset)
        if cache is not None and key in cache:
            stacks.append(cache[key])
        else:
            st = backend.encode(s.waveform).layers
            if cache is not None:
                cache[key] = st
            stacks.append(st)
    layers = torch.stack(stacks, dim=1)  # (13, B, T, 768)
    targets = {
        "ipt": torch.from_numpy(np.stack([s.labels.ipt for s in samples])).float(),
        "pitch": torch.from_numpy(np.stack([s.labels.pitch for s in samples])).float(),
        "onset": torch.from_numpy(np.stack([s.labels.onset for s in samples])).float(),
        "mask": torch.from_numpy(np.stack([s.labels.mask for s in samples])).float(),
    }
    return layers, targets


def train(
    config: TrainConfig,
    train_samples: list[Sample],
    class_map: ClassMap,
    backend,
    output_dir,
    val_samples: list[Sample] | None = None,
) -> Path:
    """Run the finetuning loop; returns the best checkpoint directory.

    A JSON-lines log (step, lr, loss terms, gradient norm) is written next
    to the checkpoint.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    model = build_model(config.variant, class_map)

    set_extractor_frozen(backend, config.freeze_extractor)
    params = list(model.parameters())
    encoder_trainable = config.variant != "IPT_probing"
    for m in backend.trainable_modules():
        if encoder_trainable:
            params += [p for p in m.parameters() if p.requires_grad]
        else:
            for p in m.parameters():
                p.requires_grad_(False)

    cw = torch.from_numpy(
        compute_class_weights([s.labels for s in train_samples], class_map.n_ipt)
    ).float()

    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    # Stub features carry no gradients, so encode once per sample.
    cache = {} if isinstance(backend, StubEncoder) else None
    rng = random.Random(config.seed)
    has_pitch = class_map.has_pitch

    log_path = output_dir / "train_log.jsonl"
    best_score = -1.0
    best_dir = output_dir / "best"
    epochs_since_best = 0
    step = 0
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(config.epochs):
            if step >= total_steps:
                break
            order = list(range(len(train_samples)))
            rng.shuffle(order)
            model.train()
            for b0 in range(0, len(order), config.batch_size):
                if step >= total_steps:
                    break
                batch = [train_samples[i] for i in order[b0:b0 + config.batch_size]]
                layers, targets = _stack_batch(batch, backend, cache)
                targets["has_pitch"] = has_pitch

                lr = cosine_lr(config.lr, step, total_steps)
                for g in opt.param_groups:
                    g["lr"] = lr

                opt.zero_grad()
                post = model(layers)
                losses = total_loss(post, targets, config.loss_weights, cw)
                if not torch.isfinite(losses["total"]):
                    raise RuntimeError(
                        f"non-finite loss at step {step} "
                        f"(batch of {[s.source_id for s in batch]})"
                    )
                losses["total"].backward()
                pre_norm = clip_gradients(params, config.grad_clip_norm)
                opt.step()

                log.write(json.dumps({
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": float(losses["total"].detach()),
                    "loss_ipt": float(losses["ipt"].detach()),
                    "loss_pitch": float(losses["pitch"].detach()),
                    "loss_onset": float(losses["onset"].detach()),
                    "grad_norm_preclip": pre_norm,
                    "grad_norm_postclip": min(pre_norm, config.grad_clip_norm),
                }) + "\n")
                step += 1

            val = val_samples if val_samples else train_samples
            score = _frame_macro_f1(model, backend, val, cache)
            if score > best_score:
                best_score = score
                epochs_since_best = 0
                save_checkpoint(best_dir, model, class_map, config)
            else:
                epochs_since_best += 1
                if epochs_since_best >= config.early_stop_patience:
                    break
    if not best_dir.exists():
        save_checkpoint(best_dir, model, class_map, config)
    return best_dir


@torch.no_grad()
def _frame_macro_f1(model, backend, samples, cache=None) -> float:
    model.eval()
    preds, refs, masks = [], [], []
    for s in samples:
        layers, _ = _stack_batch([s], backend, cache)
        post = model(layers)
        preds.append(decode_frames(post.y_ipt[0].numpy()))
        refs.append(s.labels.ipt)
        masks.append(s.labels.mask)
    _, macro, _ = frame_f1(
        np.concatenate(preds), np.concatenate(refs), np.concatenate(masks)
    )
    return macro


def save_checkpoint(path, model, class_map: ClassMap, config: TrainConfig):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "model.pt")
    with torch.no_grad():
        lw = model.layer_weights.normalized().tolist()
    cfg = asdict(config)
    cfg["loss_weights"] = asdict(config.loss_weights)
    meta = {
        "class_map": class_map.to_dict(),
        "variant": config.variant,
        "layer_weights": lw,
        "config": cfg,
    }
    with open(path / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint directory -> (model, class_map, meta)."""
    path = Path(path)
    with open(path / "meta.json", encoding="utf-8") as f:
        meta = json.load(f)
    class_map = ClassMap.from_dict(meta["class_map"])
    model = build_model(meta["variant"], class_map)
    model.load_state_dict(torch.load(path / "model.pt", weights_only=True))
    model.eval()
    return model, class_map, meta


@torch.no_grad()
def predict_posteriors(model, backend, samples: list[Sample], cache=None):
    """Concatenate per-window posteriors per recording (window order by
    offset). Returns {source_id: {"y_ipt", "y_pitch", "onset", "mask"}}."""
    model.eval()
    by_source: dict[str, list[Sample]] = {}
    for s in samples:
        by_source.setdefault(s.source_id, []).append(s)
    out = {}
    for sid, group in by_source.items():
        group = sorted(group, key=lambda s: s.window_offset)
        chunks = {"y_ipt": [], "y_pitch": [], "onset": [], "mask": []}
        for s in group:
            layers, _ = _stack_batch([s], backend, cache)
            post = model(layers)
            chunks["y_ipt"].append(post.y_ipt[0].numpy())
            chunks["y_pitch"].append(
                post.y_pitch[0].numpy() if post.y_pitch is not None else None
            )
            chunks["onset"].append(
                post.onset[0, :, 0].numpy() if post.onset is not None else None
            )
            chunks["mask"].append(s.labels.mask)
        out[sid] = {
            "y_ipt": np.concatenate(chunks["y_ipt"]),
            "y_pitch": (
                np.concatenate(chunks["y_pitch"]) if chunks["y_pitch"][0] is not None else None
            ),
            "onset": (
                np.concatenate(chunks["onset"]) if chunks["onset"][0] is not None else None
            ),
            "mask": np.concatenate(chunks["mask"]),
        }
    return out


def evaluate_checkpoint(
    checkpoint_dir,
    samples: list[Sample],
    backend,
    decode_cfg: DecodeConfig = DecodeConfig(),
    tolerance: float = DEFAULT_ONSET_TOLERANCE,
    ref_events_by_source: dict | None = None,
) -> EvalReport:
    """Score a checkpoint on a split; the onset gate is applied only for
    the full (post-processed) variant."""
    if not samples:
        raise ValueError("empty evaluation split")
    model, class_map, meta = load_checkpoint(checkpoint_dir)
    if class_map.n_ipt != samples[0].labels.ipt.shape[1]:
        raise ValueError("class map mismatch between checkpoint and dataset")
    use_gate = meta["variant"] == "MERTech"

    cache = {} if isinstance(backend, StubEncoder) else None
    posts = predict_posteriors(model, backend, samples, cache)

    by_source: dict[str, list[Sample]] = {}
    for s in samples:
        by_source.setdefault(s.source_id, []).append(s)

    pred_grids, ref_grids, masks = [], [], []
    pred_events, ref_events = [], []
    for sid, group in by_source.items():
        group = sorted(group, key=lambda s: s.window_offset)
        p = posts[sid]
        valid = p["mask"].astype(bool)
        y_ipt = p["y_ipt"] * valid[:, None]
        pred_grids.append(decode_frames(y_ipt, decode_cfg.frame_threshold))
        ref_ipt = np.concatenate([s.labels.ipt for s in group])
        ref_grids.append(ref_ipt)
        masks.append(p["mask"])

        if use_gate and p["onset"] is not None:
            gate = binarize_onsets(p["onset"], decode_cfg.onset_threshold)
        else:
            gate = np.ones(len(y_ipt), dtype=np.int8)
        pred_events.extend(decode_events(y_ipt, gate, decode_cfg, class_map.frame_rate))

        if ref_events_by_source is not None:
            ref_events.extend(ref_events_by_source[sid])
        else:
            ref_events.extend(
                decode_events(
                    ref_ipt.astype(float), np.ones(len(ref_ipt), dtype=np.int8),
                    decode_cfg, class_map.frame_rate,
                )
            )
    return build_report(
        pred_grids, ref_grids, pred_events, ref_events, class_map, tolerance,
        extra={"variant": meta["variant"], "n_recordings": len(by_source)},
        masks=masks,
    )

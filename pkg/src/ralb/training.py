"""Clean contrastive pretraining and the adversarial fine-tuning loops."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from ralb import core_math as cm
from ralb.attacks import AttackObjective, AttackSpec, build_context, per_sample_objective, pgd_attack
from ralb.datagen import Dataset, class_templates
from ralb.encoders import ModelState, StateError, encode_image, encode_tokens, tokenize_batch

METHODS = ("qt-aft", "qt-aft-label", "fare", "tecoa", "clean-pretrain")
_CONTRASTIVE = {"qt-aft", "qt-aft-label", "clean-pretrain"}


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainConfig:
    method: str = "qt-aft"
    epochs: int = 10
    batch_size: int = 64
    lr0: float = 1e-3
    weight_decay: float = 1e-4
    lam: float = 10.0
    attack: AttackSpec = field(default_factory=AttackSpec)
    seed: int = 0
    cosine: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if self.method in _CONTRASTIVE and self.batch_size < 2:
            raise ValueError(f"{self.method} is contrastive and needs batch_size >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def inner_objective(self) -> AttackObjective:
        return {
            "qt-aft": AttackObjective("qt-aft", self.lam),
            "qt-aft-label": AttackObjective("qt-aft", self.lam),
            "fare": AttackObjective("unsup"),
            "tecoa": AttackObjective("sup-label"),
        }[self.method]

    def to_json(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "attack" in d and isinstance(d["attack"], dict):
            d["attack"] = AttackSpec.from_json(d["attack"])
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


# Full-scale GPU recipe, kept for reference; desk defaults live in TrainConfig.
GPU_PRESET = dict(epochs=2, batch_size=128, lr0=1e-5, weight_decay=1e-4, lam=10.0,
                    attack=AttackSpec(random_start=True))


@dataclass
class TrainLogRecord:
    step: int
    lr: float
    inner: float
    outer: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _param_groups(params, weight_decay):
    decay = [p for p in params if p.ndim >= 2]
    no_decay = [p for p in params if p.ndim < 2]
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for lo in range(0, n - batch_size + 1, batch_size):
        yield order[lo : lo + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def train(state: ModelState, data: Dataset, config: TrainConfig, log=None) -> tuple[ModelState, list[TrainLogRecord]]:
    """Run ``config.method`` on ``data``; returns a new state and one log record per step.

    Adversarial methods update only the vision tower; the text tower, the
    temperature and the snapshot stay bitwise fixed. ``clean-pretrain``
    minimises the symmetric contrastive loss and updates all three.
    """
    state = state.copy()
    method = config.method
    pretrain = method == "clean-pretrain"
    if not pretrain and state.vision_orig is None:
        raise StateError("adversarial fine-tuning needs snapshot(state) first")
    if method in ("qt-aft", "clean-pretrain") and not data.captions:
        raise ValueError(f"{method} needs captions")

    n = len(data)
    per_epoch = steps_per_epoch(n, config.batch_size)
    total = per_epoch * config.epochs
    records: list[TrainLogRecord] = []
    if total == 0:
        return state, records

    torch.manual_seed(config.seed)
    if pretrain:
        params = state.theta() + state.phi()
        groups = _param_groups(params, config.weight_decay) + [{"params": [state.log_tau], "weight_decay": 0.0}]
    else:
        groups = _param_groups(state.theta(), config.weight_decay)
        for p in state.phi() + [state.log_tau]:
            p.requires_grad_(False)
    opt = torch.optim.AdamW(groups, lr=config.lr0, betas=(0.9, 0.999), eps=1e-8, foreach=False)

    images = torch.as_tensor(data.images)
    labels = torch.as_tensor(data.labels, dtype=torch.long)
    texts = [c.raw_text for c in data.captions] if data.captions else None
    if method == "qt-aft-label":
        texts = [class_templates(data.class_names)[int(y)] for y in data.labels]
    token_ids = tokenize_batch(state, texts) if texts is not None else None
    templates = None
    if method == "tecoa":
        templates = tokenize_batch(state, class_templates(data.class_names))
    attack = replace(config.attack, objective=config.inner_objective) if not pretrain else None

    t0 = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        for idx in _batches(n, config.batch_size, config.seed, epoch):
            idx_t = torch.as_tensor(idx)
            x = images[idx_t]
            ids = token_ids[idx_t] if token_ids is not None else None
            lr = cosine_lr(step, total, config.lr0) if config.cosine else config.lr0
            for g in opt.param_groups:
                g["lr"] = lr
            if pretrain:
                _, img = encode_image(state, x)
                _, txt = encode_tokens(state, ids)
                loss = cm.clip_loss(img, txt, state.tau)
                inner = float("nan")
            else:
                adv = pgd_attack(state, x, attack, labels=labels[idx_t], captions=ids, templates=templates,
                                 seed=config.seed * 1_000_003 + step, sample_ids=idx.tolist())
                inner = float(adv.best_values.sum())
                ctx = build_context(state, x, attack.objective, labels[idx_t], ids, templates)
                loss = per_sample_objective(state, adv.perturbed, attack.objective, ctx).sum()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if pretrain:
                state.clamp_temperature()
            else:
                state.finetune_steps += 1
            rec = TrainLogRecord(step, lr, inner, float(loss.detach()), time.perf_counter() - t0)
            records.append(rec)
            if log is not None:
                log(rec)
            step += 1
    for p in state.phi() + [state.log_tau]:
        p.requires_grad_(True)
    return state, records


@dataclass
class SweepRow:
    lam: float
    clean_acc: float
    robust_acc: float


def lambda_sweep(state: ModelState, data: Dataset, lambdas, config: TrainConfig, eval_sets, eval_spec: AttackSpec,
                 n_eval: int | None = None, seed: int = 0) -> list[SweepRow]:
    """Train one QT-AFT model per lambda from the same start; mean clean/robust accuracy over ``eval_sets``."""
    from ralb.evaluation import eval_clean, eval_robust

    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("lambda sweep needs at least one lambda")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambdas must be >= 0")
    rows = []
    for lam in lambdas:
        model, _ = train(state, data, replace(config, method="qt-aft", lam=float(lam)))
        clean = [eval_clean(model, ds, class_templates(ds.class_names)) for ds in eval_sets]
        robust = [eval_robust(model, ds, class_templates(ds.class_names), eval_spec, n_subsample=n_eval, seed=seed)
                  for ds in eval_sets]
        rows.append(SweepRow(float(lam), float(np.mean(clean)), float(np.mean(robust))))
    return rows

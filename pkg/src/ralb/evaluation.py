"""Zero-shot clean / robust accuracy and method comparison reports."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ralb import core_math as cm
from ralb.attacks import AttackSpec, _text_embs, ensemble_attack, pgd_attack
from ralb.datagen import Dataset
from ralb.encoders import ModelState, encode_image

CHUNK = 250


def _templates_for(state: ModelState, ds: Dataset, templates) -> torch.Tensor:
    t = _text_embs(state, templates)
    if t.shape[0] != len(ds.class_names):
        raise ValueError(f"{t.shape[0]} templates for {len(ds.class_names)} classes")
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if int(ds.labels.max()) >= t.shape[0] or int(ds.labels.min()) < 0:
        raise ValueError("dataset labels outside the template range")
    return t


def subsample_indices(n: int, n_subsample: int | None, seed: int) -> np.ndarray:
    if n_subsample is None or n_subsample >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng([seed, n]).choice(n, size=n_subsample, replace=False))


def predictions(state: ModelState, images, template_embs) -> torch.Tensor:
    with torch.no_grad():
        _, emb = encode_image(state, torch.as_tensor(images))
        return cm.predict(cm.zero_shot_logits(emb, template_embs))


def eval_clean(state: ModelState, ds: Dataset, templates) -> float:
    t = _templates_for(state, ds, templates)
    preds = predictions(state, ds.images, t)
    return float(np.mean(preds.numpy() == ds.labels, dtype=np.float64))


def robust_correct(state: ModelState, ds: Dataset, templates, spec, n_subsample: int | None = None, seed: int = 0,
                   workers: int = 1) -> np.ndarray:
    """Per-sample robustness flags on the (optionally subsampled) dataset.

    ``spec`` is one AttackSpec or a list (evaluated as a per-sample union).
    Work is split into fixed chunks so the worker count never changes results.
    """
    t = _templates_for(state, ds, templates)
    idx = subsample_indices(len(ds), n_subsample, seed)
    images = torch.as_tensor(ds.images)
    labels = torch.as_tensor(ds.labels, dtype=torch.long)

    def run(chunk):
        x, y = images[chunk], labels[chunk]
        if isinstance(spec, AttackSpec):
            adv = pgd_attack(state, x, spec, labels=y, templates=t, seed=seed, sample_ids=chunk.tolist()).perturbed
            return (predictions(state, adv, t) == y).numpy()
        return (~ensemble_attack(state, x, y, t, spec, seed=seed, sample_ids=chunk.tolist()).broken).numpy()

    chunks = [idx[i : i + CHUNK] for i in range(0, len(idx), CHUNK)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def eval_robust(state: ModelState, ds: Dataset, templates, spec, n_subsample: int | None = None, seed: int = 0,
                workers: int = 1) -> float:
    ok = robust_correct(state, ds, templates, spec, n_subsample, seed, workers)
    return float(np.mean(ok, dtype=np.float64))


@dataclass
class ReportRow:
    method: str
    dataset: str
    attack: str
    clean: float
    robust: float
    n: int
    seed: int
    zero_shot: bool


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def averages(self) -> dict:
        """Mean clean/robust accuracy per (method, attack) over zero-shot datasets."""
        out = {}
        for r in self.rows:
            if r.zero_shot:
                out.setdefault((r.method, r.attack), []).append((r.clean, r.robust))
        return {k: tuple(float(np.mean(v, axis=0)[i]) for i in range(2)) for k, v in sorted(out.items())}

    def lookup(self, method: str, dataset: str, attack: str) -> ReportRow:
        for r in self.rows:
            if (r.method, r.dataset, r.attack) == (method, dataset, attack):
                return r
        raise KeyError((method, dataset, attack))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "dataset", "attack", "clean_acc", "robust_acc", "n", "seed", "zero_shot"])
        for r in self.rows:
            w.writerow([r.method, r.dataset, r.attack, f"{r.clean:.6f}", f"{r.robust:.6f}", r.n, r.seed, int(r.zero_shot)])
        for (m, a), (c, rb) in self.averages().items():
            w.writerow([m, "avg-zero-shot", a, f"{c:.6f}", f"{rb:.6f}", "", "", 1])
        return buf.getvalue()

    def to_json(self) -> str:
        avg = [{"method": m, "attack": a, "clean_acc": c, "robust_acc": rb} for (m, a), (c, rb) in self.averages().items()]
        return json.dumps({"rows": [asdict(r) for r in self.rows], "zero_shot_averages": avg, "notes": self.notes},
                          indent=1, sort_keys=True)


def compare_methods(checkpoints: dict, datasets: dict, specs: dict, zero_shot=(), n_subsample: int | None = None,
                    seed: int = 0, workers: int = 1) -> EvalReport:
    """Clean and robust accuracy for every (method, dataset, attack); rows sorted by name."""
    from ralb.datagen import class_templates

    states = list(checkpoints.values())
    if any(s.config != states[0].config for s in states):
        raise ValueError("all checkpoints must share one encoder config")
    report = EvalReport()
    for method in sorted(checkpoints):
        state = checkpoints[method]
        for dname in sorted(datasets):
            ds = datasets[dname]
            templates = class_templates(ds.class_names)
            idx = subsample_indices(len(ds), n_subsample, seed)
            clean = eval_clean(state, ds.subset(idx), templates)
            for aname in sorted(specs):
                spec = specs[aname]
                if isinstance(spec, list) and len(templates) < 3 and any(s.objective.kind == "dlr" for s in spec):
                    report.notes.append(f"{method}/{dname}/{aname}: dlr replaced by cw (fewer than 3 classes)")
                robust = eval_robust(state, ds, templates, specs[aname], n_subsample, seed, workers)
                report.rows.append(ReportRow(method, dname, aname, clean, robust, len(idx), seed, dname in zero_shot))
    return report

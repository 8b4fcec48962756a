"""PGD under L-inf / L2 budgets with pluggable objectives, and the CE+DLR ensemble."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
import torch

from ralb import core_math as cm
from ralb.encoders import ModelState, StateError, encode_image, encode_texts, encode_tokens, tokenize_batch

OBJECTIVES = ("sup-label", "unsup", "sup-caps", "unsup+sup-label", "qt-aft", "dlr", "cw")
_NEEDS_LABELS = {"sup-label", "unsup+sup-label", "dlr", "cw"}
_NEEDS_TEXTS = {"sup-caps", "qt-aft"}
_NEEDS_ORIG = {"unsup", "unsup+sup-label", "qt-aft"}
_DLR_EPS = 1e-12


def parse_fraction(text) -> float:
    """'4/255' or '0.0156862...' -> float32-rounded python float; both spellings agree bitwise."""
    if isinstance(text, (int, float)):
        return float(np.float32(text))
    value = Fraction(str(text).strip())
    return float(np.float32(float(value)))


@dataclass(frozen=True)
class AttackObjective:
    kind: str = "sup-label"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown attack objective {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @classmethod
    def parse(cls, text: str, lam: float = 10.0) -> AttackObjective:
        aliases = {"ce": "sup-label", "tecoa": "sup-label", "fare": "unsup", "caps": "sup-caps", "qtaft": "qt-aft"}
        kind = aliases.get(text.lower(), text.lower())
        return cls(kind, lam if kind in ("qt-aft", "unsup+sup-label") else 0.0)


@dataclass(frozen=True)
class AttackSpec:
    norm: str = "Linf"
    epsilon: float = parse_fraction("4/255")
    step_size: float = parse_fraction("1/255")
    steps: int = 10
    random_start: bool = True
    objective: AttackObjective = AttackObjective()

    def __post_init__(self):
        if self.norm not in ("Linf", "L2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be > 0 when steps > 0")

    def key(self) -> int:
        """Stable 32-bit digest used to derive per-sample random streams.

        Only the norm enters: the random start is a unit draw scaled by epsilon,
        so runs that differ in epsilon or step count share their starting
        direction and best-iterate values stay comparable across them.
        """
        return int.from_bytes(hashlib.sha256(self.norm.encode()).digest()[:4], "little")

    def to_json(self) -> dict:
        return {
            "norm": self.norm, "epsilon": self.epsilon, "step_size": self.step_size, "steps": self.steps,
            "random_start": self.random_start, "objective": self.objective.kind, "lambda": self.objective.lam,
        }

    @classmethod
    def from_json(cls, d: dict) -> AttackSpec:
        return cls(
            norm=d.get("norm", "Linf"),
            epsilon=parse_fraction(d.get("epsilon", "4/255")),
            step_size=parse_fraction(d.get("step_size", "1/255")),
            steps=int(d.get("steps", 10)),
            random_start=bool(d.get("random_start", True)),
            objective=AttackObjective(d.get("objective", "sup-label"), float(d.get("lambda", 0.0))),
        )


PRESETS = {
    "pgd10-ce": AttackSpec(),
    "pgd10-dlr": AttackSpec(objective=AttackObjective("dlr")),
    "pgd10-cw": AttackSpec(objective=AttackObjective("cw")),
    "l2-pgd10": AttackSpec(norm="L2", epsilon=parse_fraction("128/255"), step_size=parse_fraction("32/255")),
}


def ensemble_specs(epsilon: float = parse_fraction("4/255"), steps: int = 10, norm: str = "Linf") -> list[AttackSpec]:
    """PGD-CE + PGD-DLR with random start: the stand-in for AutoAttack."""
    base = AttackSpec(norm=norm, epsilon=epsilon, step_size=parse_fraction("1/255") if norm == "Linf" else epsilon / 4,
                      steps=steps, random_start=True)
    return [base, replace(base, objective=AttackObjective("dlr"))]


@dataclass
class AttackContext:
    """Side data an objective may need, all constant w.r.t. the attacked image."""

    labels: torch.Tensor | None = None
    template_embs: torch.Tensor | None = None  # (K, d) unit-norm
    text_embs: torch.Tensor | None = None  # (B, d) unit-norm, caption of sample i in row i
    orig_raw: torch.Tensor | None = None  # (B, d) frozen-encoder embedding of the clean image
    tau: float | torch.Tensor | None = None


@dataclass
class AdversarialBatch:
    originals: torch.Tensor
    perturbed: torch.Tensor
    objective_trace: list = field(default_factory=list)
    best_values: torch.Tensor | None = None
    notes: list = field(default_factory=list)


def per_sample_objective(state: ModelState, x_adv: torch.Tensor, obj: AttackObjective, ctx: AttackContext) -> torch.Tensor:
    """Per-sample terms whose sum is the attack objective; term i depends only on x_adv[i]."""
    raw, emb = encode_image(state, x_adv)
    kind = obj.kind
    if kind in ("sup-label", "dlr", "cw", "unsup+sup-label"):
        logits = cm.zero_shot_logits(emb, ctx.template_embs)
        if kind == "dlr":
            return cm.dlr_loss(logits, ctx.labels, denom_eps=_DLR_EPS)
        if kind == "cw":
            return cm.cw_margin_loss(logits, ctx.labels)
        ce = cm.tecoa_ce_loss(logits, ctx.labels)
        if kind == "sup-label":
            return ce
        return cm.fare_distance(raw, ctx.orig_raw) + obj.lam * ce
    if kind == "unsup":
        return cm.fare_distance(raw, ctx.orig_raw)
    nce = cm.info_nce_from_cosines(cm.cosine_matrix(emb, ctx.text_embs), ctx.tau, reduction="none")
    if kind == "sup-caps":
        return nce
    return cm.fare_distance(raw, ctx.orig_raw) + obj.lam * nce


def qt_aft_inner_loss(state: ModelState, x_adv, x_clean, captions, lam: float, reduction: str = "sum") -> torch.Tensor:
    """Sum_i ||f(x'_i) - f_orig(x_i)||^2 - lam * log softmax_j(cos(f(x'_i), g(t_j)) / tau)_i."""
    if state.vision_orig is None:
        raise StateError("qt_aft_inner_loss needs a snapshot of the original vision encoder")
    ctx = build_context(state, x_clean, AttackObjective("qt-aft", lam), captions=captions)
    x_adv = torch.as_tensor(x_adv)
    if x_adv.shape != torch.as_tensor(x_clean).shape:
        raise ValueError("adversarial and clean batches differ in shape")
    terms = per_sample_objective(state, x_adv, AttackObjective("qt-aft", lam), ctx)
    return cm._reduce(terms, reduction)


def _text_embs(state: ModelState, texts) -> torch.Tensor:
    with torch.no_grad():
        if isinstance(texts, torch.Tensor):
            if texts.dtype == torch.long:
                return encode_tokens(state, texts)[1]
            return cm.normalize(texts.to(state.dtype))
        return encode_texts(state, list(texts))[1]


def build_context(state: ModelState, x: torch.Tensor, obj: AttackObjective, labels=None, captions=None,
                  templates=None) -> AttackContext:
    """Precompute text-side embeddings and the frozen clean embedding for ``obj``.

    ``captions`` / ``templates`` accept strings, padded token ids or embeddings.
    """
    ctx = AttackContext()
    kind = obj.kind
    if kind in _NEEDS_LABELS:
        if labels is None or templates is None:
            raise ValueError(f"objective {kind!r} needs labels and class templates")
        ctx.labels = torch.as_tensor(labels, dtype=torch.long)
        ctx.template_embs = _text_embs(state, templates)
        if kind == "dlr" and ctx.template_embs.shape[0] < 3:
            raise ValueError("DLR needs >= 3 classes; use the CW objective for binary tasks")
    if kind in _NEEDS_TEXTS:
        if captions is None:
            raise ValueError(f"objective {kind!r} needs captions")
        ctx.text_embs = _text_embs(state, captions)
        if ctx.text_embs.shape[0] != x.shape[0]:
            raise ValueError("one caption per image required")
        ctx.tau = state.tau.detach()
    if kind in _NEEDS_ORIG:
        which = "theta_orig" if state.vision_orig is not None else "theta"
        with torch.no_grad():
            ctx.orig_raw = encode_image(state, x, which)[0]
    return ctx


def _sample_generator(seed: int, sample_id: int, spec: AttackSpec) -> torch.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(sample_id), spec.key()])
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


def _random_start(x: torch.Tensor, spec: AttackSpec, seed: int, sample_ids) -> torch.Tensor:
    deltas = []
    d = x[0].numel()
    for i, sid in enumerate(sample_ids):
        g = _sample_generator(seed, sid, spec)
        if spec.norm == "Linf":
            delta = (torch.rand(x[i].shape, generator=g, dtype=torch.float64) * 2 - 1) * spec.epsilon
        else:
            direction = torch.randn(x[i].shape, generator=g, dtype=torch.float64)
            radius = torch.rand((), generator=g, dtype=torch.float64) ** (1.0 / d)
            delta = direction / direction.norm() * radius * spec.epsilon
        deltas.append(delta)
    return project(x, x + torch.stack(deltas).to(x.dtype), spec)


def project(x: torch.Tensor, x_adv: torch.Tensor, spec: AttackSpec) -> torch.Tensor:
    """Project onto the epsilon ball around ``x`` intersected with [0, 1]."""
    delta = x_adv - x
    if spec.norm == "Linf":
        delta = delta.clamp(-spec.epsilon, spec.epsilon)
    else:
        norms = delta.flatten(1).norm(dim=1).reshape(-1, *([1] * (x.ndim - 1)))
        scale = torch.where(norms > spec.epsilon, spec.epsilon / norms.clamp_min(1e-30), torch.ones_like(norms))
        delta = delta * scale
    return (x + delta).clamp(0.0, 1.0)


def _direction(g: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "Linf":
        return torch.sign(g)
    n = g.flatten(1).norm(dim=1).reshape(-1, *([1] * (g.ndim - 1)))
    return torch.where(n > 0, g / n.clamp_min(1e-30), torch.zeros_like(g))


def pgd_attack(state: ModelState, x, spec: AttackSpec, labels=None, captions=None, templates=None,
               seed: int = 0, sample_ids=None, objective_fn=None) -> AdversarialBatch:
    """Best-iterate PGD ascent on the spec's objective.

    ``objective_fn(state, x_adv) -> per-sample values`` overrides the
    objective (used for stub objectives in tests). Per-sample random starts
    are seeded by ``(seed, sample_id, spec)`` so results do not depend on
    batch composition for per-sample objectives.
    """
    x = torch.as_tensor(x).detach().to(state.dtype)
    if x.ndim == 3:
        x = x[None]
    B = x.shape[0]
    sample_ids = list(range(B)) if sample_ids is None else list(sample_ids)
    if len(sample_ids) != B:
        raise ValueError("one sample id per image required")
    if objective_fn is None:
        ctx = build_context(state, x, spec.objective, labels, captions, templates)

        def objective_fn(st, xa):
            return per_sample_objective(st, xa, spec.objective, ctx)

    if spec.random_start and spec.epsilon > 0:
        x_cur = _random_start(x, spec, seed, sample_ids)
    else:
        x_cur = x.clone()
    best_x = x_cur.clone()
    best_val = torch.full((B,), float("-inf"), dtype=torch.float64)
    trace = []
    for k in range(spec.steps + 1):
        xv = x_cur.detach().requires_grad_(k < spec.steps)
        with torch.enable_grad():
            vals = objective_fn(state, xv)
            if k < spec.steps:
                (g,) = torch.autograd.grad(vals.sum(), xv, allow_unused=True)
                g = torch.zeros_like(xv) if g is None else g
        vals = vals.detach().to(torch.float64)
        trace.append(float(vals.sum()))
        better = vals > best_val
        if bool(better.any()):
            best_val = torch.where(better, vals, best_val)
            best_x[better] = x_cur[better].detach()
        if k < spec.steps:
            x_cur = project(x, x_cur.detach() + spec.step_size * _direction(g, spec.norm), spec)
    return AdversarialBatch(originals=x, perturbed=best_x, objective_trace=trace, best_values=best_val)


def _zero_shot_predict(state: ModelState, x: torch.Tensor, template_embs: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        _, emb = encode_image(state, x)
        return cm.predict(cm.zero_shot_logits(emb, template_embs))


def ensemble_attack(state: ModelState, x, labels, templates, specs, seed: int = 0, sample_ids=None) -> AdversarialBatch:
    """Per-sample union over ``specs``: a sample is broken if any member breaks it.

    On binary tasks DLR members are replaced by the CW margin (noted in the result).
    The kept image is the first flipping one, else the one with the largest CE loss.
    """
    specs = list(dict.fromkeys(specs))
    if not specs:
        raise ValueError("ensemble needs at least one attack spec")
    if len({(s.epsilon, s.norm) for s in specs}) != 1:
        raise ValueError("all ensemble members must share epsilon and norm")
    x = torch.as_tensor(x).detach().to(state.dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    t_embs = _text_embs(state, templates)
    notes = []
    if t_embs.shape[0] < 3 and any(s.objective.kind == "dlr" for s in specs):
        specs = list(dict.fromkeys(
            replace(s, objective=AttackObjective("cw")) if s.objective.kind == "dlr" else s for s in specs
        ))
        notes.append("dlr->cw (fewer than 3 classes)")
    B = x.shape[0]
    chosen = torch.zeros(B, dtype=torch.long)
    broken = torch.zeros(B, dtype=torch.bool)
    best_ce = torch.full((B,), float("-inf"), dtype=torch.float64)
    out = x.clone()
    for j, spec in enumerate(specs):
        adv = pgd_attack(state, x, spec, labels=labels, templates=t_embs, seed=seed, sample_ids=sample_ids).perturbed
        with torch.no_grad():
            _, emb = encode_image(state, adv)
            logits = cm.zero_shot_logits(emb, t_embs)
            wrong = cm.predict(logits) != labels
            ce = cm.tecoa_ce_loss(logits, labels).to(torch.float64)
        take = (wrong & ~broken) | (~broken & ~wrong & (ce > best_ce))
        out[take] = adv[take]
        chosen[take] = j
        best_ce = torch.where(~broken & ~wrong & (ce > best_ce), ce, best_ce)
        broken |= wrong
    result = AdversarialBatch(originals=x, perturbed=out, notes=notes)
    result.broken = broken
    result.member = chosen
    return result


# --- deviation analysis -------------------------------------------------------

DEVIATION_OBJECTIVES = (
    AttackObjective("sup-label"),
    AttackObjective("unsup"),
    AttackObjective("sup-caps"),
    AttackObjective("unsup+sup-label", 10.0),
    AttackObjective("qt-aft", 10.0),
)


@dataclass
class DeviationRow:
    objective: str
    sim_image: float
    sim_label: float
    sim_caption: float
    n_samples: int
    seed: int


def deviation_analysis(state: ModelState, images, labels, captions, templates, objectives=DEVIATION_OBJECTIVES,
                       base_spec: AttackSpec = AttackSpec(), seed: int = 0, batch_size: int = 64) -> list[DeviationRow]:
    """Mean cosine of adversarial image embeddings to the clean image, its label template and its caption."""
    images = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images).to(state.dtype)
    n = images.shape[0]
    if n == 0:
        raise ValueError("deviation analysis needs at least one sample")
    labels = torch.as_tensor(labels, dtype=torch.long)
    captions = list(captions)
    if len(captions) != n or labels.shape[0] != n:
        raise ValueError("images, labels and captions must be aligned")
    t_embs = _text_embs(state, templates)
    with torch.no_grad():
        _, clean_emb = encode_image(state, images)
        cap_embs = encode_texts(state, captions)[1]
    label_embs = t_embs[labels]

    def sims(emb):
        return (
            float((emb * clean_emb).sum(-1).double().mean()),
            float((emb * label_embs).sum(-1).double().mean()),
            float((emb * cap_embs).sum(-1).double().mean()),
        )

    rows = [DeviationRow("clean", *sims(clean_emb), n, seed)]
    for obj in objectives:
        spec = replace(base_spec, objective=obj)
        advs = []
        for lo in range(0, n, batch_size):
            sl = slice(lo, min(lo + batch_size, n))
            adv = pgd_attack(state, images[sl], spec, labels=labels[sl], captions=tokenize_batch(state, captions[sl]),
                             templates=t_embs, seed=seed, sample_ids=range(sl.start, sl.stop))
            advs.append(adv.perturbed)
        with torch.no_grad():
            _, adv_emb = encode_image(state, torch.cat(advs))
        name = obj.kind if obj.lam == 0 else f"{obj.kind}(lambda={obj.lam:g})"
        rows.append(DeviationRow(name, *sims(adv_emb), n, seed))
    return rows


def deviation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["objective", "sim_image", "sim_label", "sim_caption", "n_samples", "seed"])
    for r in rows:
        w.writerow([r.objective, f"{r.sim_image:.6f}", f"{r.sim_label:.6f}", f"{r.sim_caption:.6f}", r.n_samples, r.seed])
    return buf.getvalue()

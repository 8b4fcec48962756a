"""Run manifests, per-command runners and the end-to-end desk study.

Every runner takes a fully resolved config dict (all defaults materialized)
and an output location, and writes a ``run_manifest.json`` next to its
results. Report file names embed the manifest digest, so a manifest plus the
code version pins every output byte.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ralb import __version__
from ralb.attacks import (
    DEVIATION_OBJECTIVES,
    PRESETS,
    AttackObjective,
    AttackSpec,
    _text_embs,
    deviation_analysis,
    deviation_csv,
    ensemble_attack,
    ensemble_specs,
    parse_fraction,
    pgd_attack,
)
from ralb.captions import (
    ablate_corpus,
    caption_stats,
    parse_mode,
    read_captions_jsonl,
    write_captions_jsonl,
)
from ralb.datagen import (
    SHAPES,
    TEXTURES,
    Dataset,
    DatasetSplit,
    class_templates,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from ralb.encoders import EncoderConfig, load_checkpoint, new_model, save_checkpoint, snapshot, tokenize_batch
from ralb.evaluation import compare_methods, predictions, subsample_indices
from ralb.rawtensor import write_rtns
from ralb.training import TrainConfig, lambda_sweep, train

MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    """Bad flags or config values (exit code 1)."""


class DataError(Exception):
    """Missing, malformed or changed input files (exit code 2)."""


def default_seed() -> int:
    env = os.environ.get("RALB_SEED", "").strip()
    if not env:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"RALB_SEED must be an integer, got {env!r}") from None


def path_digest(path) -> str:
    """sha256 of a file, or of a directory's sorted (relative path, bytes) pairs."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"input not found: {p}")
    h = hashlib.sha256()
    files = [p] if p.is_file() else sorted(f for f in p.rglob("*") if f.is_file() and f.name != MANIFEST_NAME)
    for f in files:
        if p.is_dir():
            h.update(f.relative_to(p).as_posix().encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # path -> sha256
    tool_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        d = json.loads(text)
        return cls(d["command"], d["config"], d.get("seeds", {}), d.get("inputs", {}), d.get("tool_version", __version__))

    @classmethod
    def load(cls, path) -> RunManifest:
        p = Path(path)
        if p.is_dir():
            p = p / MANIFEST_NAME
        try:
            return cls.from_json(p.read_text())
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise DataError(f"unreadable manifest {p}: {e}") from None

    def write(self, path) -> Path:
        p = Path(path)
        if p.suffix != ".json":
            p.mkdir(parents=True, exist_ok=True)
            p = p / MANIFEST_NAME
        p.write_text(self.to_json())
        return p

    def check_inputs(self) -> None:
        for path, digest in sorted(self.inputs.items()):
            if path_digest(path) != digest:
                raise DataError(f"input {path} changed since the manifest was written")


# --- defaults ----------------------------------------------------------------

TRAIN_ATTACK = AttackSpec(random_start=True).to_json()

DEFAULTS = {
    "gen-data": {
        "n": 1000, "train_classes": ["circle", "square", "triangle"], "zeroshot_classes": ["star", "cross"],
        "task": "ObjectLabel", "partition": "train", "caption_style": "rich", "resolution": 32, "name": None,
    },
    "pretrain": {
        "data": None, "epochs": 20, "batch_size": 64, "lr0": 1e-3, "weight_decay": 1e-4, "cosine": True,
        "tau": 0.07, "encoder": {k: v for k, v in asdict(EncoderConfig()).items() if k != "vocab_size"},
    },
    "finetune": {
        "init": None, "data": None, "method": "qt-aft", "lambda": 10.0, "epochs": 10, "batch_size": 64,
        "lr0": 1e-3, "weight_decay": 1e-4, "cosine": True, "attack": TRAIN_ATTACK, "caption_mode": "full",
        "caption_seed": 0,
    },
    "attack": {
        "checkpoint": None, "data": None, "attack": "pgd10-ce", "epsilon": None, "steps": None,
        "step_size": None, "objective": None, "lambda": 10.0, "n": None,
    },
    "eval": {
        "checkpoint": None, "data": [], "zero_shot": [], "attacks": ["pgd10-ce"], "epsilon": None,
        "n": None, "name": None,
    },
    "analyze-deviation": {
        "checkpoint": None, "data": None, "n": 500, "seeds": [0, 1, 2], "lambda": 10.0, "epsilon": "4/255",
        "steps": 10, "step_size": "1/255",
    },
    "ablate-captions": {"in": None, "out": None, "mode": "full"},
    "caption-stats": {"captions": None, "checkpoint": None, "data": None},
    "sweep-lambda": {
        "init": None, "data": None, "eval_data": [], "lambdas": [1.0, 5.0, 10.0, 15.0], "epochs": 10,
        "batch_size": 64, "lr0": 1e-3, "weight_decay": 1e-4, "attack": TRAIN_ATTACK, "eval_attack": "pgd10-ce",
        "n_eval": None,
    },
    "report": {"checkpoints": {}, "data": {}, "zero_shot": [], "attacks": ["pgd10-ce", "ce+dlr"], "n": None},
}

# Keys whose values are input paths (hashed into the manifest).
INPUT_KEYS = {
    "pretrain": ("data",),
    "finetune": ("init", "data"),
    "attack": ("checkpoint", "data"),
    "eval": ("checkpoint", "data"),
    "analyze-deviation": ("checkpoint", "data"),
    "ablate-captions": ("in",),
    "caption-stats": ("captions", "checkpoint", "data"),
    "sweep-lambda": ("init", "data", "eval_data"),
    "report": ("checkpoints", "data"),
}

REQUIRED = {
    "pretrain": ("data",),
    "finetune": ("init", "data"),
    "attack": ("checkpoint", "data"),
    "eval": ("checkpoint", "data"),
    "analyze-deviation": ("checkpoint", "data"),
    "ablate-captions": ("in", "out"),
    "caption-stats": ("captions",),
    "sweep-lambda": ("init", "data", "eval_data"),
    "report": ("checkpoints", "data"),
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("checkpoints", "data"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(command: str, file_config: dict | None = None, overrides: dict | None = None) -> dict:
    """defaults <- config file <- explicit flags; the seed comes from flags, the file, RALB_SEED, then 0."""
    defaults = STUDY_DEFAULTS if command == "full-study" else DEFAULTS[command]
    cfg = _merge(defaults, file_config or {})
    unknown = set(cfg) - set(defaults) - {"seed"}
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg = _merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    if cfg.get("seed") is None:
        cfg["seed"] = default_seed()
    cfg["seed"] = int(cfg["seed"])
    for key in REQUIRED.get(command, ()):
        if cfg.get(key) in (None, [], {}):
            raise UsageError(f"{command} needs --{key.replace('_', '-')}")
    return cfg


def _input_paths(command: str, cfg: dict) -> list[str]:
    paths = []
    for key in INPUT_KEYS.get(command, ()):
        v = cfg.get(key)
        if v is None:
            continue
        vals = v.values() if isinstance(v, dict) else v if isinstance(v, list) else [v]
        paths += [str(x) for x in vals]
    return paths


def make_manifest(command: str, cfg: dict) -> RunManifest:
    cfg = copy.deepcopy(cfg)
    for key in INPUT_KEYS.get(command, ()):
        v = cfg.get(key)
        if isinstance(v, str):
            cfg[key] = str(Path(v).resolve())
        elif isinstance(v, list):
            cfg[key] = [str(Path(x).resolve()) for x in v]
        elif isinstance(v, dict):
            cfg[key] = {n: str(Path(x).resolve()) for n, x in v.items()}
    inputs = {p: path_digest(p) for p in _input_paths(command, cfg)}
    return RunManifest(command, cfg, {"seed": cfg["seed"]}, inputs)


# --- shared helpers ----------------------------------------------------------

def load_data(path) -> Dataset:
    try:
        ds, _, _ = load_dataset(path)
    except FileNotFoundError as e:
        raise DataError(f"dataset not found: {e.filename}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"malformed dataset {path}: {e}") from None
    return ds


def load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except ValueError as e:
        raise DataError(f"malformed checkpoint {path}: {e}") from None


def vocab_texts(captions) -> list[str]:
    """Pretraining vocabulary: caption words, every class template and the nouns-only separator."""
    return [c.raw_text for c in captions] + class_templates(SHAPES) + class_templates(TEXTURES) + [","]


def attack_specs(name: str, epsilon=None, steps=None, step_size=None, objective=None, lam: float = 10.0):
    """Named preset (or ``ce+dlr`` for the ensemble) with optional overrides."""
    if name in ("ce+dlr", "ensemble"):
        eps = parse_fraction(epsilon) if epsilon is not None else parse_fraction("4/255")
        specs = ensemble_specs(eps, steps if steps is not None else 10)
        if step_size is not None:
            specs = [replace(s, step_size=parse_fraction(step_size)) for s in specs]
        return specs
    if name not in PRESETS:
        raise UsageError(f"unknown attack {name!r}; choose from {sorted(PRESETS) + ['ce+dlr']}")
    spec = PRESETS[name]
    if epsilon is not None:
        spec = replace(spec, epsilon=parse_fraction(epsilon))
    if steps is not None:
        spec = replace(spec, steps=int(steps))
    if step_size is not None:
        spec = replace(spec, step_size=parse_fraction(step_size))
    if objective is not None:
        spec = replace(spec, objective=AttackObjective.parse(objective, lam))
    return spec


def with_ablated_captions(ds: Dataset, mode: str, seed: int) -> Dataset:
    if mode == "full":
        return ds
    ids = [f"{i:06d}" for i in range(len(ds))]
    ablated = ablate_corpus(dict(zip(ids, ds.captions)), parse_mode(mode, seed))
    out = copy.copy(ds)
    out.captions = [ablated[i] for i in ids]
    return out


def _write_log(path: Path, records) -> None:
    path.write_text("".join(r.to_json() + "\n" for r in records))


def train_config(cfg: dict, method: str) -> TrainConfig:
    return TrainConfig(
        method=method, epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), lr0=float(cfg["lr0"]),
        weight_decay=float(cfg["weight_decay"]), lam=float(cfg.get("lambda", 10.0)),
        attack=AttackSpec.from_json(cfg.get("attack", TRAIN_ATTACK)), seed=int(cfg["seed"]),
        cosine=bool(cfg.get("cosine", True)),
    )


def pretrain_model(ds: Dataset, cfg: dict):
    enc = EncoderConfig(**cfg["encoder"])
    state = new_model(vocab_texts(ds.captions), enc, seed=cfg["seed"], tau=float(cfg["tau"]))
    return train(state, ds, train_config(cfg, "clean-pretrain"))


def finetune_model(state, ds: Dataset, cfg: dict, method: str):
    if state.vision_orig is None:
        state = snapshot(state.copy())
    ds = with_ablated_captions(ds, cfg.get("caption_mode", "full"), int(cfg.get("caption_seed", 0)))
    return train(state, ds, train_config(cfg, method))


def _eval_specs(names, epsilon=None) -> dict:
    return {n: attack_specs(n, epsilon=epsilon) for n in names}


# --- runners -----------------------------------------------------------------

def run_gen_data(cfg: dict, out: Path) -> list[Path]:
    split = DatasetSplit(tuple(cfg["train_classes"]), tuple(cfg["zeroshot_classes"]), cfg["task"])
    ds = generate_dataset(int(cfg["n"]), split, cfg["seed"], cfg["partition"], cfg["caption_style"],
                          int(cfg["resolution"]), name=cfg["name"])
    return [save_dataset(ds, out, split, cfg["seed"])]


def run_pretrain(cfg: dict, out: Path) -> list[Path]:
    state, records = pretrain_model(load_data(cfg["data"]), cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_log(out / "train_log.jsonl", records)
    return [save_checkpoint(state, out / "model.ralb"), out / "train_log.jsonl"]


def run_finetune(cfg: dict, out: Path) -> list[Path]:
    state, records = finetune_model(load_model(cfg["init"]), load_data(cfg["data"]), cfg, cfg["method"])
    out.mkdir(parents=True, exist_ok=True)
    _write_log(out / "train_log.jsonl", records)
    return [save_checkpoint(state, out / "model.ralb"), out / "train_log.jsonl"]


def run_attack(cfg: dict, out: Path, digest: str, workers: int = 1) -> list[Path]:
    state = load_model(cfg["checkpoint"])
    ds = load_data(cfg["data"])
    ds = ds.subset(subsample_indices(len(ds), cfg["n"], cfg["seed"]))
    spec = attack_specs(cfg["attack"], cfg["epsilon"], cfg["steps"], cfg["step_size"], cfg["objective"],
                        float(cfg["lambda"]))
    templates = class_templates(ds.class_names)
    x = torch.as_tensor(ds.images)
    ids = list(range(len(ds)))
    notes = []
    if isinstance(spec, list):
        res = ensemble_attack(state, x, ds.labels, templates, spec, seed=cfg["seed"], sample_ids=ids)
        notes = res.notes
    else:
        needs_caps = spec.objective.kind in ("sup-caps", "qt-aft")
        if needs_caps and not ds.captions:
            raise DataError(f"{spec.objective.kind} attacks need captions in {cfg['data']}")
        if state.vision_orig is None:
            state = snapshot(state)
        caps = tokenize_batch(state, [c.raw_text for c in ds.captions]) if needs_caps else None
        res = pgd_attack(state, x, spec, labels=ds.labels, captions=caps, templates=templates, seed=cfg["seed"],
                         sample_ids=ids)
    t = _text_embs(state, templates)
    clean = float(np.mean(predictions(state, x, t).numpy() == ds.labels, dtype=np.float64))
    robust = float(np.mean(predictions(state, res.perturbed, t).numpy() == ds.labels, dtype=np.float64))
    out.mkdir(parents=True, exist_ok=True)
    write_rtns(out / f"adversarial-{digest}.rtns", res.perturbed.detach().numpy())
    specs = [s.to_json() for s in spec] if isinstance(spec, list) else [spec.to_json()]
    summary = {"clean_acc": clean, "robust_acc": robust, "n": len(ds), "seed": cfg["seed"], "specs": specs,
               "notes": notes}
    p = out / f"attack-{digest}.json"
    p.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return [out / f"adversarial-{digest}.rtns", p]


def _write_report(report, out: Path, stem: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(report.to_csv())
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    return [out / f"{stem}.csv", out / f"{stem}.json"]


def run_eval(cfg: dict, out: Path, digest: str, workers: int = 1) -> list[Path]:
    state = load_model(cfg["checkpoint"])
    paths = cfg["data"] if isinstance(cfg["data"], list) else [cfg["data"]]
    datasets = {}
    for p in paths:
        ds = load_data(p)
        datasets[ds.name] = ds
    name = cfg["name"] or Path(cfg["checkpoint"]).parent.name or "model"
    report = compare_methods({name: state}, datasets, _eval_specs(cfg["attacks"], cfg["epsilon"]),
                             zero_shot=set(cfg["zero_shot"]), n_subsample=cfg["n"], seed=cfg["seed"], workers=workers)
    return _write_report(report, out, f"eval-{digest}")


def run_report(cfg: dict, out: Path, digest: str, workers: int = 1) -> list[Path]:
    checkpoints = {n: load_model(p) for n, p in sorted(cfg["checkpoints"].items())}
    datasets = {n: load_data(p) for n, p in sorted(cfg["data"].items())}
    report = compare_methods(checkpoints, datasets, _eval_specs(cfg["attacks"]), zero_shot=set(cfg["zero_shot"]),
                             n_subsample=cfg["n"], seed=cfg["seed"], workers=workers)
    return _write_report(report, out, f"report-{digest}")


def deviation_rows(state, ds: Dataset, cfg: dict) -> list:
    """Deviation table over several seeds; each seed draws its own sample and random starts."""
    if not ds.captions:
        raise DataError("deviation analysis needs captions")
    if state.vision_orig is None:
        state = snapshot(state.copy())
    lam = float(cfg["lambda"])
    objectives = [AttackObjective(o.kind, lam if o.lam else 0.0) for o in DEVIATION_OBJECTIVES]
    base = AttackSpec(epsilon=parse_fraction(cfg["epsilon"]), steps=int(cfg["steps"]),
                      step_size=parse_fraction(cfg["step_size"]))
    rows = []
    for s in cfg["seeds"]:
        sub = ds.subset(subsample_indices(len(ds), cfg["n"], int(s)))
        rows += deviation_analysis(state, sub.images, sub.labels, [c.raw_text for c in sub.captions],
                                   class_templates(sub.class_names), objectives, base, seed=int(s))
    return rows


def run_analyze_deviation(cfg: dict, out: Path, digest: str, workers: int = 1) -> list[Path]:
    rows = deviation_rows(load_model(cfg["checkpoint"]), load_data(cfg["data"]), cfg)
    out.mkdir(parents=True, exist_ok=True)
    p = out / f"deviation-{digest}.csv"
    p.write_text(deviation_csv(rows))
    return [p]


def _read_corpus(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "captions.jsonl"
    try:
        return read_captions_jsonl(p)
    except FileNotFoundError:
        raise DataError(f"caption file not found: {p}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"malformed caption file {p}: {e}") from None


def run_ablate_captions(cfg: dict) -> list[Path]:
    corpus = _read_corpus(cfg["in"])
    try:
        ablated = ablate_corpus(corpus, parse_mode(cfg["mode"], cfg["seed"]))
    except ValueError as e:
        raise DataError(str(e)) from None
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_captions_jsonl(out, list(ablated.values()), list(ablated.keys()))
    return [out]


def run_caption_stats(cfg: dict, out: Path, digest: str, workers: int = 1) -> list[Path]:
    corpus = list(_read_corpus(cfg["captions"]).values())
    state = images = None
    if cfg["checkpoint"] is not None:
        if cfg["data"] is None:
            raise UsageError("caption-stats with --checkpoint also needs --data for the aligned images")
        state, images = load_model(cfg["checkpoint"]), load_data(cfg["data"]).images
        if len(images) != len(corpus):
            raise DataError(f"{len(corpus)} captions but {len(images)} images")
    stats = caption_stats(corpus, state, images)
    out.mkdir(parents=True, exist_ok=True)
    p = out / f"caption_stats-{digest}.csv"
    p.write_text(stats.to_csv())
    summary = {"n": stats.n, "mean_length": stats.mean_length, "median_length": stats.median_length,
               "mean_similarity": stats.mean_similarity}
    (out / f"caption_stats-{digest}.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return [p, out / f"caption_stats-{digest}.json"]


def run_sweep_lambda(cfg: dict, out: Path, digest: str, workers: int = 1) -> list[Path]:
    state = load_model(cfg["init"])
    if state.vision_orig is None:
        state = snapshot(state)
    eval_sets = [load_data(p) for p in cfg["eval_data"]]
    rows = lambda_sweep(state, load_data(cfg["data"]), cfg["lambdas"], train_config(cfg, "qt-aft"), eval_sets,
                        attack_specs(cfg["eval_attack"]), n_eval=cfg["n_eval"], seed=cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    p = out / f"lambda_sweep-{digest}.csv"
    p.write_text("lambda,clean_acc,robust_acc\n" + "".join(
        f"{r.lam:g},{r.clean_acc:.6f},{r.robust_acc:.6f}\n" for r in rows))
    return [p]


# --- full study --------------------------------------------------------------

STUDY_DEFAULTS = {
    "split": {"train_classes": ["circle", "square", "triangle"], "zeroshot_classes": ["star", "cross"]},
    "pretrain": {**DEFAULTS["pretrain"], "n": 20000, "caption_style": "mixed"},
    "finetune": {**DEFAULTS["finetune"], "n": 5000, "methods": ["qt-aft", "qt-aft-label", "fare", "tecoa"]},
    "eval": {"n": 500, "attacks": ["pgd10-ce", "ce+dlr", "l2-pgd10", "pgd10-cw"]},
    "deviation": {k: v for k, v in DEFAULTS["analyze-deviation"].items() if k not in ("checkpoint", "data")},
    "ablation": {"modes": ["full", "nouns-only", "no-adj-adv", "no-nouns", "no-function-words", "shuffle-words"],
                 "attacks": ["pgd10-ce"]},
}
for _section in ("pretrain", "finetune"):
    STUDY_DEFAULTS[_section].pop("data", None)
    STUDY_DEFAULTS[_section].pop("init", None)
    STUDY_DEFAULTS[_section].pop("method", None)

STAGES = ("gen-data", "pretrain", "finetune", "eval", "deviation", "caption-ablation", "caption-stats")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def study_plan(cfg: dict) -> list[str]:
    ft = cfg["finetune"]
    abl = [m for m in cfg["ablation"]["modes"] if m != "full"]
    return [
        f"gen-data: pretrain set n={cfg['pretrain']['n']} ({cfg['pretrain']['caption_style']} captions), "
        f"fine-tune set n={ft['n']}, eval sets held-in / zero-shot / textures n={cfg['eval']['n']}",
        f"pretrain: clean contrastive, {cfg['pretrain']['epochs']} epochs",
        f"finetune: {', '.join(ft['methods'])} ({ft['epochs']} epochs, lambda={ft['lambda']:g})",
        f"eval: {len(ft['methods']) + 1} models x 3 datasets x attacks {', '.join(cfg['eval']['attacks'])}",
        f"deviation: pretrained model, n={cfg['deviation']['n']}, seeds {cfg['deviation']['seeds']}",
        f"caption-ablation: qt-aft x {{{', '.join(abl)}}}, attacks {', '.join(cfg['ablation']['attacks'])}",
        "caption-stats: fine-tune corpus lengths and image-caption similarity per ablation mode",
    ]


def run_full_study(cfg: dict, out: Path, digest: str, workers: int = 1, log=print) -> list[Path]:
    seed = cfg["seed"]
    out.mkdir(parents=True, exist_ok=True)
    split = DatasetSplit(tuple(cfg["split"]["train_classes"]), tuple(cfg["split"]["zeroshot_classes"]))
    textures = DatasetSplit(TEXTURES, (), "AttributeLabel")
    n_eval = int(cfg["eval"]["n"])
    written: list[Path] = []
    stage = "gen-data"

    def step(name):
        nonlocal stage
        stage = name
        log(f"[{name}]")

    try:
        step("gen-data")
        pre_split = DatasetSplit(tuple(SHAPES))
        pre = generate_dataset(cfg["pretrain"]["n"], pre_split, seed, caption_style=cfg["pretrain"]["caption_style"],
                               name="pretrain")
        ft_data = generate_dataset(cfg["finetune"]["n"], split, seed + 1, name="finetune")
        evals = {
            "heldin": generate_dataset(n_eval, split, seed + 2, name="heldin"),
            "zeroshot": generate_dataset(n_eval, split, seed + 3, partition="zeroshot", name="zeroshot"),
            "textures": generate_dataset(n_eval, textures, seed + 4, name="textures"),
        }
        save_dataset(ft_data, out / "data" / "finetune", split, seed + 1)
        for name, ds in evals.items():
            sp = textures if name == "textures" else split
            save_dataset(ds, out / "data" / name, sp, seed + 2 + list(evals).index(name))

        step("pretrain")
        pre_cfg = {**cfg["pretrain"], "seed": seed}
        base, records = pretrain_model(pre, pre_cfg)
        (out / "models" / "pretrained").mkdir(parents=True, exist_ok=True)
        written.append(save_checkpoint(base, out / "models" / "pretrained" / "model.ralb"))
        _write_log(out / "models" / "pretrained" / "train_log.jsonl", records)
        base = snapshot(base)

        step("finetune")
        models = {"pretrained": base}
        ft_cfg = {**cfg["finetune"], "seed": seed}
        for method in cfg["finetune"]["methods"]:
            log(f"  {method}")
            model, records = finetune_model(base, ft_data, {**ft_cfg, "caption_mode": "full"}, method)
            models[method] = model
            d = out / "models" / method
            d.mkdir(parents=True, exist_ok=True)
            written.append(save_checkpoint(model, d / "model.ralb"))
            _write_log(d / "train_log.jsonl", records)

        step("eval")
        report = compare_methods(models, evals, _eval_specs(cfg["eval"]["attacks"]),
                                 zero_shot={"zeroshot", "textures"}, seed=seed, workers=workers)
        written += _write_report(report, out, f"methods-{digest}")

        step("deviation")
        rows = deviation_rows(base, evals["heldin"], {**cfg["deviation"]})
        (out / f"deviation-{digest}.csv").write_text(deviation_csv(rows))
        written.append(out / f"deviation-{digest}.csv")

        step("caption-ablation")
        abl_models = {}
        for mode in cfg["ablation"]["modes"]:
            if mode == "full" and "qt-aft" in models:
                abl_models[mode] = models["qt-aft"]
                continue
            log(f"  {mode}")
            model, records = finetune_model(base, ft_data, {**ft_cfg, "caption_mode": mode, "caption_seed": seed},
                                            "qt-aft")
            abl_models[mode] = model
            d = out / "models" / f"qt-aft-{mode}"
            d.mkdir(parents=True, exist_ok=True)
            written.append(save_checkpoint(model, d / "model.ralb"))
            _write_log(d / "train_log.jsonl", records)
        abl = compare_methods(abl_models, evals, _eval_specs(cfg["ablation"]["attacks"]),
                              zero_shot={"zeroshot", "textures"}, seed=seed, workers=workers)
        written += _write_report(abl, out, f"caption_ablation-{digest}")

        step("caption-stats")
        lines = ["mode,histogram,bin_lo,bin_hi,count"]
        summary = {}
        for mode in cfg["ablation"]["modes"]:
            corpus = with_ablated_captions(ft_data, mode, seed).captions
            stats = caption_stats(corpus, base, ft_data.images)
            summary[mode] = {"mean_length": stats.mean_length, "median_length": stats.median_length,
                             "mean_similarity": stats.mean_similarity}
            lines += [f"{mode},{row}" for row in stats.to_csv().splitlines()[1:]]
        (out / f"caption_stats-{digest}.csv").write_text("\n".join(lines) + "\n")
        (out / f"caption_stats-{digest}.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        written += [out / f"caption_stats-{digest}.csv", out / f"caption_stats-{digest}.json"]
    except (UsageError, DataError):
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(stage, e) from e
    return written


# --- dispatch ----------------------------------------------------------------

def execute(manifest: RunManifest, out, workers: int = 1, log=print) -> list[Path]:
    """Run the command a manifest describes, writing results and the manifest under ``out``."""
    cmd, cfg = manifest.command, manifest.config
    manifest.check_inputs()
    digest = manifest.digest()
    if cmd == "ablate-captions":
        if out is not None:
            cfg = {**cfg, "out": str(out)}
        written = run_ablate_captions(cfg)
        manifest.write(Path(str(cfg["out"]) + ".run_manifest.json"))
        return written
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if cmd == "gen-data":
        written = run_gen_data(cfg, out)
    elif cmd == "pretrain":
        written = run_pretrain(cfg, out)
    elif cmd == "finetune":
        written = run_finetune(cfg, out)
    elif cmd == "full-study":
        written = run_full_study(cfg, out, digest, workers, log)
    else:
        runner = {
            "attack": run_attack, "eval": run_eval, "analyze-deviation": run_analyze_deviation,
            "caption-stats": run_caption_stats, "sweep-lambda": run_sweep_lambda, "report": run_report,
        }.get(cmd)
        if runner is None:
            raise UsageError(f"unknown command {cmd!r}")
        written = runner(cfg, out, digest, workers)
    manifest.write(out)
    return written

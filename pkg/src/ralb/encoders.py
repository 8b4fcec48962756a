"""Dual encoder: patch-MLP vision tower, positional bag-of-tokens text tower.

Vision: fixed pixel normalization (x - 0.5) / 0.25 -> 4x4 patches -> shared
linear patch embedding -> flatten ->
``vision_depth`` GELU layers -> linear to ``d_embed``.

Text: token embedding + learned position embedding -> GELU -> masked mean
over non-pad positions -> ``text_depth`` GELU layers -> linear to ``d_embed``.
The GELU before pooling is what makes the text tower order-sensitive; with a
purely additive position code the masked mean would be permutation
invariant.
"""

from __future__ import annotations

import copy
import math
import re
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ralb.core_math import clamp_log_tau

MAX_TOKENS = 77
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25
PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class StateError(RuntimeError):
    """Operation not allowed in the model's current lifecycle state."""


# --- tokenizer ---------------------------------------------------------------

def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, words):
        words = list(words)
        if tuple(words[:4]) != SPECIALS:
            words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        if len(self.index) != len(words):
            raise ValueError("duplicate entries in vocabulary")

    @classmethod
    def build(cls, texts) -> Vocab:
        seen = {}
        for t in texts:
            for w in split_words(t):
                seen.setdefault(w, None)
        return cls(list(SPECIALS) + sorted(seen))

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.words == other.words

    def to_text(self) -> str:
        return "\n".join(self.words) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Vocab:
        return cls([w for w in text.split("\n") if w])


def tokenize(text: str, vocab: Vocab, max_tokens: int = MAX_TOKENS) -> list[int]:
    """BOS + word ids + EOS, tail-truncated so the result has at most ``max_tokens`` ids."""
    ids = [vocab.index.get(w, UNK) for w in split_words(text)]
    ids = ids[: max_tokens - 2]
    return [BOS, *ids, EOS]


def pad_batch(seqs, max_tokens: int = MAX_TOKENS) -> torch.Tensor:
    out = torch.full((len(seqs), max_tokens), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s) > max_tokens:
            raise ValueError(f"token sequence of length {len(s)} exceeds {max_tokens}")
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


# --- config and modules ------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 4
    max_tokens: int = MAX_TOKENS
    d_embed: int = 64
    vocab_size: int = 64
    patch_dim: int = 16
    vision_hidden: int = 256
    vision_depth: int = 2
    text_dim: int = 64
    text_hidden: int = 128
    text_depth: int = 2

    def __post_init__(self):
        if self.d_embed < 2:
            raise ValueError("d_embed must be >= 2")
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("image size must be a multiple of the patch size")
        if self.max_tokens > MAX_TOKENS or self.max_tokens < 2:
            raise ValueError(f"max_tokens must be in [2, {MAX_TOKENS}]")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)


def _mlp(d_in: int, hidden: int, depth: int, d_out: int) -> nn.Sequential:
    layers, d = [], d_in
    for _ in range(depth):
        layers += [nn.Linear(d, hidden), nn.GELU()]
        d = hidden
    layers.append(nn.Linear(d, d_out))
    return nn.Sequential(*layers)


class VisionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch * cfg.channels, cfg.patch_dim)
        self.mlp = _mlp(cfg.n_patches * cfg.patch_dim, cfg.vision_hidden, cfg.vision_depth, cfg.d_embed)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        p = self.cfg.patch
        x = x.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.patch_embed(self.patchify((x - PIXEL_MEAN) / PIXEL_STD))
        return self.mlp(h.flatten(1))


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.max_tokens, cfg.text_dim))
        self.mlp = _mlp(cfg.text_dim, cfg.text_hidden, cfg.text_depth, cfg.d_embed)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        L = ids.shape[1]
        h = F.gelu(self.tok(ids) + self.pos[:L])
        mask = (ids != PAD).to(h.dtype)[..., None]
        pooled = (h * mask).sum(1) / mask.sum(1).clamp_min(1.0)
        return self.mlp(pooled)


def _init_uniform(module: nn.Module, gen: torch.Generator) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embedding tables have fan_in 1 (one-hot input)."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                b = 1.0 / math.sqrt(m.in_features)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * b - b)
                m.bias.copy_(torch.rand(m.bias.shape, generator=gen) * 2 * b - b)
            elif isinstance(m, nn.Embedding):
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 - 1)
            elif isinstance(m, TextEncoder):
                m.pos.copy_(torch.rand(m.pos.shape, generator=gen) * 2 - 1)


# --- model state -------------------------------------------------------------

class ModelState:
    """Trainable vision tower, text tower, temperature and the frozen snapshot.

    Forward passes only read parameters; anything that mutates them
    (training) must hold the state exclusively.
    """

    def __init__(self, config: EncoderConfig, vocab: Vocab, seed: int = 0, tau: float = 0.07):
        if len(vocab) != config.vocab_size:
            config = EncoderConfig(**{**asdict(config), "vocab_size": len(vocab)})
        self.config = config
        self.vocab = vocab
        gen = torch.Generator().manual_seed(int(seed))
        self.vision = VisionEncoder(config)
        self.text = TextEncoder(config)
        _init_uniform(self.vision, gen)
        _init_uniform(self.text, gen)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau), dtype=torch.float32))
        self.vision_orig: VisionEncoder | None = None
        self.finetune_steps = 0

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    @property
    def dtype(self) -> torch.dtype:
        return self.log_tau.dtype

    def copy(self) -> ModelState:
        return copy.deepcopy(self)

    def to(self, dtype: torch.dtype) -> ModelState:
        """Deep copy cast to ``dtype`` (float64 copies back finite-difference oracles)."""
        new = self.copy()
        new.vision = new.vision.to(dtype)
        new.text = new.text.to(dtype)
        if new.vision_orig is not None:
            new.vision_orig = new.vision_orig.to(dtype)
        new.log_tau = nn.Parameter(new.log_tau.detach().to(dtype))
        return new

    def clamp_temperature(self) -> None:
        clamp_log_tau(self.log_tau)

    def theta(self) -> list[nn.Parameter]:
        return list(self.vision.parameters())

    def phi(self) -> list[nn.Parameter]:
        return list(self.text.parameters())


def snapshot(state: ModelState) -> ModelState:
    """Freeze a copy of the vision tower as the reference encoder (in place; returns ``state``)."""
    if state.finetune_steps > 0:
        raise StateError("cannot re-snapshot after fine-tuning has started")
    orig = copy.deepcopy(state.vision)
    for p in orig.parameters():
        p.requires_grad_(False)
    state.vision_orig = orig
    return state


def _as_images(state: ModelState, x) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(state.dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    c = state.config
    if x.ndim != 4 or tuple(x.shape[1:]) != (c.height, c.width, c.channels):
        raise ValueError(f"expected images of shape (H, W, C) = {(c.height, c.width, c.channels)}, got {tuple(x.shape)}")
    return x.to(state.dtype), single


def encode_image(state: ModelState, x, which: str = "theta") -> tuple[torch.Tensor, torch.Tensor]:
    """(raw, unit-norm) image embeddings from the live (``theta``) or frozen (``theta_orig``) tower."""
    x, single = _as_images(state, x)
    if which == "theta":
        tower = state.vision
    elif which == "theta_orig":
        if state.vision_orig is None:
            raise StateError("no snapshot: call snapshot(state) first")
        tower = state.vision_orig
    else:
        raise ValueError(f"unknown encoder {which!r}")
    raw = tower(x)
    emb = raw / raw.norm(dim=-1, keepdim=True)
    return (raw[0], emb[0]) if single else (raw, emb)


def encode_tokens(state: ModelState, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Encode a padded ``(B, L)`` id batch."""
    if ids.shape[-1] > state.config.max_tokens:
        raise ValueError(f"token sequence longer than {state.config.max_tokens}")
    raw = state.text(ids)
    return raw, raw / raw.norm(dim=-1, keepdim=True)


def encode_text(state: ModelState, tokens) -> tuple[torch.Tensor, torch.Tensor]:
    """Encode a single token sequence (list of ids)."""
    tokens = list(tokens)
    if len(tokens) > state.config.max_tokens:
        raise ValueError(f"token sequence of length {len(tokens)} exceeds {state.config.max_tokens}")
    raw, emb = encode_tokens(state, pad_batch([tokens], state.config.max_tokens))
    return raw[0], emb[0]


def tokenize_batch(state: ModelState, texts) -> torch.Tensor:
    return pad_batch([tokenize(t, state.vocab, state.config.max_tokens) for t in texts], state.config.max_tokens)


def encode_texts(state: ModelState, texts) -> tuple[torch.Tensor, torch.Tensor]:
    return encode_tokens(state, tokenize_batch(state, texts))


def gradient(state: ModelState, objective, wrt: str = "input", x=None) -> torch.Tensor | list[torch.Tensor]:
    """Reverse-mode derivative of a scalar ``objective(x, state)``.

    ``wrt="input"`` differentiates with respect to ``x``; ``wrt="theta"``
    returns one gradient per vision-tower parameter.
    """
    if wrt == "input":
        if x is None:
            raise ValueError("gradient w.r.t. input needs x")
        x = torch.as_tensor(x).detach().clone().requires_grad_(True)
        out = objective(x, state)
        if not out.requires_grad:  # constant objective
            return torch.zeros_like(x)
        (g,) = torch.autograd.grad(out, x, allow_unused=True)
        return torch.zeros_like(x) if g is None else g
    if wrt == "theta":
        params = state.theta()
        out = objective(x, state)
        if not out.requires_grad:
            return [torch.zeros_like(p) for p in params]
        grads = torch.autograd.grad(out, params, allow_unused=True)
        return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    raise NotImplementedError(f"cannot differentiate with respect to {wrt!r}")


# --- checkpoint file ---------------------------------------------------------
# b"RALB" | u32 version | u32 n_fields | u32 config fields (EncoderConfig order)
# | u32 has_snapshot | u32 finetune_steps
# | f32 arrays: vision params, text params, log_tau, [snapshot vision params]
#   (each module in state_dict order; shapes follow from the config)
# | u32 vocab byte length | UTF-8 vocabulary, one token per line

CKPT_MAGIC = b"RALB"
CKPT_VERSION = 1


def _tensors(state: ModelState) -> list[torch.Tensor]:
    ts = list(state.vision.state_dict().values()) + list(state.text.state_dict().values())
    ts.append(state.log_tau.detach().reshape(1))
    if state.vision_orig is not None:
        ts += list(state.vision_orig.state_dict().values())
    return ts


def checkpoint_bytes(state: ModelState) -> bytes:
    cfg = [getattr(state.config, f.name) for f in fields(EncoderConfig)]
    parts = [
        CKPT_MAGIC,
        struct.pack("<II", CKPT_VERSION, len(cfg)),
        struct.pack(f"<{len(cfg)}I", *cfg),
        struct.pack("<II", int(state.vision_orig is not None), int(state.finetune_steps)),
    ]
    for t in _tensors(state):
        parts.append(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    vocab = state.vocab.to_text().encode("utf-8")
    parts += [struct.pack("<I", len(vocab)), vocab]
    return b"".join(parts)


def save_checkpoint(state: ModelState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state))
    return path


def load_checkpoint(path) -> ModelState:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a RALB checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    names = [f.name for f in fields(EncoderConfig)]
    if n != len(names):
        raise ValueError(f"{path}: config block has {n} fields, expected {len(names)}")
    off = 12
    cfg = EncoderConfig(**dict(zip(names, struct.unpack_from(f"<{n}I", buf, off))))
    off += 4 * n
    has_snap, steps = struct.unpack_from("<II", buf, off)
    off += 8
    # vocab sits at the end; parse it last but size the state from the config
    state = ModelState(cfg, Vocab(list(SPECIALS) + [f"<{i}>" for i in range(cfg.vocab_size - len(SPECIALS))]))
    if has_snap:
        snapshot(state)
    for t in _tensors(state):
        count = t.numel()
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(t.shape)
        with torch.no_grad():
            t.copy_(torch.from_numpy(arr.astype(np.float32)))
        off += 4 * count
    (vlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    state.vocab = Vocab.from_text(buf[off : off + vlen].decode("utf-8"))
    if len(state.vocab) != cfg.vocab_size or off + vlen != len(buf):
        raise ValueError(f"{path}: corrupt checkpoint (vocabulary/size mismatch)")
    state.finetune_steps = steps
    return state


def new_model(texts, config: EncoderConfig | None = None, seed: int = 0, tau: float = 0.07) -> ModelState:
    """Fresh seeded model whose vocabulary is built from ``texts``."""
    vocab = Vocab.build(texts)
    return ModelState(config or EncoderConfig(), vocab, seed=seed, tau=tau)

"""Toy vision transformer with a scene-specific prompt pool and versatile prompts.

The same backbone serves three roles:

* ``bank``     -- prompt pool of shape ``(S, N, D)``; each sample is routed through
  the prompt group of its scene label.
* ``vbranch``  -- ``M`` versatile prompts ``(M, D)`` appended to every image.
* ``backbone`` -- no prompts (contrastive pretraining encoder, N=0 baselines).

Prompts are appended after the image tokens and never receive positional
encodings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BACKBONE_PREFIXES = ("patch.", "cls", "pos", "block", "norm.")
BUFFERS = frozenset({"neck.running_mean", "neck.running_var"})
NECK_MOMENTUM = 0.1
NECK_EPS = 1e-5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 16
    channels: int = 3
    patch: int = 8
    stride: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    num_scenes: int = 5
    prompts_per_scene: int = 2
    versatile_prompts: int = 5
    num_classes: int = 40

    def __post_init__(self):
        for side in (self.height, self.width):
            if side < self.patch or (side - self.patch) % self.stride:
                raise ConfigError(
                    f"image side {side} incompatible with patch {self.patch}, stride {self.stride}"
                )
        if self.dim % self.heads:
            raise ConfigError(f"embed dim {self.dim} not divisible by {self.heads} heads")
        if min(self.num_scenes, self.num_classes, self.depth) < 1:
            raise ConfigError("num_scenes, num_classes and depth must be positive")
        if min(self.prompts_per_scene, self.versatile_prompts) < 0:
            raise ConfigError("prompt counts must be non-negative")

    @property
    def grid(self) -> tuple[int, int]:
        return ((self.height - self.patch) // self.stride + 1,
                (self.width - self.patch) // self.stride + 1)

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


class Branch:
    """Named parameter table plus the config needed to run it."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], kind: str):
        if kind not in ("bank", "vbranch", "backbone"):
            raise ConfigError(f"unknown branch kind {kind!r}")
        self.config = config
        self.params = params
        self.kind = kind
        # batch statistics in the neck while training, running statistics otherwise
        self.training = False

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n not in BUFFERS}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(BACKBONE_PREFIXES)]

    def astype(self, dtype) -> "Branch":
        return Branch(
            self.config,
            {n: _tensor(p.data.astype(dtype), n) for n, p in self.params.items()},
            self.kind,
        )

    def clone(self) -> "Branch":
        return Branch(self.config, {n: _tensor(p.data.copy(), n) for n, p in self.params.items()},
                      self.kind)


def _param(data: np.ndarray, name: str) -> Tensor:
    t = Tensor._wrap(np.ascontiguousarray(data))
    t.requires_grad = True
    t.name = name
    return t


def _tensor(data: np.ndarray, name: str) -> Tensor:
    """Parameter or buffer, depending on the name."""
    t = _param(data, name)
    t.requires_grad = name not in BUFFERS
    return t


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


def init_backbone(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, hidden = config.dim, config.dim * config.mlp_ratio
    patch_in = config.patch * config.patch * config.channels
    p: dict[str, np.ndarray] = {
        "patch.weight": _xavier(rng, patch_in, d),
        "patch.bias": np.zeros(d, np.float32),
        "cls": _normal(rng, (1, d)),
        "pos": _normal(rng, (1 + config.num_tokens, d)),
    }
    for i in range(config.depth):
        b = f"block{i}."
        p[b + "ln1.gain"] = np.ones(d, np.float32)
        p[b + "ln1.bias"] = np.zeros(d, np.float32)
        p[b + "attn.qkv.weight"] = _xavier(rng, d, 3 * d)
        p[b + "attn.qkv.bias"] = np.zeros(3 * d, np.float32)
        p[b + "attn.proj.weight"] = _xavier(rng, d, d)
        p[b + "attn.proj.bias"] = np.zeros(d, np.float32)
        p[b + "ln2.gain"] = np.ones(d, np.float32)
        p[b + "ln2.bias"] = np.zeros(d, np.float32)
        p[b + "mlp.fc1.weight"] = _xavier(rng, d, hidden)
        p[b + "mlp.fc1.bias"] = np.zeros(hidden, np.float32)
        p[b + "mlp.fc2.weight"] = _xavier(rng, hidden, d)
        p[b + "mlp.fc2.bias"] = np.zeros(d, np.float32)
    p["norm.gain"] = np.ones(d, np.float32)
    p["norm.bias"] = np.zeros(d, np.float32)
    return {n: _param(v, n) for n, v in p.items()}


def init_head(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Pre-classifier batch normalisation and the identity classifier."""
    d = config.dim
    return {
        "neck.gain": _param(np.ones(d, np.float32), "neck.gain"),
        "neck.bias": _param(np.zeros(d, np.float32), "neck.bias"),
        "neck.running_mean": _tensor(np.zeros(d, np.float32), "neck.running_mean"),
        "neck.running_var": _tensor(np.ones(d, np.float32), "neck.running_var"),
        "classifier.weight": _param(_normal(rng, (d, config.num_classes), 0.001),
                                    "classifier.weight"),
    }


def init_bank(config: ModelConfig, rng: np.random.Generator) -> Branch:
    params = init_backbone(config, rng)
    params["prompts.scene"] = _param(
        _normal(rng, (config.num_scenes, config.prompts_per_scene, config.dim)), "prompts.scene"
    )
    params.update(init_head(config, rng))
    return Branch(config, params, "bank")


def init_plain(config: ModelConfig, rng: np.random.Generator, with_head: bool = True) -> Branch:
    params = init_backbone(config, rng)
    if with_head:
        params.update(init_head(config, rng))
    return Branch(config, params, "backbone")


def init_vbranch_from_bank(bank: Branch, rng: np.random.Generator) -> Branch:
    """Copy the bank's backbone; versatile prompts and head are fresh."""
    if bank.kind != "bank":
        raise ConfigError(f"expected a bank branch, got {bank.kind!r}")
    cfg = bank.config
    params = {n: _param(bank.params[n].data.copy(), n) for n in bank.backbone_names()}
    expected = set(init_backbone(cfg, np.random.default_rng(0)))
    if set(params) != expected:
        raise ConfigError("bank checkpoint does not match the model config backbone")
    params["prompts.versatile"] = _param(_normal(rng, (cfg.versatile_prompts, cfg.dim)),
                                         "prompts.versatile")
    params.update(init_head(cfg, rng))
    return Branch(cfg, params, "vbranch")


# -- forward ---------------------------------------------------------------

def patchify(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """``(B, H, W, C)`` images in [0, 1] -> ``(B, l, patch*patch*C)`` centred patches."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    expect = (config.height, config.width, config.channels)
    if images.shape[1:] != expect:
        raise ConfigError(f"image shape {images.shape[1:]} does not match config {expect}")
    p, s = config.patch, config.stride
    windows = np.lib.stride_tricks.sliding_window_view(images, (p, p), axis=(1, 2))
    windows = windows[:, ::s, ::s]  # (B, gh, gw, C, p, p)
    b, gh, gw = windows.shape[:3]
    patches = windows.transpose(0, 1, 2, 4, 5, 3).reshape(b, gh * gw, p * p * config.channels)
    return ((patches - 0.5) / 0.25).astype(T.default_dtype())


def serialize_image(images: np.ndarray, branch: Branch) -> Tensor:
    """Embed patches, prepend the class token, add positional encodings.

    Returns ``(B, 1+l, D)``; row 0 of each sequence is the class-token slot.
    """
    cfg, P = branch.config, branch.params
    patches = Tensor(patchify(images, cfg))
    tokens = patches @ P["patch.weight"] + P["patch.bias"]
    b = tokens.shape[0]
    cls = T.broadcast_to(P["cls"], (b, 1, cfg.dim))
    return T.concat([cls, tokens], axis=1) + P["pos"]


def assemble_sequence(tokens: Tensor, prompts: Tensor | None) -> Tensor:
    """Append prompt rows after the image tokens (no positional encoding)."""
    if prompts is None or prompts.shape[-2] == 0:
        return tokens
    if prompts.shape[-1] != tokens.shape[-1]:
        raise T.ShapeError(f"prompt dim {prompts.shape[-1]} != token dim {tokens.shape[-1]}")
    if prompts.ndim == 2 and tokens.ndim == 3:
        prompts = T.broadcast_to(prompts, (tokens.shape[0],) + prompts.shape)
    return T.concat([tokens, prompts], axis=-2)


def _attention(x: Tensor, P: dict, pre: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = x @ P[pre + "qkv.weight"] + P[pre + "qkv.bias"]
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax_rows(T.scale(q @ T.transpose(k), 1.0 / np.sqrt(dh)))
    out = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (b, n, d))
    return out @ P[pre + "proj.weight"] + P[pre + "proj.bias"]


def transformer_forward(seq: Tensor, branch: Branch) -> Tensor:
    """Pre-norm blocks with full self-attention over all rows, then the final norm."""
    cfg, P = branch.config, branch.params
    squeeze = seq.ndim == 2
    x = T.reshape(seq, (1,) + seq.shape) if squeeze else seq
    for i in range(cfg.depth):
        b = f"block{i}."
        h = T.layer_norm_rows(x, P[b + "ln1.gain"], P[b + "ln1.bias"])
        x = x + _attention(h, P, b + "attn.", cfg.heads)
        h = T.layer_norm_rows(x, P[b + "ln2.gain"], P[b + "ln2.bias"])
        h = T.gelu(h @ P[b + "mlp.fc1.weight"] + P[b + "mlp.fc1.bias"])
        x = x + (h @ P[b + "mlp.fc2.weight"] + P[b + "mlp.fc2.bias"])
    x = T.layer_norm_rows(x, P["norm.gain"], P["norm.bias"])
    return T.reshape(x, seq.shape) if squeeze else x


def neck(f: Tensor, branch: Branch) -> Tensor:
    """Per-feature normalisation of ``(B, D)`` features ahead of the classifier.

    Training mode normalises with batch statistics and updates the running
    averages; otherwise the running averages are used, so inference does not
    depend on batch composition.
    """
    P = branch.params
    rm, rv = P["neck.running_mean"], P["neck.running_var"]
    if branch.training:
        mu = T.mean(f, axis=0, keepdims=True)
        xc = f - mu
        var = T.mean(xc * xc, axis=0, keepdims=True)
        b = f.shape[0]
        m = rm.data.dtype.type(NECK_MOMENTUM)
        unbiased = var.data[0] * (b / max(b - 1, 1))
        rm.data = (1 - m) * rm.data + m * mu.data[0]
        rv.data = (1 - m) * rv.data + m * unbiased
        normed = xc / T.sqrt(var + NECK_EPS)
    else:
        normed = (f - rm) / T.sqrt(rv + NECK_EPS)
    return normed * P["neck.gain"] + P["neck.bias"]


def classify(f: Tensor, branch: Branch) -> Tensor:
    """Identity probabilities from the normalised feature."""
    return T.softmax_rows(neck(f, branch) @ branch.params["classifier.weight"])


def encode(images: np.ndarray, branch: Branch, prompts: Tensor | None) -> Tensor:
    """Class-token feature ``(B, D)`` for the given prompt rows."""
    seq = assemble_sequence(serialize_image(images, branch), prompts)
    return transformer_forward(seq, branch)[:, 0, :]


def scene_prompts(branch: Branch, scene_labels) -> Tensor:
    labels = np.atleast_1d(np.asarray(scene_labels, dtype=np.intp))
    s = branch.config.num_scenes
    if labels.size and (labels.min() < 0 or labels.max() >= s):
        raise IndexError(f"scene label out of range 0..{s - 1}: {labels.tolist()}")
    return T.take(branch.params["prompts.scene"], labels, axis=0)


def forward_bank(images: np.ndarray, scene_labels, bank: Branch,
                 with_probs: bool = True) -> tuple[Tensor, Tensor | None]:
    if bank.kind != "bank":
        raise ConfigError(f"forward_bank needs a bank branch, got {bank.kind!r}")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    labels = np.broadcast_to(np.asarray(scene_labels, dtype=np.intp), (images.shape[0],))
    f = encode(images, bank, scene_prompts(bank, labels))
    return f, (classify(f, bank) if with_probs else None)


def forward_vbranch(images: np.ndarray, vb: Branch,
                    with_probs: bool = True) -> tuple[Tensor, Tensor | None]:
    if vb.kind != "vbranch":
        raise ConfigError(f"forward_vbranch needs a vbranch, got {vb.kind!r}")
    f = encode(images, vb, vb.params["prompts.versatile"])
    return f, (classify(f, vb) if with_probs else None)


def forward_plain(images: np.ndarray, branch: Branch,
                  with_probs: bool = True) -> tuple[Tensor, Tensor | None]:
    f = encode(images, branch, None)
    return f, (classify(f, branch) if with_probs and "classifier.weight" in branch.params else None)


def forward(images: np.ndarray, branch: Branch, scene_labels=None,
            with_probs: bool = True) -> tuple[Tensor, Tensor | None]:
    """Dispatch on branch kind; scene labels are consumed by the bank only."""
    if branch.kind == "bank":
        if scene_labels is None:
            raise ValueError("the ReID bank requires scene labels")
        return forward_bank(images, scene_labels, branch, with_probs)
    if branch.kind == "vbranch":
        return forward_vbranch(images, branch, with_probs)
    return forward_plain(images, branch, with_probs)


def parameter_digest(branch: Branch) -> str:
    h = hashlib.sha256()
    for name in sorted(branch.params):
        h.update(name.encode())
        h.update(branch.params[name].data.tobytes())
    return h.hexdigest()


"""Miniature SAM2-style tracker: ViT encoder with adapter slots, box prompt
encoder, FIFO streaming memory and a two-way transformer mask decoder.

All model code is functional: parameters live in a :class:`ModelState` and
every forward function reads them by name.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .adapter import (VARIANTS, AdapterParams, DDAdapterConfig, dd_adapter_forward,
                      init_adapter, std_adapter_forward)
from .errors import ConfigError, PromptError, ShapeError

ADAPTER_SCOPE = "encoder.adapters."
DECODER_SCOPE = "decoder."
POLICIES = ("paper", "all", "none")
GT_LOGIT = 10.0
DECODER_DEPTH = 2


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    heads: int = 4
    blocks: int = 8
    mlp_ratio: int = 4
    adapter_count: int = 6
    adapter_variant: str = "dd"
    reduction: int = 4
    kernel: int = 3
    dilation_rates: tuple = (1, 3)

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(r) for r in self.dilation_rates))
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be a multiple of 4 for the sinusoidal encodings")
        if self.adapter_variant not in VARIANTS:
            raise ConfigError(f"unknown adapter variant {self.adapter_variant!r}")
        if not 0 <= self.adapter_count <= self.blocks:
            raise ConfigError(f"adapter_count must lie in 0..{self.blocks}")
        if self.adapter_variant == "none" and self.adapter_count:
            raise ConfigError("variant 'none' requires adapter_count 0")
        self.adapter_cfg  # validates reduction/kernel/rates

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def adapter_cfg(self):
        rates = self.dilation_rates if self.adapter_variant == "dd" else ()
        return DDAdapterConfig(self.embed_dim, self.reduction, self.kernel, rates)

    @property
    def n_adapters(self):
        return 0 if self.adapter_variant == "none" else self.adapter_count

    def to_dict(self):
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "dilation_rates": tuple(d["dilation_rates"])})


@dataclass
class ModelState:
    config: EncoderConfig
    params: dict = field(default_factory=dict)
    trainable: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def trainable_names(self):
        return [n for n in self.params if self.trainable.get(n, False)]

    def count(self, trainable_only=False):
        return sum(t.size for n, t in self.params.items()
                   if not trainable_only or self.trainable.get(n, False))

    def count_scope(self, prefix):
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def copy(self):
        params = {n: T.Tensor(t.data.copy()) for n, t in self.params.items()}
        return ModelState(self.config, params, dict(self.trainable))


@dataclass(frozen=True)
class BoxPrompt:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def validate(self, width, height):
        if not (0 <= self.x_min < self.x_max <= width and 0 <= self.y_min < self.y_max <= height):
            raise PromptError(f"invalid box {self} for a {width}x{height} image")

    @classmethod
    def from_mask(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise PromptError("cannot build a box prompt from an empty mask")
        ys, xs = np.nonzero(mask)
        return cls(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


class MemoryBank:
    """Bounded FIFO of (entry, frame_index); pushing past capacity drops the oldest."""

    def __init__(self, capacity=4):
        if capacity < 1:
            raise ConfigError(f"memory capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.entries = deque(maxlen=capacity)

    def __len__(self):
        return len(self.entries)

    @property
    def frame_indices(self):
        return [i for _, i in self.entries]


def bank_push(bank, entry, frame_index):
    bank.entries.append((entry, frame_index))
    return bank


# ---------------------------------------------------------------- init


def sincos_encoding(u, v, dim):
    """Sinusoidal encoding of normalized coordinates; ``dim/4`` frequencies per axis."""
    u = np.asarray(u, dtype=np.float64)[..., None]
    v = np.asarray(v, dtype=np.float64)[..., None]
    freqs = math.pi * np.arange(1, dim // 4 + 1, dtype=np.float64)
    return np.concatenate([np.sin(freqs * u), np.cos(freqs * u),
                           np.sin(freqs * v), np.cos(freqs * v)], axis=-1)


_pe_cache = {}


def grid_encoding(grid, dim):
    """[grid*grid, dim] encoding of token centres, row-major."""
    key = (grid, dim)
    if key not in _pe_cache:
        c = (np.arange(grid) + 0.5) / grid
        yy, xx = np.meshgrid(c, c, indexing="ij")
        pe = sincos_encoding(xx.reshape(-1), yy.reshape(-1), dim)
        pe.setflags(write=False)
        _pe_cache[key] = pe
    return _pe_cache[key]


class _Init:
    def __init__(self, rng):
        self.rng = rng
        self.params = {}

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        self.params[name] = T.Tensor(self.rng.uniform(-bound, bound, size=shape))

    def linear(self, name, dout, din):
        self.uniform(name + ".w", (dout, din), din)
        self.uniform(name + ".b", (dout,), din)

    def norm(self, name, d):
        self.params[name + ".g"] = T.Tensor(np.ones(d))
        self.params[name + ".b"] = T.Tensor(np.zeros(d))

    def normal(self, name, shape, std):
        self.params[name] = T.Tensor(self.rng.normal(0.0, std, size=shape))

    def attn(self, name, d):
        for proj in ("q", "k", "v", "o"):
            self.linear(f"{name}.{proj}", d, d)


def init_state(cfg, seed=0, policy="paper"):
    """Randomly initialised model. Adapters start with zero up-projections."""
    rng = np.random.default_rng(seed)
    d, p, g = cfg.embed_dim, cfg.patch_size, cfg.grid
    ini = _Init(rng)
    ini.linear("encoder.patch", d, p * p)
    ini.params["encoder.pos"] = T.Tensor(grid_encoding(g, d).copy())
    for i in range(cfg.blocks):
        b = f"encoder.blocks.{i}"
        ini.norm(b + ".ln1", d)
        ini.linear(b + ".attn.qkv", 3 * d, d)
        ini.linear(b + ".attn.proj", d, d)
        ini.norm(b + ".ln2", d)
        ini.linear(b + ".mlp.fc1", d * cfg.mlp_ratio, d)
        ini.linear(b + ".mlp.fc2", d, d * cfg.mlp_ratio)
    ini.norm("encoder.neck", d)

    ini.normal("prompt.corner", (2, d), 1.0)

    ini.uniform("memory.enc.mask.w", (d, 1), 1)
    ini.uniform("memory.enc.mask.b", (d,), 1)
    ini.uniform("memory.enc.dw.w", (d, 3, 3), 9)
    ini.uniform("memory.enc.dw.b", (d,), 9)
    ini.attn("memory.attn", d)

    ini.normal("decoder.mask_token", (1, d), 1.0)
    for i in range(DECODER_DEPTH):
        b = f"decoder.blocks.{i}"
        ini.attn(b + ".self", d)
        ini.norm(b + ".norm1", d)
        ini.attn(b + ".t2i", d)
        ini.norm(b + ".norm2", d)
        ini.linear(b + ".mlp.fc1", 2 * d, d)
        ini.linear(b + ".mlp.fc2", d, 2 * d)
        ini.norm(b + ".norm3", d)
        ini.attn(b + ".i2t", d)
        ini.norm(b + ".norm4", d)
    ini.linear("decoder.pix", d, d)
    ini.linear("decoder.hyper.fc1", d, d)
    ini.linear("decoder.hyper.fc2", d, d)

    params = ini.params
    if cfg.n_adapters:
        acfg = cfg.adapter_cfg
        for i in range(cfg.n_adapters):
            ap = init_adapter(acfg, rng, cfg.adapter_variant)
            params.update(ap.named(f"{ADAPTER_SCOPE}{i}."))
    state = ModelState(cfg, params, {})
    return set_trainable(state, policy)


def set_trainable(state, policy):
    if policy not in POLICIES:
        raise ConfigError(f"unknown trainable policy {policy!r}; expected one of {POLICIES}")
    for name in state.params:
        if policy == "all":
            flag = True
        elif policy == "none":
            flag = False
        else:
            flag = name.startswith(ADAPTER_SCOPE) or name.startswith(DECODER_SCOPE)
        state.trainable[name] = flag
    return state


# ---------------------------------------------------------------- encoder


def _lin(x, P, name):
    return T.linear(x, P[name + ".w"], P[name + ".b"])


def _ln(x, P, name):
    return T.layer_norm(x, P[name + ".g"], P[name + ".b"])


def _self_attention(x, P, name, heads):
    n, l, d = x.dims
    dh = d // heads
    qkv = T.reshape(_lin(x, P, name + ".qkv"), (n, l, 3, heads, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
    out = T.attention(T.take(qkv, 0, 0), T.take(qkv, 1, 0), T.take(qkv, 2, 0))
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, l, d))
    return _lin(out, P, name + ".proj")


def tokens_to_map(x, grid):
    n, _, d = x.dims
    return T.transpose(T.reshape(x, (n, grid, grid, d)), (0, 3, 1, 2))


def map_to_tokens(f):
    n, d, h, w = f.dims
    return T.reshape(T.transpose(f, (0, 2, 3, 1)), (n, h * w, d))


def _patchify(img, p):
    n, _, h, w = img.dims
    x = T.reshape(img, (n, h // p, p, w // p, p))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (n, (h // p) * (w // p), p * p))


def apply_adapter(f, state, index):
    cfg = state.config
    acfg = cfg.adapter_cfg
    p = AdapterParams.from_state(state.params, f"{ADAPTER_SCOPE}{index}.", acfg.n_branches)
    if cfg.adapter_variant == "dd":
        return dd_adapter_forward(f, p, acfg)
    return std_adapter_forward(f, p, acfg)


def encode_frames(img, state, cfg=None):
    """Encode a batch of frames [N,1,S,S] into feature maps [N,d,S/p,S/p]."""
    cfg = cfg or state.config
    img = T.as_tensor(img)
    s = cfg.image_size
    if img.data.ndim != 4 or img.dims[1:] != (1, s, s):
        raise ShapeError(f"encoder expects frames of dims (N,1,{s},{s}), got {img.dims}")
    P = state.params
    x = _lin(_patchify(img, cfg.patch_size), P, "encoder.patch") + P["encoder.pos"]
    for i in range(cfg.blocks):
        b = f"encoder.blocks.{i}"
        x = x + _self_attention(_ln(x, P, b + ".ln1"), P, b + ".attn", cfg.heads)
        h = T.gelu(_lin(_ln(x, P, b + ".ln2"), P, b + ".mlp.fc1"))
        x = x + _lin(h, P, b + ".mlp.fc2")
        if i < cfg.n_adapters:
            f = apply_adapter(tokens_to_map(x, cfg.grid), state, i)
            x = map_to_tokens(f)
    return tokens_to_map(_ln(x, P, "encoder.neck"), cfg.grid)


def encode_frame(img, state, cfg=None):
    img = T.as_tensor(img)
    if img.dims[0] != 1:
        raise ShapeError(f"encode_frame takes a single frame, got batch {img.dims[0]}")
    return encode_frames(img, state, cfg)


# ---------------------------------------------------------------- prompt


def encode_box(box, state, cfg=None):
    cfg = cfg or state.config
    s = cfg.image_size
    box.validate(s, s)
    corners = sincos_encoding([box.x_min / s, box.x_max / s],
                              [box.y_min / s, box.y_max / s], cfg.embed_dim)
    return T.Tensor(corners) + state.params["prompt.corner"]


# ---------------------------------------------------------------- memory


def memory_encode(features, mask_logits, state):
    P = state.params
    n, d, h, w = features.dims
    mask_logits = T.as_tensor(mask_logits)
    if mask_logits.data.ndim != 4 or mask_logits.dims[:2] != (n, 1):
        raise ShapeError(f"mask logits dims {mask_logits.dims} do not match features {features.dims}")
    m = T.resize_bilinear(mask_logits, h, w)
    m = T.conv2d_pointwise(m, P["memory.enc.mask.w"], P["memory.enc.mask.b"])
    fused = features + m
    return T.gelu(T.conv2d_depthwise(fused, P["memory.enc.dw.w"], P["memory.enc.dw.b"], 1))


def _cross_attention(q_in, k_in, v_in, P, name):
    q = _lin(q_in, P, name + ".q")
    k = _lin(k_in, P, name + ".k")
    v = _lin(v_in, P, name + ".v")
    return _lin(T.attention(q, k, v), P, name + ".o")


def memory_attention(features, bank, state):
    if len(bank) == 0:
        return features
    n, d, h, w = features.dims
    pe = grid_encoding(h, d)
    x = map_to_tokens(features)
    mem = T.concat([map_to_tokens(e) for e, _ in bank.entries], axis=1)
    pe_mem = np.tile(pe, (len(bank), 1))
    out = _cross_attention(x + pe, mem + pe_mem, mem, state.params, "memory.attn")
    return tokens_to_map(x + out, h)


# ---------------------------------------------------------------- decoder


def _batched(t, n):
    """Broadcast [k,d] to [n,k,d]; [n,k,d] passes through."""
    if t.data.ndim == 3:
        return t
    return T.add(T.Tensor(np.zeros((n, 1, 1))), t)


def decode_mask(cond_features, prompt_emb, state, cfg=None):
    """Mask logits [N,1,S,S] from conditioned features and a prompt embedding."""
    cfg = cfg or state.config
    P = state.params
    n, d, h, w = cond_features.dims
    if d != cfg.embed_dim or h != cfg.grid:
        raise ShapeError(f"decoder expects features (N,{cfg.embed_dim},{cfg.grid},{cfg.grid}), "
                         f"got {cond_features.dims}")
    pe = grid_encoding(h, d)
    x = map_to_tokens(cond_features)
    tok = T.concat([_batched(P["decoder.mask_token"], n), _batched(prompt_emb, n)], axis=1)
    for i in range(DECODER_DEPTH):
        b = f"decoder.blocks.{i}"
        tok = _ln(tok + _cross_attention(tok, tok, tok, P, b + ".self"), P, b + ".norm1")
        tok = _ln(tok + _cross_attention(tok, x + pe, x, P, b + ".t2i"), P, b + ".norm2")
        hid = T.gelu(_lin(tok, P, b + ".mlp.fc1"))
        tok = _ln(tok + _lin(hid, P, b + ".mlp.fc2"), P, b + ".norm3")
        x = _ln(x + _cross_attention(x + pe, tok, tok, P, b + ".i2t"), P, b + ".norm4")
    mask_tok = T.take(tok, slice(0, 1), 1)  # [N,1,d]
    weight = _lin(T.gelu(_lin(mask_tok, P, "decoder.hyper.fc1")), P, "decoder.hyper.fc2")
    pix = _lin(x, P, "decoder.pix")
    low = T.matmul(pix, T.transpose(weight, (0, 2, 1)))  # [N,L,1]
    low = T.reshape(low, (n, 1, h, w))
    return T.resize_bilinear(low, cfg.image_size, cfg.image_size)


# ---------------------------------------------------------------- tracking


def unroll(frames, first_masks, state, capacity=4, cfg=None):
    """Stream ``frames`` [N,T,S,S] through the tracker.

    Frame 0 seeds memory from the ground-truth masks; frames 1..T-1 are
    predicted. Returns the list of logits for frames 1..T-1 and the bank.
    Records on the active tape, if any.
    """
    cfg = cfg or state.config
    frames = np.asarray(frames, dtype=np.float64)
    first_masks = np.asarray(first_masks, dtype=bool)
    n, t, s, _ = frames.shape
    d = cfg.embed_dim
    prompts = T.concat([T.reshape(encode_box(BoxPrompt.from_mask(m), state, cfg), (1, 2, d))
                        for m in first_masks], axis=0)
    feats = encode_frames(T.Tensor(frames.reshape(n * t, 1, s, s)), state, cfg)
    feats = T.reshape(feats, (n, t) + feats.dims[1:])
    bank = MemoryBank(capacity)
    seed = np.where(first_masks, GT_LOGIT, -GT_LOGIT)[:, None]
    bank_push(bank, memory_encode(T.take(feats, 0, 1), seed, state), 0)
    logits = []
    for i in range(1, t):
        f = T.take(feats, i, 1)
        out = decode_mask(memory_attention(f, bank, state), prompts, state, cfg)
        logits.append(out)
        bank_push(bank, memory_encode(f, out, state), i)
    return logits, bank


def track_video(frames, first_mask, state, cfg=None, capacity=4):
    """Masks for every frame of one video; frame 0 returns ``first_mask``."""
    frames = np.asarray(frames, dtype=np.float64)
    first_mask = np.asarray(first_mask, dtype=bool)
    if frames.ndim != 3 or len(frames) < 1:
        raise ShapeError(f"track_video expects frames [T,S,S], got {frames.shape}")
    if not first_mask.any():
        raise PromptError("first-frame mask is empty")
    logits, _ = unroll(frames[None], first_mask[None], state, capacity, cfg)
    return [first_mask.copy()] + [lg.data[0, 0] > 0.0 for lg in logits]

"""Parameter and multiply-accumulate accounting for the mini tracker."""

from __future__ import annotations

from .adapter import flop_count, param_count
from .model import ADAPTER_SCOPE, DECODER_DEPTH


def adapter_params_closed_form(cfg):
    return cfg.n_adapters * param_count(cfg.adapter_cfg)


def adapter_params_enumerated(state):
    return state.count_scope(ADAPTER_SCOPE)


def _attn(lq, lk, d):
    """q/k/v/o projections plus the two attention products."""
    return lq * d * d + 2 * lk * d * d + lq * d * d + 2 * lq * lk * d


def model_macs(cfg, bank_size=4):
    """Per-frame MACs by component for a frame tracked with ``bank_size`` memories."""
    d, g, p = cfg.embed_dim, cfg.grid, cfg.patch_size
    L = g * g
    block = (L * d * 3 * d + 2 * L * L * d + L * d * d
             + 2 * L * d * d * cfg.mlp_ratio)
    out = {
        "patch_embed": L * p * p * d,
        "encoder_blocks": cfg.blocks * block,
        "adapters": cfg.n_adapters * flop_count(cfg.adapter_cfg, g, g),
        "memory_encoder": L * d + 9 * L * d,
        "memory_attention": _attn(L, bank_size * L, d),
    }
    t = 3  # mask token + two box corners
    dec = DECODER_DEPTH * (_attn(t, t, d) + _attn(t, L, d) + 2 * t * d * 2 * d + _attn(L, t, d))
    out["mask_decoder"] = dec + L * d * d + 2 * d * d + L * d
    out["total"] = sum(out.values())
    return out

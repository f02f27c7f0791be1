"""Parameter layout, initialisation and counting for the whole model."""

from __future__ import annotations

import zlib
from collections.abc import Mapping
from typing import Iterator

import numpy as np

from .config import ModelConfig
from .tensor import Tensor

COMPONENTS = ("vision", "text", "fusion", "decoder")
HEADS = ("mim", "mlm", "detect")


def _ln(prefix: str, d: int) -> dict:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _linear(prefix: str, d_in: int, d_out: int) -> dict:
    return {f"{prefix}.w": (d_in, d_out), f"{prefix}.b": (d_out,)}


def _attn(prefix: str, d: int, d_kv: int | None = None) -> dict:
    d_kv = d if d_kv is None else d_kv
    out = {}
    out.update(_linear(f"{prefix}.q", d, d))
    out.update(_linear(f"{prefix}.k", d_kv, d))
    out.update(_linear(f"{prefix}.v", d_kv, d))
    out.update(_linear(f"{prefix}.o", d, d))
    return out


def _ffn(prefix: str, d: int, mult: int) -> dict:
    out = _linear(f"{prefix}.up", d, mult * d)
    out.update(_linear(f"{prefix}.down", mult * d, d))
    return out


def param_shapes(cfg: ModelConfig, heads: bool = True) -> dict[str, tuple]:
    """Ordered name -> shape map; the single source of truth for layout."""
    s: dict[str, tuple] = {}
    dv, dt, df, dd, m = cfg.d_vision, cfg.d_text, cfg.d_fused, cfg.d_decoder, cfg.ffn_mult

    s.update(_linear("vision.patch", cfg.patch_dim, dv))
    s["vision.pos"] = (cfg.n_patches, dv)
    for i in range(cfg.vision_layers):
        p = f"vision.blocks.{i}"
        s.update(_ln(f"{p}.ln1", dv))
        s.update(_attn(f"{p}.attn", dv))
        s.update(_ln(f"{p}.ln2", dv))
        s.update(_ffn(f"{p}.ffn", dv, m))
    s.update(_ln("vision.ln_f", dv))

    s["text.tok"] = (cfg.vocab_size, dt)
    s["text.pos"] = (cfg.max_text_len, dt)
    for i in range(cfg.text_layers):
        p = f"text.blocks.{i}"
        s.update(_ln(f"{p}.ln1", dt))
        s.update(_attn(f"{p}.attn", dt))
        s.update(_ln(f"{p}.ln2", dt))
        s.update(_ffn(f"{p}.ffn", dt, m))
    s.update(_ln("text.ln_f", dt))

    for i in range(cfg.fusion_layers):
        p = f"fusion.blocks.{i}"
        s.update(_ln(f"{p}.ln1", df))
        s.update(_attn(f"{p}.xattn", df, dv))
        s.update(_ln(f"{p}.ln2", df))
        s.update(_ffn(f"{p}.ffn", df, m))
    s.update(_ln("fusion.ln_f", df))

    s["decoder.tok"] = (cfg.vocab_size, dd)
    s["decoder.pos"] = (cfg.max_report_len, dd)
    s.update(_linear("decoder.bridge", df, dd))
    for i in range(cfg.decoder_layers):
        p = f"decoder.blocks.{i}"
        s.update(_ln(f"{p}.ln1", dd))
        s.update(_attn(f"{p}.attn", dd))
        s.update(_ln(f"{p}.ln2", dd))
        s.update(_attn(f"{p}.xattn", dd))
        s.update(_ln(f"{p}.ln3", dd))
        s.update(_ffn(f"{p}.ffn", dd, m))
    s.update(_ln("decoder.ln_f", dd))
    s.update(_linear("decoder.out", dd, cfg.vocab_size))

    if heads:
        s["mim.mask_token"] = (dv,)
        s.update(_linear("mim.head", dv, cfg.patch_dim))
        s.update(_linear("mlm.head", dt, cfg.vocab_size))
        s.update(_linear("detect.head", dv, cfg.n_pathologies))
    return s


def count_parameters(cfg: ModelConfig, heads: bool = False) -> int:
    """Trainable scalars in the four model components (training heads optional)."""
    return int(sum(int(np.prod(shape)) for shape in param_shapes(cfg, heads=heads).values()))


def count_by_component(cfg: ModelConfig) -> dict[str, int]:
    out = {name: 0 for name in COMPONENTS + HEADS}
    for name, shape in param_shapes(cfg).items():
        out[name.split(".", 1)[0]] += int(np.prod(shape))
    return out


def init_value(name: str, shape: tuple, seed: int, std: float) -> np.ndarray:
    """Deterministic initial value of one named parameter.

    Each parameter owns an RNG stream keyed by (seed, crc32(name)), so values do
    not depend on construction order and can be regenerated on demand.
    """
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf == "b":
        return np.zeros(shape)
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.normal(0.0, std, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    return {name: Tensor(init_value(name, shape, seed, cfg.init_std), requires_grad=True)
            for name, shape in param_shapes(cfg).items()}


class LazyParams(Mapping):
    """Read-only parameters materialised on access and never cached.

    Lets forward-only runs at paper scale fit in memory: only the tensors of
    the layer being executed exist at any moment. Values equal
    ``init_params(cfg, seed)`` exactly.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self._shapes = param_shapes(cfg)

    def __getitem__(self, name: str) -> Tensor:
        return Tensor(init_value(name, self._shapes[name], self.seed, self.cfg.init_std))

    def __iter__(self) -> Iterator[str]:
        return iter(self._shapes)

    def __len__(self) -> int:
        return len(self._shapes)


def check_params(params: Mapping, cfg: ModelConfig) -> None:
    """Raise ContractError if ``params`` is not shaped for ``cfg``."""
    from .tensor import ContractError

    expected = param_shapes(cfg)
    if isinstance(params, LazyParams):
        if params.cfg != cfg:
            raise ContractError("lazy parameters were built for a different config")
        return
    missing = [k for k in expected if k not in params]
    if missing:
        raise ContractError(f"parameter {missing[0]!r} missing for this config")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ContractError(f"parameter {name!r} has shape {params[name].shape}, config needs {shape}")
    extra = [k for k in params if k not in expected]
    if extra:
        raise ContractError(f"unexpected parameter {extra[0]!r} for this config")

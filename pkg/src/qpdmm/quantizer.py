"""Fixed-rate uniform mid-rise quantizer with a shrinking cell width.

Differences between successive auxiliary values are quantized with cell
width ``delta0 * gamma**(t-1)`` and accumulated on both ends of a link, so
sender and receiver hold the same reconstruction.

Tie rule: cells are ``[k*delta, (k+1)*delta)``, so a value sitting on a
boundary goes to the cell above and ``v = 0`` reproduces as ``+delta/2``.
Values past the outermost boundaries are clamped to the extreme cells.
Code indices are unsigned integers in ``[0, 2**l)`` stored as ``uint64``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_BITS = 64


class QuantizerError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerConfig:
    l: int = 1
    delta0: float = 1.0
    gamma: float = 0.9
    enabled: bool = True
    passthrough_bits: int = 64

    def __post_init__(self):
        if not 1 <= self.l <= MAX_BITS:
            raise QuantizerError(f"l must be in [1, {MAX_BITS}], got {self.l}")
        if not self.delta0 > 0:
            raise QuantizerError(f"delta0 must be > 0, got {self.delta0}")
        if not 0 < self.gamma < 1:
            raise QuantizerError(f"gamma must be in (0, 1), got {self.gamma}")

    @property
    def bits_per_scalar(self):
        return self.l if self.enabled else self.passthrough_bits


def cell_width(cfg, t):
    """``delta0 * gamma**(t-1)`` for ``t >= 1``."""
    if t < 1:
        raise QuantizerError(f"cell width is defined for t >= 1, got {t}")
    return cfg.delta0 * cfg.gamma ** (t - 1)


def _offset(l):
    return np.uint64(1 << (l - 1))


def quantize(v, delta, l):
    """Map ``v`` (scalar or array) to code indices in ``[0, 2**l)``."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise QuantizerError("cannot quantize non-finite values")
    if not delta > 0:
        raise QuantizerError(f"cell width must be > 0, got {delta}")
    half = 2.0 ** (l - 1)
    k = np.clip(np.floor(v / delta), -half, np.nextafter(half, 0.0))
    # two's-complement wraparound turns k + 2**(l-1) into the unsigned index for any l <= 64
    with np.errstate(over="ignore"):
        idx = k.astype(np.int64).view(np.uint64) + _offset(l)
    return idx[()] if idx.ndim == 0 else idx


def reproduce(code, delta, l):
    """Reproduction value ``(index - 2**(l-1) + 1/2) * delta``."""
    code = np.asarray(code)
    if code.dtype.kind == "i":
        if np.any(code < 0):
            raise QuantizerError("code index must be non-negative")
        code = code.astype(np.uint64)
    elif code.dtype.kind != "u":
        raise QuantizerError(f"code index must be an integer, got {code.dtype}")
    if l < MAX_BITS and np.any(code >= np.uint64(1 << l)):
        raise QuantizerError(f"code index out of range for l={l}")
    with np.errstate(over="ignore"):
        k = (code.astype(np.uint64) - _offset(l)).view(np.int64)
    return (k.astype(float) + 0.5) * delta


@dataclass
class Encoded:
    v: np.ndarray
    code: np.ndarray | None
    v_hat: np.ndarray
    nq: np.ndarray


def encode_difference(current_z, basis, t, cfg):
    """Quantize ``current_z - basis`` with the width for iteration ``t``.

    ``basis`` is ``z^(0)`` at ``t = 1`` and the previous reconstruction after.
    In passthrough mode the difference is sent as is (``code`` is None).
    """
    v = np.asarray(current_z, dtype=float) - basis
    if not cfg.enabled:
        return Encoded(v=v, code=None, v_hat=v, nq=np.zeros_like(v))
    delta = cell_width(cfg, t)
    code = quantize(v, delta, cfg.l)
    v_hat = reproduce(code, delta, cfg.l)
    return Encoded(v=v, code=code, v_hat=v_hat, nq=v_hat - v)


def decode(basis, code, t, cfg):
    """Receiver reconstruction: ``basis + reproduce(code)``.

    In passthrough mode ``code`` is the raw difference.
    """
    if not cfg.enabled:
        return basis + np.asarray(code, dtype=float)
    return basis + reproduce(code, cell_width(cfg, t), cfg.l)


class EdgeCodec:
    """One end of a directed link: tracks the shared reconstruction ``zhat``."""

    def __init__(self, cfg, z0):
        self.cfg = cfg
        self.zhat = np.array(z0, dtype=float)
        self.t = 0

    def encode(self, current_z):
        self.t += 1
        enc = encode_difference(current_z, self.zhat, self.t, self.cfg)
        self.zhat = self.zhat + enc.v_hat
        return enc

    def decode(self, code):
        self.t += 1
        self.zhat = decode(self.zhat, code, self.t, self.cfg)
        return self.zhat

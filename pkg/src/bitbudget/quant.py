"""Symmetric per-group round-to-nearest weight quantization and candidate pools."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

DEFAULT_BITS = (2, 3, 4)
DEFAULT_GROUP_SIZE = 16


def bitset(values=DEFAULT_BITS):
    """Validate and normalise a candidate bit-width set to a sorted tuple."""
    out = tuple(sorted(int(v) for v in values))
    if len(out) < 2:
        raise ParameterError(f"need at least two candidate bit-widths, got {out}")
    if len(set(out)) != len(out):
        raise ParameterError(f"candidate bit-widths must be distinct, got {out}")
    if out[0] < 2:
        raise ParameterError(f"candidate bit-widths must be >= 2, got {out}")
    return out


def quantize_rtn(w, bits, group_size=DEFAULT_GROUP_SIZE):
    """Fake-quantize ``w`` with symmetric RTN over groups along the last axis.

    Each run of ``group_size`` consecutive entries of a row shares the scale
    ``max|w| / (2**(bits-1) - 1)``; the trailing group of a row may be short.
    Rounding is half-to-even and levels are clamped to +-(2**(bits-1) - 1).
    """
    if int(bits) != bits or bits < 2:
        raise ParameterError(f"bits must be an integer >= 2, got {bits}")
    if int(group_size) != group_size or group_size < 1:
        raise ParameterError(f"group_size must be a positive integer, got {group_size}")
    w = np.asarray(w, dtype=np.float64)
    qmax = 2 ** (int(bits) - 1) - 1
    row = w.shape[-1]
    pad = (-row) % group_size
    flat = w.reshape(-1, row)
    if pad:
        flat = np.concatenate([flat, np.zeros((flat.shape[0], pad))], axis=1)
    groups = flat.reshape(flat.shape[0], -1, group_size)
    scale = np.abs(groups).max(axis=-1, keepdims=True) / qmax
    safe = np.where(scale > 0, scale, 1.0)
    levels = np.clip(np.round(groups / safe), -qmax, qmax)
    out = np.where(scale > 0, levels * scale, 0.0)
    out = out.reshape(flat.shape[0], -1)[:, :row]
    return out.reshape(w.shape)


@dataclass
class CandidatePool:
    """Frozen quantized candidates ``W_b`` for every module plus ``W_fp``.

    ``candidates[m]`` stacks the candidates in ``bits`` order along axis 0.
    """

    bits: tuple
    group_size: int
    spec_hash: str
    full_precision: dict
    candidates: dict

    def module_ids(self):
        return sorted(self.candidates)

    def num_entries(self):
        return sum(c.shape[0] for c in self.candidates.values())

    def candidate(self, module, b):
        return self.candidates[module][self.bits.index(b)]

    def squared_errors(self):
        """``{module: array of ||W_b - W_fp||^2 over bits}``."""
        return {
            m: ((self.candidates[m] - self.full_precision[m][None]) ** 2).reshape(len(self.bits), -1).sum(axis=1)
            for m in self.module_ids()
        }

    def mse_table(self):
        return {m: err / self.full_precision[m].size for m, err in self.squared_errors().items()}

    def weight_map(self, assignment):
        """Discrete weights for ``{module: bit}``; missing modules stay full precision."""
        out = dict(self.full_precision)
        for m, b in assignment.items():
            out[m] = self.candidate(m, b)
        return out


def build_pool(model, bits=DEFAULT_BITS, group_size=DEFAULT_GROUP_SIZE):
    bits = bitset(bits)
    candidates = {}
    for m in model.spec.module_ids():
        w = model.weights[m]
        stacked = np.stack([quantize_rtn(w, b, group_size) for b in bits])
        stacked.flags.writeable = False
        candidates[m] = stacked
    return CandidatePool(
        bits=bits,
        group_size=int(group_size),
        spec_hash=model.spec.spec_hash(),
        full_precision=dict(model.weights),
        candidates=candidates,
    )

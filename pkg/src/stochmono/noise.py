"""Dyadic Brownian paths shared across time meshes.

Every trajectory owns a Philox stream keyed by ``(master_seed, index)``, so
paths are independent of execution order.  Levels are refined by the Brownian
bridge midpoint law; coarse levels are then rebuilt as exact pairwise sums of
the finest one, which makes mesh aggregation bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_LEVEL = 30
_PATH_STREAM = 0
_AUX_STREAM = 1


class LevelOverflow(ValueError):
    pass


class NonDyadic(ValueError):
    pass


def generator(master_seed: int, index: int, stream: int = _PATH_STREAM) -> np.random.Generator:
    """Counter-based stream for trajectory ``index``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


def dyadic_level(m: int) -> int:
    m = int(m)
    if m < 1 or m & (m - 1):
        raise NonDyadic(f"m={m} is not a power of two")
    return m.bit_length() - 1


def aggregate(dw: np.ndarray, m: int) -> np.ndarray:
    """Sum consecutive blocks along the last axis down to ``m`` increments."""
    fine = dw.shape[-1]
    if fine % m:
        raise NonDyadic(f"cannot aggregate {fine} increments to {m}")
    out = dw
    while out.shape[-1] > m:
        if out.shape[-1] % 2:
            raise NonDyadic(f"cannot aggregate {fine} increments to {m}")
        out = out[..., 0::2] + out[..., 1::2]
    return out


def bridge_refine(dw: np.ndarray, h: float, xi: np.ndarray) -> np.ndarray:
    """Split each increment of length ``h`` at its midpoint.

    ``left = dw/2 + sqrt(h/4) xi`` is the conditional midpoint law; the right
    half is the remainder.  ``dw`` has time on the last axis.
    """
    left = 0.5 * dw + np.sqrt(0.25 * h) * xi
    out = np.empty(dw.shape[:-1] + (2 * dw.shape[-1],))
    out[..., 0::2] = left
    out[..., 1::2] = dw - left
    return out


@dataclass(frozen=True)
class WienerTree:
    r: int
    T: float
    master_seed: int
    trajectory_index: int
    max_level: int
    levels: dict = field(repr=False)

    @property
    def finest(self) -> np.ndarray:
        return self.levels[self.max_level]

    def w_at(self, m: int) -> np.ndarray:
        """Path values ``W(t_i)``, shape ``(r, m + 1)``."""
        dw = increments(self, m)
        return np.concatenate([np.zeros((self.r, 1)), np.cumsum(dw, axis=1)], axis=1)


def _draw_finest(r: int, T: float, level: int, rng: np.random.Generator) -> np.ndarray:
    dw = np.sqrt(T) * rng.standard_normal((r, 1))
    for lev in range(1, level + 1):
        h = T / 2 ** (lev - 1)
        dw = bridge_refine(dw, h, rng.standard_normal((r, 2 ** (lev - 1))))
    return dw


def sample_path(r: int, T: float, max_level: int, master_seed: int, trajectory_index: int) -> WienerTree:
    """Brownian path on all dyadic meshes ``2^L``, ``L <= max_level``."""
    if not 0 <= max_level <= MAX_LEVEL:
        raise LevelOverflow(f"max_level must lie in 0..{MAX_LEVEL}")
    if r < 1 or T <= 0:
        raise ValueError("need r >= 1 and T > 0")
    fine = _draw_finest(r, T, max_level, generator(master_seed, trajectory_index))
    levels = {max_level: fine}
    for lev in range(max_level - 1, -1, -1):
        levels[lev] = levels[lev + 1][:, 0::2] + levels[lev + 1][:, 1::2]
    for arr in levels.values():
        arr.setflags(write=False)
    return WienerTree(r, T, master_seed, trajectory_index, max_level, levels)


def increments(tree: WienerTree, m: int) -> np.ndarray:
    """Level increments for mesh ``m``, shape ``(r, m)``."""
    lev = dyadic_level(m)
    if lev > tree.max_level:
        raise LevelOverflow(f"m={m} finer than the tree (max level {tree.max_level})")
    return tree.levels[lev]


def direct_increments(r: int, T: float, m: int, master_seed: int, trajectory_index: int) -> np.ndarray:
    """Uncoupled i.i.d. increments for arbitrary ``m``, shape ``(r, m)``."""
    rng = generator(master_seed, trajectory_index)
    return np.sqrt(T / m) * rng.standard_normal((r, m))


def sample_batch(r: int, T: float, level: int, master_seed: int, indices) -> np.ndarray:
    """Finest-level increments for several trajectories, shape ``(P, r, 2^level)``.

    Row ``k`` equals ``sample_path(..., indices[k]).finest`` bitwise.
    """
    if not 0 <= level <= MAX_LEVEL:
        raise LevelOverflow(f"level must lie in 0..{MAX_LEVEL}")
    out = np.empty((len(indices), r, 2**level))
    for k, idx in enumerate(indices):
        out[k] = _draw_finest(r, T, level, generator(master_seed, idx))
    return out


def aux_normals(master_seed: int, trajectory_index: int, shape) -> np.ndarray:
    """Standard normals from an auxiliary stream independent of the path."""
    return generator(master_seed, trajectory_index, _AUX_STREAM).standard_normal(shape)

"""Online obstacle discovery: axial bins of each cylinder, sensed by proximity."""

from __future__ import annotations

import logging
import math

import numpy as np

from softgm.errors import ConfigError

log = logging.getLogger(__name__)

__all__ = ["DiscoveryLedger", "update_discovery"]


class DiscoveryLedger:
    """Per-episode record of which obstacle bins are known and which graph slot holds them.

    Bins are built once from the cylinder list.  ``slot_of[b]`` is the obstacle
    slot assigned to bin ``b`` (``-1`` when undiscovered or when the slot budget
    was exhausted); ``bin_in_slot[j]`` is the inverse map.
    """

    def __init__(self, cylinders, segment_length: float = 0.1, sensing_radius: float = 0.15,
                 n_slots: int = 32):
        if not segment_length > 0:
            raise ConfigError("segment_length must be positive")
        if not sensing_radius > 0:
            raise ConfigError("sensing_radius must be positive")
        if n_slots < 0:
            raise ConfigError("n_slots must be non-negative")
        self.segment_length = float(segment_length)
        self.sensing_radius = float(sensing_radius)
        self.n_slots = int(n_slots)

        centers, axes, radii, lengths, bin_lengths, fractions, owner = [], [], [], [], [], [], []
        for c, cyl in enumerate(cylinders):
            n_bins = max(1, math.ceil(cyl.length / self.segment_length - 1e-12))
            bin_len = cyl.length / n_bins
            for b in range(n_bins):
                frac = (b + 0.5) / n_bins
                centers.append(cyl.start_point + frac * cyl.length * cyl.axis_direction)
                axes.append(cyl.axis_direction)
                radii.append(cyl.radius)
                lengths.append(cyl.length)
                bin_lengths.append(bin_len)
                fractions.append(frac)
                owner.append(c)
        k = len(centers)
        self.centers = np.array(centers, dtype=float).reshape(k, 3)
        self.axes = np.array(axes, dtype=float).reshape(k, 3)
        self.radii = np.array(radii, dtype=float)
        self.cylinder_lengths = np.array(lengths, dtype=float)
        self.bin_lengths = np.array(bin_lengths, dtype=float)
        self.axial_fractions = np.array(fractions, dtype=float)
        self.cylinder_index = np.array(owner, dtype=int)
        self.reset()

    def reset(self):
        k = self.n_bins
        self.discovered = np.zeros(k, dtype=bool)
        self.slot_of = np.full(k, -1, dtype=int)
        self.bin_in_slot = np.full(self.n_slots, -1, dtype=int)
        self.n_unslotted = 0

    @property
    def n_bins(self) -> int:
        return len(self.radii)

    @property
    def n_occupied(self) -> int:
        return int(np.count_nonzero(self.bin_in_slot >= 0))

    def surface_distances(self, positions) -> np.ndarray:
        """``||p_i - c_k|| - r_k`` for every agent position and bin (N x K)."""
        p = np.asarray(positions, dtype=float).reshape(-1, 3)
        if self.n_bins == 0:
            return np.zeros((len(p), 0))
        return np.linalg.norm(p[:, None, :] - self.centers[None, :, :], axis=-1) - self.radii[None, :]

    def bin_record(self, b: int) -> dict:
        return {
            "center": self.centers[b],
            "axis": self.axes[b],
            "radius": float(self.radii[b]),
            "length": float(self.cylinder_lengths[b]),
            "axial_fraction": float(self.axial_fractions[b]),
            "bin_length": float(self.bin_lengths[b]),
        }

    def copy(self) -> "DiscoveryLedger":
        out = object.__new__(DiscoveryLedger)
        out.__dict__.update(self.__dict__)
        out.discovered = self.discovered.copy()
        out.slot_of = self.slot_of.copy()
        out.bin_in_slot = self.bin_in_slot.copy()
        return out


def update_discovery(ledger: DiscoveryLedger, agent_positions) -> int:
    """Mark bins within sensing range of any agent; returns the number newly discovered.

    New bins take the lowest free slots in bin order.  Bins found after the slot
    budget is exhausted stay discovered but unslotted.
    """
    if ledger.n_bins == 0:
        return 0
    sensed = (ledger.surface_distances(agent_positions) < ledger.sensing_radius).any(axis=0)
    new = np.flatnonzero(sensed & ~ledger.discovered)
    if len(new) == 0:
        return 0
    ledger.discovered[new] = True
    free = np.flatnonzero(ledger.bin_in_slot < 0)
    n_fit = min(len(free), len(new))
    ledger.slot_of[new[:n_fit]] = free[:n_fit]
    ledger.bin_in_slot[free[:n_fit]] = new[:n_fit]
    if n_fit < len(new):
        ledger.n_unslotted += len(new) - n_fit
        log.debug("obstacle slot budget exhausted: %d bins discovered without a slot", len(new) - n_fit)
    return int(len(new))

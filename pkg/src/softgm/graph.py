"""Fixed-budget typed graph built from the arm state and the discovery ledger."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from softgm.discovery import DiscoveryLedger

__all__ = [
    "FEATURE_DIM",
    "NodeType",
    "GraphObservation",
    "build_agent_features",
    "build_obstacle_features",
    "build_graph",
    "stage_masks",
]

FEATURE_DIM = 22


class NodeType(enum.IntEnum):
    AGENT = 0
    OBST = 1
    PAD = 2


@dataclass(frozen=True)
class GraphObservation:
    node_features: np.ndarray   # (V, 22)
    node_types: np.ndarray      # (V,) int, NodeType values
    adjacency: np.ndarray       # (V, V) bool, [u, v] = message v -> u
    stage1_mask: np.ndarray     # entity -> agent, plus self loops
    stage2_mask: np.ndarray     # agent <-> agent, plus self loops
    n_agents: int

    @property
    def n_nodes(self) -> int:
        return len(self.node_types)

    @property
    def agent_features(self) -> np.ndarray:
        return self.node_features[: self.n_agents]

    def without_pad(self) -> "GraphObservation":
        """The same graph with every PAD node removed."""
        keep = np.flatnonzero(self.node_types != NodeType.PAD)
        if len(keep) == self.n_nodes:
            return self
        ix = np.ix_(keep, keep)
        return GraphObservation(
            self.node_features[keep], self.node_types[keep], self.adjacency[ix],
            self.stage1_mask[ix], self.stage2_mask[ix], self.n_agents,
        )

    def to_json(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "node_types": [NodeType(t).name for t in self.node_types],
            "node_features": self.node_features.tolist(),
            "adjacency": self.adjacency.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "GraphObservation":
        types = np.array([NodeType[t] for t in data["node_types"]], dtype=int)
        adjacency = np.array(data["adjacency"], dtype=bool)
        s1, s2 = stage_masks(adjacency, types)
        return cls(np.array(data["node_features"], dtype=float), types, adjacency, s1, s2,
                   int(data["n_agents"]))


def build_agent_features(position, velocity, prev_action, target, tip) -> np.ndarray:
    p = np.asarray(position, dtype=float)
    a = np.zeros(3)
    prev = np.asarray(prev_action, dtype=float).ravel()
    a[: len(prev)] = prev
    x = np.zeros(FEATURE_DIM)
    x[0:3] = p
    x[3:6] = velocity
    x[6:9] = a
    x[9:12] = np.asarray(target, dtype=float) - p
    x[12:15] = np.asarray(tip, dtype=float) - p
    return x


def build_obstacle_features(bin_record: dict, target, tip) -> np.ndarray:
    c = np.asarray(bin_record["center"], dtype=float)
    x = np.zeros(FEATURE_DIM)
    x[0:3] = c
    x[3:6] = bin_record["axis"]
    x[6:9] = (bin_record["radius"], bin_record["length"], bin_record["axial_fraction"])
    x[9:12] = np.asarray(target, dtype=float) - c
    x[12:15] = np.asarray(tip, dtype=float) - c
    return x


def stage_masks(adjacency: np.ndarray, node_types: np.ndarray):
    is_agent = node_types == NodeType.AGENT
    is_entity = ~is_agent
    eye = np.eye(len(node_types), dtype=bool)
    stage1 = (adjacency & np.outer(is_agent, is_entity)) | eye
    stage2 = (adjacency & np.outer(is_agent, is_agent)) | eye
    return stage1, stage2


def build_graph(agent_positions, agent_velocities, prev_actions, ledger: DiscoveryLedger,
                target, tip, sensing_radius: float | None = None) -> GraphObservation:
    p = np.asarray(agent_positions, dtype=float)
    vel = np.asarray(agent_velocities, dtype=float)
    prev = np.asarray(prev_actions, dtype=float)
    n = len(p)
    rho = ledger.sensing_radius if sensing_radius is None else sensing_radius
    n_nodes = n + ledger.n_slots
    features = np.zeros((n_nodes, FEATURE_DIM))
    types = np.full(n_nodes, NodeType.PAD, dtype=int)
    adjacency = np.zeros((n_nodes, n_nodes), dtype=bool)

    for i in range(n):
        features[i] = build_agent_features(p[i], vel[i], prev[i], target, tip)
    types[:n] = NodeType.AGENT
    idx = np.arange(n - 1)
    adjacency[idx, idx + 1] = True
    adjacency[idx + 1, idx] = True

    slots = np.flatnonzero(ledger.bin_in_slot >= 0)
    if len(slots):
        bins = ledger.bin_in_slot[slots]
        near = (np.linalg.norm(p[:, None, :] - ledger.centers[bins][None], axis=-1)
                - ledger.radii[bins][None]) < rho
        for j, b in zip(slots, bins):
            node = n + j
            features[node] = build_obstacle_features(ledger.bin_record(b), target, tip)
            types[node] = NodeType.OBST
        adjacency[:n, n + slots] = near
    stage1, stage2 = stage_masks(adjacency, types)
    return GraphObservation(features, types, adjacency, stage1, stage2, n)

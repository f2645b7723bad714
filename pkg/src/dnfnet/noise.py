"""Synthetic noise for clean meshes, scaled by the mean edge length."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .mesh import TriMesh, average_edge_length

KINDS = ("gaussian-normal", "gaussian-iso", "impulsive", "uniform")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian-normal"
    level: float = 0.2
    impulse_fraction: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.level < 0:
            raise ValueError("noise level must be non-negative")
        if not 0 < self.impulse_fraction <= 1:
            raise ValueError("impulse_fraction must lie in (0, 1]")

    def tag(self) -> dict:
        return asdict(self)


def impulse_count(n_vertices: int, fraction: float) -> int:
    """Number of displaced vertices: fraction * V rounded half up."""
    return int(np.floor(fraction * n_vertices + 0.5))


def add_noise(mesh: TriMesh, spec: NoiseSpec) -> TriMesh:
    """Displace vertices per ``spec``; faces are left untouched.

    gaussian-normal moves each vertex along its area-weighted normal by
    N(0, sigma^2); gaussian-iso adds N(0, sigma^2 / 3) per axis; impulsive
    applies gaussian-normal to a random subset; uniform adds U(-sigma, sigma)
    per axis. ``sigma = level * mean edge length``.
    """
    if spec.level == 0:
        return mesh.with_vertices(mesh.vertices.copy())
    rng = np.random.default_rng(spec.rng_seed)
    sigma = spec.level * average_edge_length(mesh)
    v = mesh.vertices.copy()
    nv = mesh.n_vertices
    if spec.kind == "gaussian-normal":
        v += rng.normal(0.0, sigma, size=nv)[:, None] * mesh.vertex_normals
    elif spec.kind == "gaussian-iso":
        v += rng.normal(0.0, sigma / np.sqrt(3.0), size=(nv, 3))
    elif spec.kind == "impulsive":
        chosen = rng.choice(nv, size=impulse_count(nv, spec.impulse_fraction), replace=False)
        d = rng.normal(0.0, sigma, size=len(chosen))
        v[chosen] += d[:, None] * mesh.vertex_normals[chosen]
    else:
        v += rng.uniform(-sigma, sigma, size=(nv, 3))
    return mesh.with_vertices(v)


def make_paired_set(meshes, levels, kinds=("gaussian-normal",), rng_seed=0, names=None):
    """One noisy copy per (mesh, level, kind); returns ``(noisy, clean, tag)`` triples.

    Each noisy mesh gets its own seed derived from ``rng_seed`` and its
    position, recorded in the tag so it can be regenerated exactly.
    """
    names = list(names) if names is not None else [f"mesh{i}" for i in range(len(meshes))]
    seq = np.random.SeedSequence(rng_seed)
    out = []
    combos = [(i, lvl, kind) for i in range(len(meshes)) for lvl in levels for kind in kinds]
    for (i, lvl, kind), child in zip(combos, seq.spawn(len(combos))):
        seed = int(child.generate_state(1)[0])
        spec = NoiseSpec(kind=kind, level=float(lvl), rng_seed=seed)
        tag = {"mesh": names[i], **spec.tag()}
        out.append((add_noise(meshes[i], spec), meshes[i], tag))
    return out


def write_sidecar(path, tag: dict) -> None:
    with open(path, "w") as fh:
        json.dump(tag, fh, indent=2, sort_keys=True)

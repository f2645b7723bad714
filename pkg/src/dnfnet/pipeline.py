"""Training, full-mesh inference and vertex reconstruction."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .geodesics import make_backend
from .mesh import TriMesh, one_ring_normal_variance
from .network import DNFNet, ModelConfig
from .patching import (PatchDataset, augment_patch, build_neighbor_index, extract_patches,
                       grow_patch, read_dataset)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class Preset:
    P: int
    N: int
    K: int
    model: ModelConfig
    batch_size: int = 10
    epochs: int = 400


PRESETS = {
    "paper-synthetic": Preset(P=100, N=800, K=50, model=ModelConfig(C=128, k1=10, k2=30, k3=50)),
    "paper-real": Preset(P=200, N=800, K=150, model=ModelConfig(C=128, k1=50, k2=100, k3=150)),
    "desk": Preset(P=16, N=256, K=24, model=ModelConfig(C=32, k1=8, k2=16, k3=24),
                   batch_size=8, epochs=200),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class TrainConfig:
    """Training run settings. Unset fields fall back to the preset."""

    dataset: str | None = None
    preset: str = "desk"
    model: ModelConfig | None = None
    batch_size: int | None = None
    lr: float = 1e-3
    epochs: int | None = None
    rotate: bool = True
    jitter_sigma: float = 0.01
    rng_seed: int = 0
    checkpoint_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        p = get_preset(self.preset)
        if self.model is None:
            self.model = p.model
        elif isinstance(self.model, dict):
            self.model = ModelConfig.from_dict({**asdict(p.model), **self.model})
        if self.batch_size is None:
            self.batch_size = p.batch_size
        if self.epochs is None:
            self.epochs = p.epochs
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Read a JSON config; keys are the dataclass fields."""
        with open(path) as fh:
            d = json.load(fh)
        d.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: str | None
    history: list = field(default_factory=list)
    steps: int = 0
    model: DNFNet | None = None


def _stack(samples):
    n = np.stack([s.normals for s in samples])
    idx = np.stack([s.neighbor_index for s in samples])
    gt = np.stack([s.gt_normals for s in samples])
    return n, idx, gt


def train(config: TrainConfig, dataset: PatchDataset | None = None, model: DNFNet | None = None,
          progress=None) -> TrainResult:
    """Shuffled mini-batch Adam training with rotation/jitter augmentation.

    Writes ``loss.csv`` and checkpoints into ``config.out_dir`` when set.
    """
    if dataset is None:
        if config.dataset is None:
            raise ValueError("no dataset given")
        dataset = read_dataset(config.dataset)
    if not dataset.samples:
        raise ValueError("dataset is empty")
    if any(s.gt_normals is None for s in dataset.samples):
        raise ValueError("training patches need ground-truth normals")
    cfg = config.model
    cfg.check_k(dataset.K)
    rng = np.random.default_rng(config.rng_seed)
    net = model or DNFNet(cfg, seed=int(rng.integers(2 ** 31)))
    opt = ag.Adam(net.parameters(), lr=config.lr)
    meta = {"N": dataset.N, "K": dataset.K}
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
    history, steps = [], 0
    n = len(dataset.samples)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = [dataset.samples[i] for i in order[start:start + config.batch_size]]
            seeds = rng.integers(2 ** 31, size=len(batch))
            batch = [augment_patch(s, int(sd), config.jitter_sigma, config.rotate)
                     if (config.rotate or config.jitter_sigma > 0) else s
                     for s, sd in zip(batch, seeds)]
            normals, idx, gt = _stack(batch)
            out = net.forward(normals, idx)
            loss = net.loss(out, gt)
            val = float(loss.data)
            if not math.isfinite(val):
                raise NumericalError(f"non-finite loss {val} at epoch {epoch}, step {steps + 1}")
            opt.zero_grad()
            ag.backward(loss)
            opt.step()
            steps += 1
            total += val * len(batch)
        history.append(total / n)
        if progress:
            progress(epoch, history[-1])
        if config.out_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            net.save(os.path.join(config.out_dir, f"epoch{epoch:04d}.ckpt"), meta)
    ckpt = None
    if config.out_dir:
        ckpt = os.path.join(config.out_dir, "final.ckpt")
        net.save(ckpt, meta)
        with open(os.path.join(config.out_dir, "loss.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for e, v in enumerate(history, 1):
                w.writerow([e, repr(v)])
    net.meta = meta
    return TrainResult(ckpt, history, steps, net)


def make_dataset(pairs, preset: str, rng_seed=0, backend="heat", provenance="") -> PatchDataset:
    """Extract ``P`` patch pairs per (noisy, clean) mesh pair.

    Meshes with fewer than ``N`` faces are skipped.
    """
    p = get_preset(preset)
    seq = np.random.SeedSequence(rng_seed)
    samples = []
    for (noisy, clean), child in zip(pairs, seq.spawn(len(pairs))):
        if noisy.n_faces < p.N:
            log.warning("skipping mesh with %d faces (< N=%d)", noisy.n_faces, p.N)
            continue
        got = extract_patches(noisy, clean, min(p.P, noisy.n_faces), p.N, p.K,
                              int(child.generate_state(1)[0]), backend)
        samples += [s for s in got if s.n == p.N]
    return PatchDataset(N=p.N, K=p.K, samples=samples, provenance=provenance)


# -- inference -------------------------------------------------------------------

@dataclass
class CoveragePlan:
    seeds: list
    patches: list

    def __len__(self):
        return len(self.patches)


def plan_coverage(mesh: TriMesh, N: int, variance=None, backend="heat", geo=None) -> CoveragePlan:
    """Greedy cover: next seed is the uncovered face of largest normal variance."""
    var = one_ring_normal_variance(mesh) if variance is None else np.asarray(variance)
    geo = geo or make_backend(mesh, backend)
    covered = np.zeros(mesh.n_faces, dtype=bool)
    seeds, patches = [], []
    while not covered.all():
        cand = np.where(covered, -np.inf, var)
        seed = int(np.argmax(cand))
        ids = grow_patch(mesh, seed, N, backend, geo)
        covered[ids] = True
        seeds.append(seed)
        patches.append(ids)
    return CoveragePlan(seeds, patches)


def integrate_normals(n_faces: int, patches, predictions, fallback) -> np.ndarray:
    """Per face, the renormalised mean of all patch predictions covering it.

    Faces whose predictions cancel out (or that no patch covers) keep
    ``fallback``.
    """
    acc = np.zeros((n_faces, 3))
    for ids, pred in zip(patches, predictions):
        np.add.at(acc, ids, np.asarray(pred, dtype=np.float64))
    norm = np.linalg.norm(acc, axis=1)
    out = np.array(fallback, dtype=np.float64, copy=True)
    ok = norm > 1e-12
    out[ok] = acc[ok] / norm[ok, None]
    return out


def vertex_update(mesh: TriMesh, target_normals, iterations: int = 20, history=None) -> TriMesh:
    """Move vertices so incident faces align with ``target_normals``.

    Each pass: ``x_v += mean_{f ni v} n_f (n_f . (c_f - x_v))`` with face
    centroids ``c_f`` recomputed from the current positions. ``history``, if
    a list, receives the vertex array after every pass.
    """
    n = np.asarray(target_normals, dtype=np.float64)
    f = mesh.faces
    x = mesh.vertices.copy()
    counts = np.bincount(f.ravel(), minlength=mesh.n_vertices).astype(np.float64)
    counts[counts == 0] = 1.0
    for _ in range(iterations):
        c = x[f].mean(axis=1)
        acc = np.zeros_like(x)
        for i in range(3):
            d = np.einsum("ij,ij->i", n, c - x[f[:, i]])
            np.add.at(acc, f[:, i], n * d[:, None])
        x = x + acc / counts[:, None]
        if history is not None:
            history.append(x.copy())
    return mesh.with_vertices(x)


@dataclass
class DenoiseOptions:
    iterations: int = 20
    N: int | None = None
    K: int | None = None
    backend: str = "heat"
    batch_size: int = 16


def predict_mesh_normals(mesh: TriMesh, net: DNFNet, options: DenoiseOptions | None = None):
    """Network-filtered facet normals for every face of ``mesh``.

    Returns ``(normals, plan)``.
    """
    opt = options or DenoiseOptions()
    meta = getattr(net, "meta", {}) or {}
    N = min(opt.N or meta.get("N") or 256, mesh.n_faces)
    K = opt.K or meta.get("K") or net.config.k3
    net.config.check_k(K)
    geo = make_backend(mesh, opt.backend)
    plan = plan_coverage(mesh, N, backend=opt.backend, geo=geo)
    noisy = mesh.face_normals
    inputs = []
    for ids in plan.patches:
        if len(ids) < 2:
            inputs.append(None)
            continue
        inputs.append((noisy[ids].astype(np.float32), build_neighbor_index(mesh, ids, K)))
    preds = [noisy[ids] for ids in plan.patches]
    groups = {}
    for i, inp in enumerate(inputs):
        if inp is not None:
            groups.setdefault(len(plan.patches[i]), []).append(i)
    for size in sorted(groups):
        members = groups[size]
        for s in range(0, len(members), opt.batch_size):
            chunk = members[s:s + opt.batch_size]
            n = np.stack([inputs[i][0] for i in chunk])
            idx = np.stack([inputs[i][1] for i in chunk])
            out = net.predict(n, idx)
            for j, i in enumerate(chunk):
                preds[i] = out[j]
    return integrate_normals(mesh.n_faces, plan.patches, preds, noisy), plan


def denoise_mesh(mesh: TriMesh, net: DNFNet | str, options: DenoiseOptions | None = None):
    """Filter facet normals patch-wise, then rebuild vertices.

    Returns ``(denoised mesh, filtered normals)``.
    """
    if isinstance(net, (str, os.PathLike)):
        net = DNFNet.load(net)
    opt = options or DenoiseOptions()
    normals, _ = predict_mesh_normals(mesh, net, opt)
    return vertex_update(mesh, normals, opt.iterations), normals

"""Normal-angle error metrics, per-model normalised scores, error maps and
robustness sweeps.

CSV schemas
-----------
error-map CSV : ``face,angle_deg`` (one row per face; ``nan`` for faces
    degenerate in either mesh)
eval CSV      : ``mesh,method,noise_level,theta_deg,n_faces,n_excluded``
sweep CSV     : ``suite,variant,mesh,kind,level,n_faces,theta_noisy_deg,theta_denoised_deg``
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh, load_mesh, save_mesh
from .noise import NoiseSpec, add_noise

# viridis sampled at 9 evenly spaced stops, interpolated to 256 entries
_RAMP_STOPS = np.array([(68, 1, 84), (71, 45, 123), (59, 82, 139), (44, 114, 142),
                        (33, 145, 140), (40, 174, 128), (94, 201, 98), (173, 220, 48),
                        (253, 231, 37)], dtype=np.float64)
COLOR_RAMP = np.stack([np.interp(np.linspace(0, 1, 256), np.linspace(0, 1, 9), _RAMP_STOPS[:, c])
                       for c in range(3)], axis=1).round().astype(np.uint8)
SENTINEL_COLOR = np.array([255, 0, 255], dtype=np.uint8)


@dataclass
class ThetaRecord:
    theta: float
    angles: np.ndarray
    mesh_id: str = ""
    noise_level: float | None = None
    method: str = ""

    @property
    def n_excluded(self) -> int:
        return int(np.isnan(self.angles).sum())


def face_angles(gt: TriMesh, denoised: TriMesh) -> np.ndarray:
    """Per-face angle in degrees between facet normals; NaN where either face
    is degenerate."""
    if not np.array_equal(gt.faces, denoised.faces):
        raise ValueError("meshes have different connectivity")
    return normal_angles(gt.face_normals, denoised.face_normals,
                         gt.degenerate | denoised.degenerate)


def normal_angles(a, b, skip=None) -> np.ndarray:
    """Angle in degrees between unit vectors.

    Uses atan2(|a x b|, a . b), equal to arccos of the clamped dot product
    but exact at 0 and 180 and well conditioned for small angles.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1)))
    if skip is not None:
        ang = np.where(skip, np.nan, ang)
    return ang


def mean_angular_difference(gt: TriMesh, denoised: TriMesh, mesh_id="", noise_level=None,
                            method="") -> ThetaRecord:
    """Mean facet-normal angle (degrees) over non-degenerate faces."""
    ang = face_angles(gt, denoised)
    valid = ang[~np.isnan(ang)]
    theta = float(valid.mean()) if len(valid) else float("nan")
    return ThetaRecord(theta, ang, mesh_id, noise_level, method)


@dataclass
class ScoreTable:
    methods: list
    models: list
    theta_bar: np.ndarray
    scores: np.ndarray = field(init=False)

    def __post_init__(self):
        self.theta_bar = np.asarray(self.theta_bar, dtype=np.float64)
        self.scores = _scores(self.theta_bar)


def _scores(tb):
    lo = tb.min(axis=0, keepdims=True)
    hi = tb.max(axis=0, keepdims=True)
    span = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        s = 1.0 - (tb - lo) / span
    # a column where every method ties scores 1 everywhere
    return np.where(span > 0, s, 1.0)


def normalized_scores(theta_bar, methods=None, models=None) -> ScoreTable:
    """Per-model min-max rescaling of averaged theta: best method 1, worst 0.

    ``theta_bar`` is (methods, models).
    """
    tb = np.asarray(theta_bar, dtype=np.float64)
    if tb.ndim != 2 or tb.shape[0] < 2:
        raise ValueError("need a (methods >= 2, models) matrix of averaged theta")
    methods = list(methods) if methods is not None else [f"method{i}" for i in range(tb.shape[0])]
    models = list(models) if models is not None else [f"model{j}" for j in range(tb.shape[1])]
    return ScoreTable(methods, models, tb)


def average_theta(records) -> dict:
    """Average theta over noise levels per (method, mesh)."""
    acc = {}
    for r in records:
        acc.setdefault((r.method, r.mesh_id), []).append(r.theta)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def error_colors(angles, max_angle=60.0) -> np.ndarray:
    """Map angles linearly onto the 256-entry ramp over [0, max_angle], clamped."""
    a = np.asarray(angles, dtype=np.float64)
    bad = np.isnan(a)
    t = np.clip(np.nan_to_num(a) / max_angle, 0.0, 1.0)
    cols = COLOR_RAMP[np.round(t * 255).astype(int)]
    cols[bad] = SENTINEL_COLOR
    return cols


def export_error_map(gt: TriMesh, denoised: TriMesh, path, max_angle=60.0, csv_path=None):
    """Colour-coded PLY of ``denoised`` plus a per-face angle CSV.

    The CSV goes next to the PLY (same stem) unless ``csv_path`` is given.
    Returns the :class:`ThetaRecord` the colours were computed from.
    """
    rec = mean_angular_difference(gt, denoised)
    save_mesh(denoised, path, "ply", face_colors=error_colors(rec.angles, max_angle))
    csv_path = csv_path or os.path.splitext(str(path))[0] + ".csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["face", "angle_deg"])
        for i, a in enumerate(rec.angles):
            w.writerow([i, repr(float(a))])
    return rec


def write_theta_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mesh", "method", "noise_level", "theta_deg", "n_faces", "n_excluded"])
        for r in records:
            w.writerow([r.mesh_id, r.method, "" if r.noise_level is None else r.noise_level,
                        repr(r.theta), len(r.angles), r.n_excluded])


# -- robustness sweeps --------------------------------------------------------------

SWEEP_FIELDS = ["suite", "variant", "mesh", "kind", "level", "n_faces",
                "theta_noisy_deg", "theta_denoised_deg"]
SUITES = ("resolution", "noise-level", "noise-pattern")


def load_sweep_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _variants(suite, cfg):
    seed = int(cfg.get("seed", 0))
    impulse = float(cfg.get("impulse_fraction", 0.1))
    if suite == "resolution":
        level = float(cfg.get("level", 0.1))
        kind = cfg.get("kind", "gaussian-normal")
        for i, entry in enumerate(cfg["meshes"]):
            entry = {"clean": entry} if isinstance(entry, (str, TriMesh)) else entry
            clean = _as_mesh(entry["clean"])
            if entry.get("noisy") is not None:
                noisy = _as_mesh(entry["noisy"])
            else:
                noisy = add_noise(clean, NoiseSpec(kind, level, impulse, seed + i))
            yield f"res{clean.n_faces}", _name(entry["clean"], i), kind, level, clean, noisy
        return
    clean = _as_mesh(cfg["mesh"])
    name = _name(cfg["mesh"], 0)
    if suite == "noise-level":
        kind = cfg.get("kind", "gaussian-normal")
        for i, level in enumerate(cfg.get("levels", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])):
            noisy = add_noise(clean, NoiseSpec(kind, float(level), impulse, seed + i))
            yield f"level{level}", name, kind, float(level), clean, noisy
    elif suite == "noise-pattern":
        level = float(cfg.get("level", 0.2))
        for i, kind in enumerate(cfg.get("kinds", ["gaussian-normal", "impulsive", "uniform"])):
            noisy = add_noise(clean, NoiseSpec(kind, level, impulse, seed + i))
            yield kind, name, kind, level, clean, noisy
    else:
        raise ValueError(f"unknown sweep suite {suite!r}; choose from {SUITES}")


def _as_mesh(x):
    return x if isinstance(x, TriMesh) else load_mesh(x)


def _name(x, i):
    return os.path.basename(x) if isinstance(x, str) else f"mesh{i}"


def run_sweep(suite: str, config: dict, out_csv=None, model=None) -> list:
    """Denoise every variant of ``suite`` with one fixed model and record theta.

    ``config`` keys: ``checkpoint`` (unless ``model`` is passed), ``mesh``
    (noise suites) or ``meshes`` (resolution), ``levels`` / ``kinds`` /
    ``level``, ``seed``, ``iterations``, ``N``, ``backend``.
    """
    from .network import DNFNet
    from .pipeline import DenoiseOptions, denoise_mesh

    if suite not in SUITES:
        raise ValueError(f"unknown sweep suite {suite!r}; choose from {SUITES}")
    net = model if model is not None else DNFNet.load(config["checkpoint"])
    opts = DenoiseOptions(iterations=int(config.get("iterations", 20)), N=config.get("N"),
                          backend=config.get("backend", "heat"))
    rows = []
    for variant, name, kind, level, clean, noisy in _variants(suite, config):
        den, _ = denoise_mesh(noisy, net, opts)
        rows.append({
            "suite": suite, "variant": variant, "mesh": name, "kind": kind, "level": level,
            "n_faces": clean.n_faces,
            "theta_noisy_deg": mean_angular_difference(clean, noisy).theta,
            "theta_denoised_deg": mean_angular_difference(clean, den).theta,
        })
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows

"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from .autograd import CheckpointError
from .evaluation import (SUITES, export_error_map, load_sweep_config, mean_angular_difference,
                         run_sweep, write_theta_csv)
from .geodesics import SolverError
from .mesh import MeshError, load_mesh, save_mesh
from .network import DNFNet
from .noise import KINDS, NoiseSpec, add_noise, write_sidecar
from .patching import DatasetError, write_dataset
from .pipeline import (PRESETS, DenoiseOptions, NumericalError, TrainConfig, denoise_mesh,
                       make_dataset, train)

MESH_EXT = (".obj", ".off", ".ply")
log = logging.getLogger("dnfnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _mesh_files(d):
    return sorted(f for f in os.listdir(d) if f.lower().endswith(MESH_EXT))


def pair_mesh_files(noisy_dir, clean_dir):
    """Match each noisy file to the clean file whose stem it equals or
    extends with ``_``/``-`` (longest match wins)."""
    clean = {os.path.splitext(f)[0]: f for f in _mesh_files(clean_dir)}
    pairs = []
    for f in _mesh_files(noisy_dir):
        stem = os.path.splitext(f)[0]
        best = None
        for c in clean:
            if stem == c or stem.startswith(c + "_") or stem.startswith(c + "-"):
                if best is None or len(c) > len(best):
                    best = c
        if best is None:
            raise DatasetError(f"no clean mesh matches noisy file {f}")
        pairs.append((os.path.join(noisy_dir, f), os.path.join(clean_dir, clean[best])))
    return pairs


def cmd_make_dataset(a):
    files = pair_mesh_files(a.noisy, a.clean)
    pairs = [(load_mesh(n), load_mesh(c)) for n, c in files]
    prov = json.dumps({"preset": a.preset, "seed": a.seed, "backend": a.backend,
                       "pairs": [[os.path.basename(n), os.path.basename(c)] for n, c in files]})
    ds = make_dataset(pairs, a.preset, a.seed, a.backend, prov)
    write_dataset(a.out, ds)
    print(f"wrote {len(ds)} patches (N={ds.N}, K={ds.K}) to {a.out}")


def cmd_synth_noise(a):
    mesh = load_mesh(a.inp)
    spec = NoiseSpec(a.kind, a.level, a.impulse_fraction, a.seed)
    save_mesh(add_noise(mesh, spec), a.out)
    write_sidecar(a.out + ".json", {"source": os.path.basename(a.inp), **spec.tag()})


def cmd_train(a):
    cfg = TrainConfig.from_file(a.config, dataset=a.dataset, out_dir=a.out) if a.config \
        else TrainConfig(dataset=a.dataset, out_dir=a.out)

    def progress(epoch, loss):
        log.info("epoch %d loss %.6f", epoch, loss)
    res = train(cfg, progress=progress)
    print(f"{res.steps} steps, final loss {res.history[-1]:.6f}, checkpoint {res.checkpoint}")


def cmd_denoise(a):
    mesh = load_mesh(a.inp)
    net = DNFNet.load(a.ckpt)
    den, normals = denoise_mesh(mesh, net, DenoiseOptions(iterations=a.iters, N=a.N,
                                                          backend=a.backend))
    save_mesh(den, a.out)
    if a.dump_normals:
        with open(a.dump_normals, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["face", "nx", "ny", "nz"])
            for i, n in enumerate(normals):
                w.writerow([i] + [repr(float(x)) for x in n])


def cmd_eval(a):
    gt, den = load_mesh(a.gt), load_mesh(a.denoised)
    if a.error_map:
        rec = export_error_map(gt, den, a.error_map, a.max_angle)
    else:
        rec = mean_angular_difference(gt, den)
    rec.mesh_id = os.path.basename(a.denoised)
    if a.csv:
        write_theta_csv(a.csv, [rec])
    print(f"theta = {rec.theta:.4f} deg over {len(rec.angles) - rec.n_excluded} faces")


def cmd_sweep(a):
    rows = run_sweep(a.suite, load_sweep_config(a.config), a.out)
    for r in rows:
        print(f"{r['variant']}: noisy {r['theta_noisy_deg']:.3f} -> "
              f"denoised {r['theta_denoised_deg']:.3f}")


def build_parser():
    p = _Parser(prog="dnfnet", description="Deep normal filtering for mesh denoising")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-dataset", help="extract training patches from mesh pairs")
    s.add_argument("--noisy", required=True)
    s.add_argument("--clean", required=True)
    s.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--backend", default="heat", choices=["heat", "dijkstra"])
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("synth-noise", help="add synthetic noise to a clean mesh")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--kind", default="gaussian-normal", choices=KINDS)
    s.add_argument("--level", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--impulse-fraction", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_noise)

    s = sub.add_parser("train", help="train on a patch dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="denoise a mesh with a trained checkpoint")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-normals")
    s.add_argument("--N", type=int)
    s.add_argument("--backend", default="heat", choices=["heat", "dijkstra"])
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("eval", help="mean angular difference against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--denoised", required=True)
    s.add_argument("--error-map")
    s.add_argument("--csv")
    s.add_argument("--max-angle", type=float, default=60.0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="robustness sweep with a fixed checkpoint")
    s.add_argument("--suite", required=True, choices=SUITES)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (NumericalError, SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (MeshError, DatasetError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

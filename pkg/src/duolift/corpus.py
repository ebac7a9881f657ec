"""Phantom corpora on disk: one directory per sample plus ``manifest.json``."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .phantom import PhantomSpec, generate_phantom, project
from .volio import load_projection, load_volume, save_volume

MANIFEST = "manifest.json"
FILES = ("volume", "lung", "vessel", "frontal", "lateral")


@dataclass
class Sample:
    id: str
    seed: int
    volume: np.ndarray  # float32 (D, H, W)
    lung: np.ndarray  # uint8
    vessel: np.ndarray  # uint8
    frontal: np.ndarray  # float32 (H, W)
    lateral: np.ndarray  # float32 (H, D)


def sample_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def _write_sample(args) -> dict:
    out_dir, index, seed, dims = args
    sid = f"sample_{index:04d}"
    sdir = Path(out_dir) / sid
    sdir.mkdir(parents=True, exist_ok=True)
    vol, lung, vessel = generate_phantom(PhantomSpec.random(seed, dims))
    rec = {"id": sid, "seed": seed}
    arrays = {
        "volume": vol.data,
        "lung": lung.data,
        "vessel": vessel.data,
        "frontal": project(vol, "frontal").data,
        "lateral": project(vol, "lateral").data,
    }
    for name, arr in arrays.items():
        save_volume(sdir / f"{name}.dlv", arr, vol.spacing)
        rec[name] = f"{sid}/{name}.dlv"
    return rec


def generate_corpus(out_dir, count: int, dims=(32, 32, 32), seed: int = 0, workers: int = 1) -> dict:
    """Write ``count`` phantoms with projections and return the manifest."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(out), i, s, tuple(dims)) for i, s in enumerate(sample_seeds(seed, count))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_write_sample, jobs))
    else:
        records = [_write_sample(j) for j in jobs]
    manifest = {"format": "duolift-corpus/1", "seed": seed, "dims": list(dims), "samples": records}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    return json.loads(path.read_text())


def load_corpus(corpus_dir) -> list[Sample]:
    root = Path(corpus_dir)
    samples = []
    for rec in read_manifest(root)["samples"]:
        vol, _ = load_volume(root / rec["volume"])
        lung, _ = load_volume(root / rec["lung"])
        vessel, _ = load_volume(root / rec["vessel"])
        samples.append(Sample(
            id=rec["id"], seed=rec["seed"], volume=vol, lung=lung, vessel=vessel,
            frontal=load_projection(root / rec["frontal"]),
            lateral=load_projection(root / rec["lateral"]),
        ))
    return samples


def corpus_digest(corpus_dir) -> str:
    """sha256 over the manifest and every file it lists."""
    root = Path(corpus_dir)
    h = hashlib.sha256((root / MANIFEST).read_bytes())
    for rec in read_manifest(root)["samples"]:
        for name in FILES:
            h.update((root / rec[name]).read_bytes())
    return h.hexdigest()

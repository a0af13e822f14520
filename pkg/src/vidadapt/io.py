"""On-disk formats: raw f32 latents with a JSON sidecar, frame directories and
run manifests."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def save_latents(path, x: torch.Tensor) -> Path:
    """Write ``path`` (little-endian float32, BCHW) and ``path.json``."""
    path = Path(path)
    if x.ndim != 4:
        raise ValueError("latents must be BCHW")
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = x.detach().cpu().numpy().astype("<f4", copy=False)
    path.write_bytes(np.ascontiguousarray(arr).tobytes())
    sidecar = {"shape": list(arr.shape), "layout": "BCHW", "dtype": "f32"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar))
    return path


def load_latents(path) -> torch.Tensor:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta.get("layout") != "BCHW" or meta.get("dtype") != "f32":
        raise ValueError(f"unsupported latent sidecar {meta}")
    shape = tuple(int(s) for s in meta["shape"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {raw.size} values for shape {shape}")
    return torch.from_numpy(raw.reshape(shape).astype(np.float32))


def list_frames(directory) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no image frames in {directory}")
    return files


def load_frames(directory) -> torch.Tensor:
    """Frames in lexicographic filename order, RGB scaled to [-1, 1]."""
    arrs = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) for p in list_frames(directory)]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"frames differ in size: {sorted(shapes)}")
    x = np.stack(arrs).transpose(0, 3, 1, 2) / 127.5 - 1.0
    return torch.from_numpy(x)


def save_frames(directory, frames: torch.Tensor, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arr = ((frames.detach().cpu().clamp(-1, 1).numpy() + 1.0) * 127.5).round().astype(np.uint8)
    paths = []
    for i, f in enumerate(arr):
        p = directory / f"{prefix}_{i:04d}.png"
        Image.fromarray(f.transpose(1, 2, 0)).save(p)
        paths.append(p)
    return paths


def content_hash(state: Mapping[str, torch.Tensor]) -> str:
    """git-style blob hash over tensors serialised in sorted-key order."""
    h = hashlib.sha256()
    for k in sorted(state):
        t = state[k].detach().cpu().contiguous()
        h.update(k.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    body = h.digest()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def write_manifest(path, config_text: str, seeds, weights: Optional[Mapping[str, torch.Tensor]] = None, extra=None) -> dict:
    manifest = {
        "config": {k.strip(): v.strip() for k, _, v in (ln.partition("=") for ln in config_text.splitlines() if ln.strip())},
        "seeds": list(seeds),
        "weights_hash": content_hash(weights) if weights else None,
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest

"""On-disk formats: sRGB PNG images, the dataset directory layout, and the
binary checkpoint container.

Dataset layout::

    cameras.json                per-camera intrinsics/extrinsics
    times.json                  timesteps, boxes, supervision split
    images/t{k}/cam{p}.png      8-bit sRGB, decoded to linear on load
    masks/t{k}/cam{p}.png       optional 8-bit grayscale foreground masks
    ground_truth.json           optional tracking ground truth (see synth)

Checkpoints are a single little-endian binary file: a 16-byte magic header
followed by length-prefixed named sections holding float64 arrays or JSON
documents.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import Box, Camera, GaussianSet, GrowflowError, Image, TimeAxis, TimedDataset

__all__ = [
    "linear_to_srgb", "srgb_to_linear", "encode_srgb_u8", "decode_srgb_u8",
    "write_png", "read_png", "write_mask_png", "read_mask_png",
    "write_dataset", "load_dataset", "DataError",
    "CHECKPOINT_MAGIC", "Checkpoint", "save_checkpoint", "load_checkpoint",
]

CHECKPOINT_MAGIC = b"GROWFLOWCKPT\x00\x00\x00\x01"


class DataError(GrowflowError):
    """Dataset or checkpoint files missing or malformed."""


# ---------------------------------------------------------------------------
# sRGB transfer


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, np.power((s + 0.055) / 1.055, 2.4))


def encode_srgb_u8(linear: np.ndarray) -> np.ndarray:
    return np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)


def decode_srgb_u8(u8: np.ndarray) -> np.ndarray:
    return srgb_to_linear(u8.astype(np.float64) / 255.0)


def write_png(path, linear_pixels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(encode_srgb_u8(linear_pixels), mode="RGB").save(path)


def read_png(path) -> Image:
    with PILImage.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return Image(decode_srgb_u8(u8))


def write_mask_png(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    u8 = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(u8, mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L")) > 127


# ---------------------------------------------------------------------------
# dataset directory


def write_dataset(out_dir, dataset: TimedDataset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cameras.json", "w") as f:
        json.dump([c.to_json() for c in dataset.cameras], f)
    times = dataset.time_axis.to_json()
    times["scene_bounds"] = dataset.scene_bounds.to_json()
    times["foreground_box"] = dataset.foreground_box.to_json()
    times["holdout_cameras"] = list(dataset.holdout_cameras)
    times["background"] = dataset.background.tolist()
    with open(out / "times.json", "w") as f:
        json.dump(times, f)
    for (ti, ci), img in dataset.images.items():
        write_png(out / "images" / f"t{ti}" / f"cam{ci}.png", img.pixels)
    if dataset.masks:
        for (ti, ci), mask in dataset.masks.items():
            write_mask_png(out / "masks" / f"t{ti}" / f"cam{ci}.png", mask)


def load_dataset(dataset_dir) -> TimedDataset:
    root = Path(dataset_dir)
    if not (root / "cameras.json").exists() or not (root / "times.json").exists():
        raise DataError(f"not a dataset directory: {root}")
    with open(root / "cameras.json") as f:
        cameras = [Camera.from_json(d) for d in json.load(f)]
    with open(root / "times.json") as f:
        times = json.load(f)
    axis = TimeAxis.from_json(times)
    images: dict[tuple[int, int], Image] = {}
    masks: dict[tuple[int, int], np.ndarray] = {}
    have_masks = (root / "masks").is_dir()
    for ti in range(axis.n_timesteps):
        for ci in range(len(cameras)):
            p = root / "images" / f"t{ti}" / f"cam{ci}.png"
            if not p.exists():
                raise DataError(f"missing image {p}")
            images[(ti, ci)] = read_png(p)
            if have_masks:
                masks[(ti, ci)] = read_mask_png(root / "masks" / f"t{ti}" / f"cam{ci}.png")
    return TimedDataset(
        cameras=cameras,
        images=images,
        masks=masks if have_masks else None,
        time_axis=axis,
        scene_bounds=Box.from_json(times["scene_bounds"]),
        foreground_box=Box.from_json(times["foreground_box"]),
        holdout_cameras=list(times.get("holdout_cameras", [])),
        background=np.array(times.get("background", [1.0, 1.0, 1.0])),
    )


# ---------------------------------------------------------------------------
# checkpoint container

_KIND_ARRAY = 0
_KIND_JSON = 1


def _write_section_array(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    a = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", _KIND_ARRAY))
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(struct.pack("<Q", a.nbytes))
    f.write(a.tobytes())


def _write_section_json(f, name: str, doc) -> None:
    nb = name.encode()
    payload = json.dumps(doc).encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", _KIND_JSON))
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def _read_sections(f) -> tuple[dict[str, np.ndarray], dict[str, object]]:
    arrays: dict[str, np.ndarray] = {}
    docs: dict[str, object] = {}
    while True:
        head = f.read(4)
        if not head:
            break
        (name_len,) = struct.unpack("<I", head)
        name = f.read(name_len).decode()
        (kind,) = struct.unpack("<B", f.read(1))
        if kind == _KIND_ARRAY:
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            (nbytes,) = struct.unpack("<Q", f.read(8))
            arrays[name] = np.frombuffer(f.read(nbytes), dtype="<f8").reshape(shape).copy()
        elif kind == _KIND_JSON:
            (nbytes,) = struct.unpack("<Q", f.read(8))
            docs[name] = json.loads(f.read(nbytes).decode())
        else:
            raise DataError(f"unknown checkpoint section kind {kind}")
    return arrays, docs


@dataclass
class Checkpoint:
    """Self-contained training state: scene, rig, time axis, and (once the
    dynamics stages have run) velocity-field parameters and the cache of
    per-timestep boundary snapshots."""

    gaussians: GaussianSet
    cameras: list[Camera]
    time_axis: TimeAxis
    scene_bounds: Box
    foreground_box: Box
    background: np.ndarray
    field_params: "object | None" = None     # field.VelocityFieldParams
    cache_times: np.ndarray | None = None    # (K,) normalized, descending
    cache_snapshots: list[dict[str, np.ndarray]] | None = None
    meta: dict | None = None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    from . import field as field_mod

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        g = ckpt.gaussians
        _write_section_array(f, "gaussians.centers", g.centers)
        _write_section_array(f, "gaussians.rotations", g.rotations)
        _write_section_array(f, "gaussians.log_scales", g.log_scales)
        _write_section_array(f, "gaussians.opacity_logits", g.opacity_logits)
        _write_section_array(f, "gaussians.colors", g.colors)
        _write_section_array(f, "gaussians.foreground_mask",
                             g.foreground_mask.astype(np.float64))
        _write_section_array(f, "background", ckpt.background)
        _write_section_array(f, "scene_bounds", np.stack([ckpt.scene_bounds.lo,
                                                          ckpt.scene_bounds.hi]))
        _write_section_array(f, "foreground_box", np.stack([ckpt.foreground_box.lo,
                                                            ckpt.foreground_box.hi]))
        _write_section_json(f, "time_axis", ckpt.time_axis.to_json())
        _write_section_json(f, "cameras", [c.to_json() for c in ckpt.cameras])
        _write_section_json(f, "meta", ckpt.meta or {})
        if ckpt.field_params is not None:
            meta, arrays = field_mod.params_to_sections(ckpt.field_params)
            _write_section_json(f, "field.meta", meta)
            for name, arr in arrays.items():
                _write_section_array(f, f"field.{name}", arr)
        if ckpt.cache_times is not None:
            _write_section_array(f, "cache.times", ckpt.cache_times)
            for k, snap in enumerate(ckpt.cache_snapshots):
                for key, arr in snap.items():
                    _write_section_array(f, f"cache.{k}.{key}", arr)


def load_checkpoint(path) -> Checkpoint:
    from . import field as field_mod

    p = Path(path)
    if not p.exists():
        raise DataError(f"missing checkpoint: {p}")
    with open(p, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"bad checkpoint magic in {p}")
        arrays, docs = _read_sections(f)
    gaussians = GaussianSet(
        centers=arrays["gaussians.centers"],
        rotations=arrays["gaussians.rotations"],
        log_scales=arrays["gaussians.log_scales"],
        opacity_logits=arrays["gaussians.opacity_logits"],
        colors=arrays["gaussians.colors"],
        foreground_mask=arrays["gaussians.foreground_mask"] != 0.0,
    )
    field_params = None
    if "field.meta" in docs:
        prefix = "field."
        field_arrays = {k[len(prefix):]: v for k, v in arrays.items()
                        if k.startswith(prefix)}
        field_params = field_mod.params_from_sections(docs["field.meta"], field_arrays)
    cache_times = arrays.get("cache.times")
    cache_snapshots = None
    if cache_times is not None:
        cache_snapshots = []
        for k in range(len(cache_times)):
            prefix = f"cache.{k}."
            snap = {key[len(prefix):]: v for key, v in arrays.items()
                    if key.startswith(prefix)}
            cache_snapshots.append(snap)
    return Checkpoint(
        gaussians=gaussians,
        cameras=[Camera.from_json(d) for d in docs["cameras"]],
        time_axis=TimeAxis.from_json(docs["time_axis"]),
        scene_bounds=Box(arrays["scene_bounds"][0], arrays["scene_bounds"][1]),
        foreground_box=Box(arrays["foreground_box"][0], arrays["foreground_box"][1]),
        background=arrays["background"],
        field_params=field_params,
        cache_times=cache_times,
        cache_snapshots=cache_snapshots,
        meta=docs.get("meta") or {},
    )

"""File formats: PPM/PNG images, PLY point clouds, dataset manifests, NXSP checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .appearance import AppearanceMapper
from .nn import AdamState, Mlp
from .scene import Camera, KernelHeads, Kernels, SceneConfig
from .uncertainty import UncertaintyHead


class DataError(Exception):
    """Malformed or missing input data; the message names the offending file."""


# -- images -----------------------------------------------------------------

def _to_bytes(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image) -> None:
    path = Path(path)
    data = _to_bytes(image)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(data, "RGB").save(path)
        return
    h, w = data.shape[:2]
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def _ppm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens; returns ``(tokens, offset)``."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise DataError("truncated PPM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1


def read_image(path) -> np.ndarray:
    """Decode to float RGB in [0, 1], shape ``(H, W, 3)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: image file not found")
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    data = path.read_bytes()
    if data[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {data[:2]!r})")
    try:
        (_, w, h, maxval), off = _ppm_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: unsupported PPM maxval {maxval} (only 255)")
    if w <= 0 or h <= 0:
        raise DataError(f"{path}: invalid PPM dimensions {w}x{h}")
    body = data[off:off + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: PPM payload truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


# -- point clouds -----------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_points(path):
    """Vertices of an ascii or binary-little-endian PLY; returns ``(xyz, rgb or None)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: point file not found")
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: malformed PLY header")
    nl = data.find(b"\n", end)
    header = data[:end].decode("ascii", "replace").splitlines()
    body = data[nl + 1:] if nl >= 0 else b""
    fmt, n_vert, props, elements = None, None, [], []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append(parts[1])
            if parts[1] == "vertex":
                n_vert = int(parts[2])
        elif parts[0] == "property" and elements and elements[-1] == "vertex":
            if parts[1] == "list":
                raise DataError(f"{path}: list properties on vertices are unsupported")
            if parts[1] not in _PLY_TYPES:
                raise DataError(f"{path}: unknown PLY type {parts[1]!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    names = [p[0] for p in props]
    if n_vert is None or not {"x", "y", "z"} <= set(names):
        raise DataError(f"{path}: PLY lacks vertex x/y/z")
    if elements and elements[0] != "vertex":
        raise DataError(f"{path}: vertex must be the first PLY element")
    if fmt == "ascii":
        rows = body.decode("ascii", "replace").split("\n")
        rows = [r.split() for r in rows if r.strip()]
        if len(rows) < n_vert or any(len(r) < len(props) for r in rows[:n_vert]):
            raise DataError(f"{path}: truncated PLY payload ({len(rows)} of {n_vert} vertices)")
        table = {name: np.array([float(r[i]) for r in rows[:n_vert]]) for i, name in enumerate(names)}
    elif fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        if len(body) < dtype.itemsize * n_vert:
            raise DataError(f"{path}: truncated PLY payload")
        arr = np.frombuffer(body[: dtype.itemsize * n_vert], dtype=dtype)
        table = {n: arr[n].astype(np.float64) for n in names}
    else:
        raise DataError(f"{path}: unsupported PLY format {fmt!r}")
    xyz = np.stack([table["x"], table["y"], table["z"]], 1)
    rgb = None
    if {"red", "green", "blue"} <= set(names):
        rgb = np.stack([table["red"], table["green"], table["blue"]], 1) / 255.0
    return xyz, rgb


def save_points(path, xyz, rgb=None, binary: bool = True) -> None:
    xyz = np.asarray(xyz, dtype=np.float64)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(xyz)}", "property double x", "property double y",
            "property double z"]
    if rgb is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    text = "\n".join(head) + "\n"
    cols = _to_bytes(rgb[None])[0] if rgb is not None else None
    if binary:
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
        if cols is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        arr = np.zeros(len(xyz), dtype=fields)
        arr["x"], arr["y"], arr["z"] = xyz.T
        if cols is not None:
            arr["red"], arr["green"], arr["blue"] = cols.T
        Path(path).write_bytes(text.encode() + arr.tobytes())
    else:
        lines = []
        for i, p in enumerate(xyz):
            row = [repr(float(v)) for v in p]
            if cols is not None:
                row += [str(int(v)) for v in cols[i]]
            lines.append(" ".join(row))
        Path(path).write_text(text + "\n".join(lines) + "\n")


# -- datasets ---------------------------------------------------------------

def camera_to_dict(cam: Camera) -> dict:
    return {"rotation": cam.rotation.reshape(-1).tolist(), "translation": cam.translation.tolist(),
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height}


def camera_from_dict(d: dict) -> Camera:
    return Camera(np.array(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"],
                  float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                  int(d["width"]), int(d["height"]))


@dataclass
class ImageRecord:
    id: str
    image: np.ndarray
    camera: Camera
    split: str
    occluder_mask: Optional[np.ndarray] = None
    lighting: Optional[dict] = None


@dataclass
class Dataset:
    images: list
    points: np.ndarray
    colors: Optional[np.ndarray]
    root: Path
    manifest_path: Optional[Path] = None
    extra: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [r for r in self.images if r.split == name]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def test(self) -> list:
        return self.split("test")

    @property
    def ids(self) -> list:
        return [r.id for r in self.images]

    def get(self, image_id: str) -> ImageRecord:
        for r in self.images:
            if r.id == image_id:
                return r
        raise KeyError(f"unknown image id {image_id!r}")


def load_dataset(manifest_path) -> Dataset:
    """Load a JSON manifest; image/point/mask paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: manifest not found")
    try:
        man = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: manifest is not valid JSON ({exc})") from exc
    root = manifest_path.parent
    seen = set()
    records = []
    for entry in man.get("images", []):
        iid = str(entry["id"])
        if iid in seen:
            raise DataError(f"{manifest_path}: duplicate image id {iid!r}")
        seen.add(iid)
        cam = camera_from_dict(entry["camera"])
        try:
            cam.validate()
        except ValueError as exc:
            raise DataError(f"{manifest_path}: image {iid!r}: {exc}") from exc
        img = read_image(root / entry["file"])
        if img.shape[:2] != (cam.height, cam.width):
            raise DataError(f"{root / entry['file']}: size {img.shape[1]}x{img.shape[0]} "
                            f"does not match camera {cam.width}x{cam.height}")
        split = entry.get("split", "train")
        if split not in ("train", "test"):
            raise DataError(f"{manifest_path}: image {iid!r} has unknown split {split!r}")
        mask = None
        if entry.get("mask"):
            mpath = root / entry["mask"]
            if not mpath.exists():
                raise DataError(f"{mpath}: occluder mask not found")
            mask = read_image(mpath)[..., 0] > 0.5
        records.append(ImageRecord(iid, img, cam, split, mask, entry.get("lighting")))
    if "points" not in man:
        raise DataError(f"{manifest_path}: manifest has no points file")
    xyz, rgb = load_points(root / man["points"])
    return Dataset(records, xyz, rgb, root, manifest_path, man.get("extra", {}))


def write_manifest(path, entries: list, points_file: str, extra: Optional[dict] = None) -> None:
    man = {"version": 1, "points": points_file, "images": entries}
    if extra:
        man["extra"] = extra
    Path(path).write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"NXSP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model: object  # wildsplat.model.Model
    iteration: int = 0
    optimizer: Optional[dict] = None  # name -> AdamState
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)


def _mlp_meta(mlp: Mlp) -> dict:
    return {"output": mlp.output, "dropout": mlp.dropout, "layers": len(mlp.weights)}


def _model_arrays(model) -> dict:
    arrays = dict(model.params())
    arrays["kernels.acc_opacity"] = model.kernels.acc_opacity
    arrays["kernels.is_sky"] = model.kernels.is_sky.astype(np.float64)
    return arrays


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Little-endian: magic, u32 version, u32 header length, JSON header, raw f64 arrays."""
    model = ckpt.model
    arrays = _model_arrays(model)
    opt_meta = None
    if ckpt.optimizer is not None:
        opt_meta = {}
        for name, st in sorted(ckpt.optimizer.items()):
            opt_meta[name] = {"t": st.t, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2,
                              "eps": st.eps, "n": len(st.m)}
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                arrays[f"opt.{name}.m{i}"] = m
                arrays[f"opt.{name}.v{i}"] = v
    names = sorted(arrays)
    header = {
        "scene": asdict(model.cfg),
        "light_dim": model.light_dim,
        "transient_dim": model.transient_dim,
        "background": list(model.background),
        "beta_min": model.uncert.beta_min,
        "image_ids": list(model.image_ids),
        "heads": {n: _mlp_meta(m) for n, m in model.heads.items()},
        "mapper": _mlp_meta(model.mapper.mlp),
        "uncert": _mlp_meta(model.uncert.mlp),
        "iteration": ckpt.iteration,
        "optimizer": opt_meta,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "arrays": [[n, list(np.shape(arrays[n]))] for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    from .model import Model

    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    data = path.read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not an NXSP checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    arrays, off = {}, 12 + hlen
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        chunk = data[off:off + 8 * count]
        if len(chunk) != 8 * count:
            raise DataError(f"{path}: checkpoint truncated at array {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise DataError(f"{path}: {len(data) - off} trailing bytes after checkpoint arrays")

    cfg = SceneConfig(**header["scene"])

    def mlp(prefix, meta):
        ps = [arrays[f"{prefix}.{i}"] for i in range(2 * meta["layers"])]
        return Mlp(ps[0::2], ps[1::2], output=meta["output"], dropout=meta["dropout"])

    kernels = Kernels(
        **{n: arrays[f"kernels.{n}"] for n in Kernels.PARAMS},
        acc_opacity=arrays["kernels.acc_opacity"],
        is_sky=arrays["kernels.is_sky"] > 0.5,
    )
    heads = KernelHeads(*(mlp(f"heads.{n}", header["heads"][n]) for n in KernelHeads.NAMES))
    mapper = AppearanceMapper(mlp("mapper", header["mapper"]), cfg.appearance_dim,
                              header["light_dim"])
    uncert = UncertaintyHead(mlp("uncert", header["uncert"]), cfg.uncertainty_dim,
                             header["transient_dim"], header["beta_min"])
    model = Model(cfg, kernels, heads, mapper, uncert, arrays["embed.light"],
                  arrays["embed.transient"], list(header["image_ids"]), header["light_dim"],
                  header["transient_dim"], tuple(header["background"]))
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = {}
        for name, st in header["optimizer"].items():
            optimizer[name] = AdamState(
                [arrays[f"opt.{name}.m{i}"] for i in range(st["n"])],
                [arrays[f"opt.{name}.v{i}"] for i in range(st["n"])],
                st["t"], st["lr"], st["beta1"], st["beta2"], st["eps"])
    return Checkpoint(model, header["iteration"], optimizer, header["rng_state"], header["meta"])

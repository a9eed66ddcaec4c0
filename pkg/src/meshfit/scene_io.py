"""Asset and configuration I/O.

OBJ/MTL subset, PFM (canonical lossless HDR format), PNG via Pillow with
sRGB decode/encode, JSON animation manifests, scene descriptions, and
resumable binary checkpoints.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .adjoint import Buffer, ParamRegistry, value_of
from .geometry import BoneSet, Mesh
from .raster import TexturePyramid, box_downsample_values
from .shading import srgb_inverse, srgb_transfer

CHECKPOINT_MAGIC = b"MFITCKPT"
CHECKPOINT_VERSION = 1


class ParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PFM

def write_pfm(path, image: np.ndarray):
    """Little-endian PFM; rows stored bottom-up, 1 or 3 channels."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise ValueError("PFM supports 1 or 3 channels")
    header = b"PF\n" if c == 3 else b"Pf\n"
    data = np.flipud(image).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(data)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ParseError(f"{path}: not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if kind == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
    c = 3 if kind == b"PF" else 1
    img = data.reshape(h, w, c).astype(np.float64)
    img = np.flipud(img).copy()
    return img[:, :, 0] if c == 1 else img


# ---------------------------------------------------------------------------
# PNG (LDR, sRGB-encoded on disk)

def write_png(path, image: np.ndarray, bitdepth: int = 8):
    """Clamp to [0,1], apply the sRGB transfer, and quantize."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    encoded = srgb_transfer(image)
    if bitdepth == 8:
        q = np.round(encoded * 255.0).astype(np.uint8)
        if q.ndim == 2:
            Image.fromarray(q, mode="L").save(path)
        elif q.shape[2] == 1:
            Image.fromarray(q[:, :, 0], mode="L").save(path)
        elif q.shape[2] == 3:
            Image.fromarray(q, mode="RGB").save(path)
        elif q.shape[2] == 4:
            Image.fromarray(q, mode="RGBA").save(path)
        else:
            raise ValueError(f"unsupported channel count: {q.shape[2]}")
    elif bitdepth == 16:
        if image.ndim == 3 and image.shape[2] > 1:
            raise ValueError("16-bit PNG output is supported for single-channel images only")
        q = np.round(encoded.reshape(encoded.shape[0], -1) * 65535.0).astype(np.uint16)
        Image.fromarray(q, mode="I;16").save(path)
    else:
        raise ValueError(f"unsupported bit depth: {bitdepth}")


def read_png(path) -> np.ndarray:
    """Decode to linear [0,1] by inverting the sRGB transfer."""
    img = Image.open(path)
    if img.mode in ("I;16", "I"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    else:
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return srgb_inverse(arr)


def load_image(path) -> np.ndarray:
    """Linear HDR values from PFM or PNG, by extension."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() == ".png":
        return read_png(path)
    raise ValueError(f"unsupported image format: {path.suffix}")


# ---------------------------------------------------------------------------
# Texture pyramids

def save_texture(pyramid: TexturePyramid, path):
    """Base level at ``path``; independent mips as ``stem.mipN`` siblings."""
    path = Path(path)
    levels = [value_of(l) for l in pyramid._levels] if pyramid.independent_levels else [value_of(pyramid.base)]
    for i, lvl in enumerate(levels):
        p = path if i == 0 else path.with_name(f"{path.stem}.mip{i}{path.suffix}")
        if path.suffix.lower() == ".pfm":
            if lvl.shape[2] == 1:
                write_pfm(p, lvl[:, :, 0])
            elif lvl.shape[2] == 3:
                write_pfm(p, lvl)
            else:  # RGBA: alpha goes to a sibling file
                write_pfm(p, lvl[:, :, :3])
                write_pfm(p.with_name(f"{p.stem}.alpha{p.suffix}"), lvl[:, :, 3])
        else:
            write_png(p, lvl)


def load_texture(path, channels: int | None = None, independent_levels: bool = False) -> TexturePyramid:
    """Read a texture (plus ``.mipN`` siblings when independent) as a pyramid."""
    path = Path(path)
    base = _load_texture_level(path, channels)
    if not independent_levels:
        return TexturePyramid([Buffer(base)], independent_levels=False)
    levels = [base]
    i = 1
    while max(levels[-1].shape[0], levels[-1].shape[1]) > 1:
        p = path.with_name(f"{path.stem}.mip{i}{path.suffix}")
        if p.exists():
            levels.append(_load_texture_level(p, channels))
        else:
            levels.append(box_downsample_values(levels[-1]))
        i += 1
    return TexturePyramid([Buffer(l) for l in levels], independent_levels=True)


def _load_texture_level(path: Path, channels: int | None) -> np.ndarray:
    img = load_image(path)
    if img.ndim == 2:
        img = img[:, :, None]
    if path.suffix.lower() == ".pfm" and channels == 4:
        alpha_path = path.with_name(f"{path.stem}.alpha{path.suffix}")
        if alpha_path.exists():
            a = read_pfm(alpha_path)
            img = np.concatenate([img, a[:, :, None]], axis=2)
    if channels is not None and img.shape[2] != channels:
        if img.shape[2] == 3 and channels == 4:
            img = np.concatenate([img, np.ones_like(img[:, :, :1])], axis=2)
        elif img.shape[2] == 1 and channels > 1:
            img = np.repeat(img, channels, axis=2)
        elif img.shape[2] > channels:
            img = img[:, :, :channels]
        else:
            raise ValueError(f"{path}: expected {channels} channels, found {img.shape[2]}")
    return img


# ---------------------------------------------------------------------------
# OBJ / MTL

def load_obj(path, allow_fan: bool = False):
    """Wavefront OBJ subset: v / vt / vn / f, plus an MTL texture-map subset.

    Quads are fan-triangulated; n-gons with five or more corners are
    rejected unless ``allow_fan``.  Returns (Mesh, material texture paths).
    """
    path = Path(path)
    positions: list = []
    uvs: list = []
    faces: list = []
    uv_faces: list = []
    face_lines: list = []
    mtl_textures: dict = {}
    any_uv = False

    def parse_index(token: str, count: int, line_no: int) -> tuple[int, int | None]:
        parts = token.split("/")
        try:
            vi = int(parts[0])
            ti = int(parts[1]) if len(parts) > 1 and parts[1] else None
        except ValueError as e:
            raise ParseError(f"{path}:{line_no}: malformed face token {token!r}") from e
        vi = vi - 1 if vi > 0 else count + vi
        if ti is not None:
            ti = ti - 1 if ti > 0 else len(uvs) + ti
        return vi, ti

    with open(path, "r") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            key = tokens[0]
            try:
                if key == "v":
                    positions.append([float(t) for t in tokens[1:4]])
                elif key == "vt":
                    uvs.append([float(tokens[1]), float(tokens[2])])
                elif key == "vn":
                    pass  # normals are derived, not stored
                elif key == "f":
                    corners = [parse_index(t, len(positions), line_no) for t in tokens[1:]]
                    if len(corners) < 3:
                        raise ParseError(f"{path}:{line_no}: face with fewer than 3 corners")
                    if len(corners) > 4 and not allow_fan:
                        raise ParseError(
                            f"{path}:{line_no}: {len(corners)}-gon needs fan triangulation enabled"
                        )
                    for k in range(1, len(corners) - 1):
                        tri = (corners[0], corners[k], corners[k + 1])
                        faces.append([c[0] for c in tri])
                        uv_faces.append([c[1] if c[1] is not None else 0 for c in tri])
                        if any(c[1] is not None for c in tri):
                            any_uv = True
                        face_lines.append(line_no)
                elif key == "mtllib":
                    mtl_path = path.parent / " ".join(tokens[1:])
                    if mtl_path.exists():
                        mtl_textures.update(_load_mtl(mtl_path))
                elif key in ("usemtl", "o", "g", "s"):
                    pass
                else:
                    pass  # unknown directives are ignored
            except (ValueError, IndexError) as e:
                if isinstance(e, ParseError):
                    raise
                raise ParseError(f"{path}:{line_no}: malformed {key!r} line") from e

    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    for fi, line_no in zip(faces, face_lines):
        if max(fi) >= len(positions) or min(fi) < 0:
            raise ParseError(f"{path}:{line_no}: face index out of range")
    if any_uv:
        uvs_arr = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
        uv_faces_arr = np.asarray(uv_faces, dtype=np.int32)
        for fi, line_no in zip(uv_faces, face_lines):
            if max(fi) >= len(uvs_arr) or min(fi) < 0:
                raise ParseError(f"{path}:{line_no}: uv index out of range")
    else:
        uvs_arr = None
        uv_faces_arr = None
    mesh = Mesh(
        positions=positions,
        faces=np.asarray(faces, dtype=np.int32),
        uvs=uvs_arr,
        uv_faces=uv_faces_arr,
    )
    return mesh, mtl_textures


def _load_mtl(path: Path) -> dict:
    """map_Kd / map_Ks (as orm) / map_bump (normal) / map_d (alpha) subset."""
    keys = {"map_kd": "kd", "map_ks": "orm", "map_bump": "normal_map", "bump": "normal_map", "map_d": "alpha"}
    textures: dict = {}
    for raw in open(path, "r"):
        tokens = raw.strip().split()
        if not tokens:
            continue
        key = tokens[0].lower()
        if key in keys and keys[key] not in textures:
            textures[keys[key]] = str(path.parent / tokens[-1])
    return textures


def save_obj(mesh: Mesh, path, material=None, texture_format: str = "png"):
    """OBJ (+ MTL and texture files when a material is given)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = [path]
    mtl_name = None
    if material is not None:
        mtl_path = path.with_suffix(".mtl")
        mtl_name = path.stem
        tex_ext = ".pfm" if texture_format == "pfm" else ".png"
        lines = [f"newmtl {mtl_name}"]
        for key, pyr in material.pyramids().items():
            tex_path = path.with_name(f"{path.stem}_{key}{tex_ext}")
            if key == "displacement":
                tex_path = tex_path.with_suffix(".pfm")  # float data
            save_texture(pyr, tex_path)
            written.append(tex_path)
            mtl_key = {"kd": "map_Kd", "orm": "map_Ks", "normal_map": "map_bump", "displacement": "map_disp"}[key]
            lines.append(f"{mtl_key} {tex_path.name}")
        mtl_path.write_text("\n".join(lines) + "\n")
        written.append(mtl_path)

    with open(path, "w") as f:
        if mtl_name:
            f.write(f"mtllib {path.stem}.mtl\n")
        for v in mesh.positions:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if mesh.uvs is not None:
            for t in mesh.uvs:
                f.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        if mtl_name:
            f.write(f"usemtl {mtl_name}\n")
        if mesh.uvs is not None and mesh.uv_faces is not None:
            for fi, ti in zip(mesh.faces, mesh.uv_faces):
                f.write(
                    f"f {fi[0] + 1}/{ti[0] + 1} {fi[1] + 1}/{ti[1] + 1} {fi[2] + 1}/{ti[2] + 1}\n"
                )
        else:
            for fi in mesh.faces:
                f.write(f"f {fi[0] + 1} {fi[1] + 1} {fi[2] + 1}\n")
    return written


# ---------------------------------------------------------------------------
# Animation manifest

def load_animation(path):
    """JSON skinning manifest -> (BoneSet, optional initial weights).

    Schema: {"bones": B, "frames": N,
             "transforms": N x B x 16 row-major floats,
             "skin_weights": optional V x B}
    """
    with open(path) as f:
        doc = json.load(f)
    b = int(doc["bones"])
    n = int(doc["frames"])
    tr = doc["transforms"]
    if len(tr) != n:
        raise ParseError(f"{path}: expected {n} frames, found {len(tr)}")
    mats = np.zeros((n, b, 4, 4))
    for fi, frame in enumerate(tr):
        if len(frame) != b:
            raise ParseError(f"{path}: frame {fi} has {len(frame)} bones, expected {b}")
        for bi, flat in enumerate(frame):
            if len(flat) != 16:
                raise ParseError(f"{path}: frame {fi} bone {bi}: need 16 matrix entries")
            mats[fi, bi] = np.asarray(flat, dtype=np.float64).reshape(4, 4)
    try:
        bones = BoneSet(mats)
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from e
    weights = None
    if "skin_weights" in doc:
        weights = np.asarray(doc["skin_weights"], dtype=np.float64)
        if weights.ndim != 2 or weights.shape[1] != b:
            raise ParseError(f"{path}: skin_weights must be V x {b}")
    return bones, weights


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, iteration: int, registry: ParamRegistry, adam_state=None, schedule=None):
    """Versioned binary state dump; resuming reproduces the run bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "iteration": int(iteration),
        "params": [{"name": p.name, "shape": list(p.values.shape), "learnable": p.learnable} for p in registry],
        "schedule": None,
        "adam_step": None,
    }
    if schedule is not None:
        header["schedule"] = {
            "lambda_0": schedule.lambda_0,
            "lambda_min": schedule.lambda_min,
            "lambda_current": schedule.lambda_current,
            "lr_0": schedule.lr_0,
            "k_lambda": schedule.k_lambda,
            "k_lr": schedule.k_lr,
            "t": schedule.t,
        }
    blobs = [p.values.astype("<f8").tobytes() for p in registry]
    if adam_state is not None:
        header["adam_step"] = adam_state.step
        for p in registry:
            if p.learnable:
                blobs.append(adam_state.m[p.name].astype("<f8").tobytes())
                blobs.append(adam_state.v[p.name].astype("<f8").tobytes())
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path, registry: ParamRegistry, adam_state=None, schedule=None) -> int:
    """Restore parameters (and optimizer/schedule state) in place."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version} != {CHECKPOINT_VERSION}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        names = registry.names()
        saved = [p["name"] for p in header["params"]]
        if saved != names:
            raise ValueError(f"{path}: parameter set mismatch: {saved} != {names}")
        for meta in header["params"]:
            p = registry[meta["name"]]
            shape = tuple(meta["shape"])
            if shape != p.values.shape:
                raise ValueError(
                    f"{path}: shape mismatch for {meta['name']}: {shape} != {p.values.shape}"
                )
            data = np.frombuffer(f.read(p.values.size * 8), dtype="<f8").reshape(shape)
            p.values[...] = data
        if adam_state is not None and header["adam_step"] is not None:
            adam_state.step = int(header["adam_step"])
            for p in registry:
                if p.learnable:
                    m = np.frombuffer(f.read(p.values.size * 8), dtype="<f8").reshape(p.values.shape)
                    v = np.frombuffer(f.read(p.values.size * 8), dtype="<f8").reshape(p.values.shape)
                    adam_state.m[p.name][...] = m
                    adam_state.v[p.name][...] = v
    if schedule is not None and header["schedule"] is not None:
        s = header["schedule"]
        schedule.lambda_0 = s["lambda_0"]
        schedule.lambda_min = s["lambda_min"]
        schedule.lambda_current = s["lambda_current"]
        schedule.lr_0 = s["lr_0"]
        schedule.k_lambda = s["k_lambda"]
        schedule.k_lr = s["k_lr"]
        schedule.t = s["t"]
    return int(header["iteration"])


# ---------------------------------------------------------------------------
# Scene description

def _texture_values(spec, channels: int, rng: np.random.Generator, base_dir: Path, default):
    if spec is None:
        return None
    if isinstance(spec, str):
        spec = {"path": spec}
    if "path" in spec:
        pyr = load_texture(base_dir / spec["path"], channels=channels)
        return value_of(pyr.base)
    h, w = spec["size"]
    if spec.get("random"):
        vals = rng.random((h, w, channels))
        if channels == 4:
            vals[:, :, 3] = 1.0
        return vals
    value = spec.get("value", default)
    value = np.broadcast_to(np.atleast_1d(np.asarray(value, dtype=np.float64)), (channels,))
    return np.tile(value, (h, w, 1))


def load_scene(path, name: str | None = None):
    """Build a Scene from a JSON description.

    Referenced files resolve relative to the JSON location.  See README for
    the schema.
    """
    from .pipeline import build_scene  # local import: pipeline depends on io-free modules only

    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    base_dir = path.parent
    rng = np.random.default_rng(int(doc.get("init_seed", 0)))

    mesh, mtl_textures = load_obj(base_dir / doc["mesh"])
    mat = dict(doc.get("material", {}))
    if "kd" not in mat and "kd" in mtl_textures:
        mat["kd"] = {"path": str(Path(mtl_textures["kd"]).relative_to(base_dir))}
    if "orm" not in mat and "orm" in mtl_textures:
        mat["orm"] = {"path": str(Path(mtl_textures["orm"]).relative_to(base_dir))}
    if "normal_map" not in mat and "normal_map" in mtl_textures:
        mat["normal_map"] = {"path": str(Path(mtl_textures["normal_map"]).relative_to(base_dir))}

    kd = _texture_values(mat.get("kd", {"size": [4, 4], "value": [0.5, 0.5, 0.5, 1.0]}), 4, rng, base_dir, 0.5)
    if kd.shape[2] == 4 and "kd" in mat and isinstance(mat["kd"], dict) and mat["kd"].get("random"):
        kd[:, :, 3] = 1.0
    orm = _texture_values(mat.get("orm", {"size": [4, 4], "value": [1.0, 0.5, 0.0]}), 3, rng, base_dir, [1.0, 0.5, 0.0])
    nm = _texture_values(mat.get("normal_map"), 3, rng, base_dir, [0.5, 0.5, 1.0])
    disp = _texture_values(mat.get("displacement"), 1, rng, base_dir, 0.0)
    ambient = mat.get("ambient")

    bones = None
    skin_weights = None
    if doc.get("animation"):
        bones, skin_weights = load_animation(base_dir / doc["animation"])
    skin_logits = None
    if skin_weights is not None:
        skin_logits = np.log(np.maximum(skin_weights, 1e-6))

    learn_flags = doc.get(
        "learnable", {"positions": True, "kd": True, "orm": True, "normal_map": True}
    )
    learn = tuple(k for k, on in learn_flags.items() if on)

    return build_scene(
        mesh,
        kd=kd,
        orm=orm,
        normal_map=nm,
        displacement=disp,
        ambient=ambient,
        learn=learn,
        bones=bones,
        skin_logits=skin_logits,
        subdivision_levels=int(doc.get("subdivision_levels", 0)),
        independent_mips=bool(doc.get("independent_mips", False)),
        laplacian_mode=doc.get("laplacian_mode", "relative"),
        wrap=doc.get("wrap", "clamp"),
        name=name or path.stem,
    )

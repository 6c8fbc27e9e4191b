"""File formats: camera files, masks, clouds, images, depth maps, checkpoints.

Every writer goes through :func:`atomic_write`, so a reader never sees a
partially written file. Binary layouts are little-endian throughout.

Camera files follow the RealEstate10K line layout: a URL line, then one line
per frame with ``timestamp fx fy cx cy 0 0`` followed by the 12 entries of
the 3x4 camera-from-world matrix, row-major. Intrinsics are normalized by
image size (``cx``, ``fx`` by width; ``cy``, ``fy`` by height unless
overridden).
"""

import os
import struct
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .camera import CameraFrame, Intrinsics, Pose, Trajectory
from .epipolar import EpipolarMaskSet
from .exceptions import ParseError, ShapeMismatch

EPIM_MAGIC = b"EPIM"
GSPC_MAGIC = b"GSPC"
RAY_MAGIC = b"RAYE"
FORMAT_VERSION = 1


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ParseError("unexpected end of file", path=self.path)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    @property
    def done(self):
        return self.pos == len(self.data)


# camera files


def parse_camera_file(path, width, height, cy_by="height"):
    """Read a RealEstate10K-style camera file.

    Returns ``(trajectory, timestamps)``. Poses are converted to
    world-from-camera and rotations are re-orthonormalized (the files
    carry limited precision). Out-of-order timestamps only warn.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError(f"not a text file: {exc}", path=str(path)) from None
    if not lines:
        raise ParseError("empty camera file", path=str(path))
    frames, stamps = [], []
    cy_div = height if cy_by == "height" else width
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 19:
            raise ParseError(f"expected 19 fields, got {len(fields)}", line=lineno, path=str(path))
        try:
            vals = [float(v) for v in fields]
        except ValueError:
            raise ParseError("non-numeric field", line=lineno, path=str(path)) from None
        if not np.all(np.isfinite(vals)):
            raise ParseError("non-finite field", line=lineno, path=str(path))
        fx, fy, cx, cy = vals[1:5]
        try:
            k = Intrinsics(fx * width, fy * height, cx * width, cy * cy_div, width, height)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno, path=str(path)) from None
        m = np.asarray(vals[7:19]).reshape(3, 4)
        u, _, vt = np.linalg.svd(m[:, :3])
        R_cw = u @ vt
        if np.linalg.det(R_cw) < 0:
            raise ParseError("rotation has negative determinant", line=lineno, path=str(path))
        pose = Pose(R_cw, m[:, 3]).inverse()
        frames.append(CameraFrame(k, pose, len(frames)))
        stamps.append(vals[0])
    if not frames:
        raise ParseError("no camera lines", path=str(path))
    if np.any(np.diff(stamps) < 0):
        warnings.warn(f"{path}: timestamps are not monotone; file order kept", stacklevel=2)
    return Trajectory(tuple(frames)), np.asarray(stamps)


def format_camera_file(trajectory, timestamps=None, url="", cy_by="height"):
    lines = [url]
    if timestamps is None:
        timestamps = np.arange(len(trajectory))
    for ts, frame in zip(timestamps, trajectory):
        k = frame.intrinsics
        cy_div = k.height if cy_by == "height" else k.width
        cw = frame.pose.inverse()
        m = np.concatenate([cw.rotation, cw.translation[:, None]], axis=1).ravel()
        vals = [k.fx / k.width, k.fy / k.height, k.cx / k.width, k.cy / cy_div, 0.0, 0.0, *m]
        lines.append(" ".join([f"{int(ts)}" if float(ts).is_integer() else repr(float(ts))] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


def write_camera_file(path, trajectory, timestamps=None, url="", cy_by="height"):
    atomic_write(path, format_camera_file(trajectory, timestamps, url, cy_by))


# epipolar masks


def encode_epim(masks):
    out = [EPIM_MAGIC, struct.pack("<IIIId", FORMAT_VERSION, masks.height, masks.width, len(masks), masks.tau)]
    for (i, k) in masks.pairs:
        out.append(struct.pack("<IIB", i, k, int(masks.degenerate.get((i, k), False))))
        out.append(np.ascontiguousarray(masks.packed[(i, k)], dtype=np.uint8).tobytes())
    return b"".join(out)


def decode_epim(data, path=None):
    r = _Reader(data, path)
    if r.take(4) != EPIM_MAGIC:
        raise ParseError("bad EPIM magic", path=path)
    version, h, w, n_pairs, tau = r.unpack("<IIIId")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported EPIM version {version}", path=path)
    n = h * w
    row_bytes = (n + 7) // 8
    entries = []
    for _ in range(n_pairs):
        i, k, degenerate = r.unpack("<IIB")
        entries.append((i, k, bool(degenerate), r.array(np.uint8, n * row_bytes).reshape(n, row_bytes)))
    if not r.done:
        raise ParseError("trailing bytes after EPIM payload", path=path)
    n_frames = max((max(i, k) for i, k, _, _ in entries), default=-1) + 1
    masks = EpipolarMaskSet(h, w, tau, n_frames)
    for i, k, degenerate, packed in entries:
        masks.packed[(i, k)] = packed
        masks.degenerate[(i, k)] = degenerate
    return masks


def write_epim(path, masks):
    atomic_write(path, encode_epim(masks))


def read_epim(path):
    return decode_epim(_read_bytes(path), str(path))


# Gaussian clouds


def encode_gspc(cloud):
    body = np.concatenate(
        [cloud.means, cloud.scales, cloud.quats, cloud.opacities[:, None], cloud.colors], axis=1
    ).astype("<f4")
    return GSPC_MAGIC + struct.pack("<II", FORMAT_VERSION, len(cloud)) + body.tobytes()


def decode_gspc(data, path=None):
    from .gsplat import GaussianCloud

    r = _Reader(data, path)
    if r.take(4) != GSPC_MAGIC:
        raise ParseError("bad GSPC magic", path=path)
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported GSPC version {version}", path=path)
    a = r.array("<f4", count * 14).reshape(count, 14).astype(np.float64)
    if not r.done:
        raise ParseError("trailing bytes after GSPC payload", path=path)
    return GaussianCloud(a[:, 0:3], a[:, 3:6], a[:, 6:10], a[:, 10], a[:, 11:14])


def write_gspc(path, cloud):
    atomic_write(path, encode_gspc(cloud))


def read_gspc(path):
    return decode_gspc(_read_bytes(path), str(path))


# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def encode_ply(points, colors=None):
    """Binary little-endian PLY with float xyz and optional uchar rgb (colors in [0, 1])."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(points), dtype=fields)
    rec["x"], rec["y"], rec["z"] = points.T
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors, dtype=np.float64).reshape(-1, 3) * 255.0), 0, 255)
        rec["red"], rec["green"], rec["blue"] = c.astype(np.uint8).T
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()


def decode_ply(data, path=None):
    """Vertex positions and colors (or ``None``) from a binary little-endian PLY."""
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ParseError("not a PLY file", path=path)
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt, elements, current = None, [], None
    for lineno, line in enumerate(header, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            current = [parts[1], int(parts[2]), []]
            elements.append(current)
        elif parts[0] == "property":
            if current is None or parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property {line!r}", line=lineno, path=path)
            current[2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise ParseError(f"unknown header line {line!r}", line=lineno, path=path)
    if fmt != "binary_little_endian":
        raise ParseError(f"unsupported PLY format {fmt!r}", path=path)
    offset, vertex = 0, None
    for name, count, props in elements:
        dt = np.dtype(props)
        size = dt.itemsize * count
        if offset + size > len(body):
            raise ParseError("PLY body shorter than header declares", path=path)
        rec = np.frombuffer(body[offset:offset + size], dtype=dt, count=count)
        offset += size
        if name == "vertex":
            vertex = rec
    if vertex is None:
        raise ParseError("PLY has no vertex element", path=path)
    names = vertex.dtype.names
    if not {"x", "y", "z"} <= set(names):
        raise ParseError("PLY vertices lack x/y/z", path=path)
    points = np.stack([vertex[c].astype(np.float64) for c in "xyz"], axis=1)
    colors = None
    if {"red", "green", "blue"} <= set(names):
        rgb = np.stack([vertex[c].astype(np.float64) for c in ("red", "green", "blue")], axis=1)
        scale = 255.0 if vertex.dtype["red"].kind in "iu" else 1.0
        colors = rgb / scale
    return points, colors


def write_ply(path, cloud):
    """Write a PointCloud, or the means and colors of a GaussianCloud."""
    pts = cloud.points if hasattr(cloud, "points") else cloud.means
    atomic_write(path, encode_ply(pts, cloud.colors))


def read_ply(path):
    from .scale import PointCloud

    points, colors = decode_ply(_read_bytes(path), str(path))
    return PointCloud(points, colors)


# images and depth maps


def _netpbm_header(data, path, magic):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated header", path=path)
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ParseError(f"expected {magic.decode()} magic, got {tokens[0]!r}", path=path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("non-integer header field", path=path) from None
    return w, h, maxval, data[pos + 1:]


def _to_u8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img):
    """8-bit binary PPM from an (H, W, 3) float image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"PPM needs an (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + _to_u8(img).tobytes()


def decode_ppm(data, path=None):
    w, h, maxval, body = _netpbm_header(data, path, b"P6")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * 3
    if len(body) < n * dt.itemsize:
        raise ParseError("PPM body is truncated", path=path)
    return np.frombuffer(body[:n * dt.itemsize], dtype=dt).reshape(h, w, 3).astype(np.float64) / maxval


def write_ppm(path, img):
    atomic_write(path, encode_ppm(img))


def read_ppm(path):
    return decode_ppm(_read_bytes(path), str(path))


def encode_pgm(values, maxval=255):
    """Binary PGM from integer-valued data in ``[0, maxval]``."""
    v = np.asarray(values)
    if v.ndim != 2:
        raise ShapeMismatch(f"PGM needs an (H, W) array, got {v.shape}")
    h, w = v.shape
    dt = ">u2" if maxval > 255 else "u1"
    body = np.clip(v, 0, maxval).astype(dt).tobytes()
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body


def decode_pgm(data, path=None):
    """Raw integer samples of a binary PGM as float64."""
    w, h, maxval, body = _netpbm_header(data, path, b"P5")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h
    if len(body) < n * dt.itemsize:
        raise ParseError("PGM body is truncated", path=path)
    return np.frombuffer(body[:n * dt.itemsize], dtype=dt).reshape(h, w).astype(np.float64)


def write_pgm(path, values, maxval=255):
    atomic_write(path, encode_pgm(values, maxval))


def read_pgm(path, scale=1.0):
    """PGM samples times ``scale`` (e.g. millimetres to metres)."""
    return decode_pgm(_read_bytes(path), str(path)) * scale


def write_mask_pgm(path, mask):
    write_pgm(path, np.asarray(mask, dtype=bool).astype(np.uint8) * 255)


def encode_pfm(values):
    """Little-endian PFM (rows stored bottom to top)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        tag, v3 = "Pf", v
    elif v.ndim == 3 and v.shape[2] == 3:
        tag, v3 = "PF", v
    else:
        raise ShapeMismatch(f"PFM needs (H, W) or (H, W, 3), got {v.shape}")
    h, w = v.shape[:2]
    return f"{tag}\n{w} {h}\n-1.0\n".encode("ascii") + np.ascontiguousarray(v3[::-1]).astype("<f4").tobytes()


def decode_pfm(data, path=None):
    parts, pos = [], 0
    for _ in range(3):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise ParseError("truncated PFM header", path=path)
        parts.append(data[pos:nl].decode("ascii", errors="replace").strip())
        pos = nl + 1
    tag = parts[0]
    if tag not in ("PF", "Pf"):
        raise ParseError(f"bad PFM magic {tag!r}", path=path)
    try:
        w, h = (int(t) for t in parts[1].split())
        scale = float(parts[2])
    except ValueError:
        raise ParseError("malformed PFM header", path=path) from None
    ch = 3 if tag == "PF" else 1
    dt = np.dtype("<f4" if scale < 0 else ">f4")
    n = w * h * ch
    if len(data) - pos < n * 4:
        raise ParseError("PFM body is truncated", path=path)
    arr = np.frombuffer(data[pos:pos + n * 4], dtype=dt).astype(np.float64)
    arr = arr.reshape(h, w, ch)[::-1] if ch == 3 else arr.reshape(h, w)[::-1]
    return np.ascontiguousarray(arr)


def write_pfm(path, values):
    atomic_write(path, encode_pfm(values))


def read_pfm(path):
    return decode_pfm(_read_bytes(path), str(path))


def read_depth(path, pgm_scale=1.0):
    """Depth map from a PFM or PGM file, chosen by extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".pgm":
        return read_pgm(path, pgm_scale)
    raise ParseError(f"unsupported depth format {suffix!r}", path=str(path))


def write_png(path, img):
    from PIL import Image
    import io as _io

    img = np.asarray(img)
    arr = img if img.dtype == np.uint8 else _to_u8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    buf = _io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_image(path):
    """(H, W, 3) float image in [0, 1] from PPM or any Pillow-readable file."""
    if Path(path).suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, img):
    if Path(path).suffix.lower() == ".png":
        write_png(path, img)
    else:
        write_ppm(path, img)


# ray embeddings


def encode_rays(emb):
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 3:
        raise ShapeMismatch(f"ray map must be (H, W, C), got {emb.shape}")
    h, w, c = emb.shape
    return RAY_MAGIC + struct.pack("<III", h, w, c) + emb.astype("<f4").tobytes()


def decode_rays(data, path=None):
    r = _Reader(data, path)
    if r.take(4) != RAY_MAGIC:
        raise ParseError("bad ray-map magic", path=path)
    h, w, c = r.unpack("<III")
    arr = r.array("<f4", h * w * c).reshape(h, w, c).astype(np.float64)
    if not r.done:
        raise ParseError("trailing bytes after ray map", path=path)
    return arr


def write_rays(path, emb):
    atomic_write(path, encode_rays(emb))


def read_rays(path):
    return decode_rays(_read_bytes(path), str(path))


# checkpoints


def encode_checkpoint(tensors):
    """Named tensors: u16 name length, name, u8 rank, u32 dims, float32 data; repeated."""
    out = []
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype=np.float64)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(data, path=None):
    r = _Reader(data, path)
    tensors = {}
    while not r.done:
        (n,) = r.unpack("<H")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not UTF-8", path=path) from None
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        tensors[name] = r.array("<f4", int(np.prod(shape))).reshape(shape).astype(np.float64)
    return tensors


def write_checkpoint(path, tensors):
    atomic_write(path, encode_checkpoint(tensors))


def read_checkpoint(path):
    return decode_checkpoint(_read_bytes(path), str(path))


def format_csv(header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows):
    atomic_write(path, format_csv(header, rows))

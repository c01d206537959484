"""PFM / PGM rasters, camera and decomposition JSON."""
import json
import re
import sys

import numpy as np

from .geometry import ConvexPrimitive, Decomposition, SceneTransform
from .sampling import MAX_LABEL, Camera

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed input file."""


_TOKEN = re.compile(rb"\S+")


def _header_tokens(buf, count, start=0):
    """Read ``count`` whitespace-separated header tokens (skipping # comments).

    Returns the tokens, their byte offsets, and the offset just past the single
    whitespace byte that terminates the last token.
    """
    tokens, offsets = [], []
    pos = start
    while len(tokens) < count:
        m = _TOKEN.search(buf, pos)
        if m is None:
            raise FormatError(f"truncated header at byte {len(buf)}")
        if m.group().startswith(b"#"):
            nl = buf.find(b"\n", m.start())
            pos = len(buf) if nl < 0 else nl + 1
            continue
        tokens.append(m.group())
        offsets.append(m.start())
        pos = m.end()
    if pos >= len(buf):
        raise FormatError(f"missing raster data at byte {pos}")
    return tokens, offsets, pos + 1


def _int_token(tok, off, what):
    try:
        v = int(tok)
    except ValueError:
        raise FormatError(f"bad {what} {tok!r} at byte {off}") from None
    if v <= 0:
        raise FormatError(f"non-positive {what} {v} at byte {off}")
    return v


def read_pfm(path):
    """Read a PFM file; returns float32 (H, W) for ``Pf`` or (H, W, 3) for ``PF``,
    rows top-to-bottom."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 2:
        raise FormatError("truncated header at byte 0")
    magic = buf[:2]
    if magic == b"Pf":
        channels = 1
    elif magic == b"PF":
        channels = 3
    else:
        raise FormatError(f"bad PFM magic {magic!r} at byte 0")
    (w, h, sc), offs, data = _header_tokens(buf, 3, 2)
    width = _int_token(w, offs[0], "width")
    height = _int_token(h, offs[1], "height")
    try:
        scale = float(sc)
    except ValueError:
        raise FormatError(f"bad scale {sc!r} at byte {offs[2]}") from None
    if scale == 0:
        raise FormatError(f"zero scale at byte {offs[2]}")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    n = width * height * channels
    need = data + n * 4
    if len(buf) < need:
        raise FormatError(f"truncated raster: expected {need} bytes, file ends at byte {len(buf)}")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=data).astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(arr.reshape(shape)).copy()


def write_pfm(path, image):
    """Write (H, W) as ``Pf`` or (H, W, 3) as ``PF``; little-endian float32."""
    image = np.asarray(image)
    if image.ndim == 2:
        magic = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"cannot write shape {image.shape} as PFM")
    h, w = image.shape[:2]
    data = np.flipud(image).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + data)


def read_pgm(path, max_value=None):
    """Read a binary (P5, maxval <= 255) PGM as uint8 (H, W)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:2] != b"P5":
        raise FormatError(f"bad PGM magic {buf[:2]!r} at byte 0")
    (w, h, mv), offs, data = _header_tokens(buf, 3, 2)
    width = _int_token(w, offs[0], "width")
    height = _int_token(h, offs[1], "height")
    maxval = _int_token(mv, offs[2], "maxval")
    if maxval > 255:
        raise FormatError(f"16-bit PGM (maxval {maxval}) at byte {offs[2]} not supported")
    need = data + width * height
    if len(buf) < need:
        raise FormatError(f"truncated raster: expected {need} bytes, file ends at byte {len(buf)}")
    img = np.frombuffer(buf, dtype=np.uint8, count=width * height, offset=data)
    img = img.reshape(height, width).copy()
    if max_value is not None and img.size and img.max() > max_value:
        flat = int(np.argmax(img.reshape(-1) > max_value))
        raise FormatError(f"value {int(img.reshape(-1)[flat])} exceeds {max_value} "
                          f"at byte {data + flat}")
    return img


def write_pgm(path, image):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM needs a 2D raster")
    if image.size and (image.min() < 0 or image.max() > 255):
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode() + image.astype(np.uint8).tobytes())


def read_segmentation(path):
    """PGM label map with labels 0 (background) .. 40."""
    return read_pgm(path, max_value=MAX_LABEL)


def read_camera(path):
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"camera JSON: {e.msg} at byte {e.pos}") from None
    missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height") if k not in d]
    if missing:
        raise FormatError(f"camera JSON missing field {missing[0]!r}")
    try:
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                      int(d["width"]), int(d["height"]))
    except ValueError as e:
        raise FormatError(f"camera JSON: {e}") from None


def write_camera(path, cam):
    with open(path, "w") as f:
        json.dump({"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height}, f, indent=2)
        f.write("\n")


def decomposition_to_dict(decomp):
    return {
        "version": FORMAT_VERSION,
        "normalization": {"scale": decomp.normalization.scale.tolist(),
                          "offset": decomp.normalization.offset.tolist()},
        "sigma": decomp.sigma,
        "manhattan": decomp.manhattan.tolist(),
        "convexes": [{"translation": c.translation.tolist(), "axes": c.axes.tolist(),
                      "offsets": c.offsets.tolist(), "smoothness": c.smoothness}
                     for c in decomp.convexes],
    }


def _field(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise FormatError(f"decomposition JSON: missing field {key!r} in {where}")
    return d[key]


def decomposition_from_dict(d, renormalize_axes=False):
    """Parse the JSON document. ``renormalize_axes`` rescales imported axes to unit
    length (useful for externally predicted start points)."""
    version = _field(d, "version", "document")
    if version != FORMAT_VERSION:
        raise FormatError(f"decomposition JSON: unsupported version {version!r}")
    norm = _field(d, "normalization", "document")
    try:
        transform = SceneTransform(_field(norm, "scale", "normalization"),
                                   _field(norm, "offset", "normalization"))
        convexes = []
        for i, c in enumerate(_field(d, "convexes", "document")):
            where = f"convexes[{i}]"
            axes = np.asarray(_field(c, "axes", where), dtype=np.float64)
            if renormalize_axes and axes.shape == (3, 3):
                axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
            convexes.append(ConvexPrimitive(axes, _field(c, "offsets", where),
                                            _field(c, "translation", where),
                                            _field(c, "smoothness", where)))
        return Decomposition(convexes, _field(d, "manhattan", "document"), transform,
                             _field(d, "sigma", "document"))
    except (TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"decomposition JSON: {e}") from None


def read_decomposition(path, renormalize_axes=False):
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"decomposition JSON: {e.msg} at byte {e.pos}") from None
    return decomposition_from_dict(d, renormalize_axes)


def write_decomposition(path, decomp):
    text = json.dumps(decomposition_to_dict(decomp), indent=2)
    if path == "-":
        sys.stdout.write(text + "\n")
        return
    with open(path, "w") as f:
        f.write(text + "\n")

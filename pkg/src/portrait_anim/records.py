"""Structured-text records and portable pixmap I/O."""
import json
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError


def array_record(kind, values):
    """``{kind, shape, values}`` with row-major flattened values."""
    arr = np.asarray(values, dtype=np.float64)
    return {"kind": kind, "shape": list(arr.shape), "values": arr.ravel(order="C").tolist()}


def array_from_record(record, kind=None):
    if kind is not None and record.get("kind") != kind:
        raise ShapeMismatchError(f"expected record kind {kind!r}, got {record.get('kind')!r}")
    shape = tuple(int(s) for s in record["shape"])
    values = np.asarray(record["values"], dtype=np.float64)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatchError(f"record holds {values.size} values for shape {shape}")
    return values.reshape(shape)


def keypoints_to_record(kps):
    return array_record(kps.kind, kps.points)


def keypoints_from_record(record):
    from .motion_repr import KeypointSet
    return KeypointSet(array_from_record(record), record["kind"])


def dump_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def load_json(path):
    return json.loads(Path(path).read_text())


def to_uint8(image):
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Write an ``H x W x 3`` float image in [0, 1] (or uint8) as binary P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w = img.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path):
    """Read a binary P6 file into a float64 ``H x W x 3`` array in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0

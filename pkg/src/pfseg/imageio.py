"""8-bit RGB image I/O: binary PPM (P6) natively, PNG through Pillow."""

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an ``H x W x 3`` uint8 array as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ImageFormatError(f"write_ppm expects H x W x 3 uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def _tokens(buf: bytes, pos: int, count: int):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), pos = _tokens(buf, 2, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pos += 1
    data = buf[pos : pos + w * h * 3]
    if len(data) != w * h * 3:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    """Read a PPM or PNG file as ``H x W x 3`` uint8."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    arr, mode = read_png_raw(path)
    if mode != "RGB":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB")).copy()
    return arr


def read_png_raw(path):
    """Return ``(array, mode)`` without palette expansion."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im).copy(), im.mode
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def write_image(path, rgb: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)
    else:
        write_ppm(path, rgb)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``3 x H x W`` floats in [0, 1] -> ``H x W x 3`` uint8."""
    return np.clip(np.rint(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def to_float(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()

"""On-disk dataset layout and the netpbm / PFM / fixation-text codecs.

Layout under a dataset root::

    images/<id>.ppm      8-bit RGB (P6) or grayscale (P5)
    maps/<id>.pfm        saliency map, grayscale PFM ("Pf"), scale -1.0 (little-endian)
    fixations/<id>.txt   one "row col" pair per line
    masks/<id>.pgm       8-bit class ids (P5)

``maps`` and ``fixations`` are absent for segmentation-only datasets,
``masks`` for saliency-only ones.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Sample
from .errors import DataError, DecodeError

DEFAULT_TARGET_HW = (48, 64)


def _read_header(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise DecodeError("truncated header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def read_pnm(path) -> np.ndarray:
    """Raw 8-bit samples: [H, W] for P5, [H, W, 3] for P6."""
    buf = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), offset = _read_header(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (DecodeError, ValueError) as exc:
        raise DecodeError(f"{path}: bad netpbm header ({exc})") from None
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"{path}: unsupported netpbm type {magic!r}")
    if not 0 < maxval < 256:
        raise DecodeError(f"{path}: only 8-bit netpbm is supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    if len(buf) - offset < w * h * channels:
        raise DecodeError(f"{path}: pixel data truncated")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * channels, offset=offset)
    return data.reshape((h, w, 3) if channels == 3 else (h, w))


def write_pnm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    magic = b"P6" if pixels.ndim == 3 else b"P5"
    h, w = pixels.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes())


def write_image(path, image: np.ndarray) -> None:
    """Store a [3, H, W] image in [0, 1] as 8-bit P6."""
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    write_pnm(path, q.transpose(1, 2, 0))


def read_image(path) -> np.ndarray:
    raw = read_pnm(path).astype(np.float64) / 255.0
    if raw.ndim == 2:
        raw = np.repeat(raw[None], 3, axis=0)
    else:
        raw = raw.transpose(2, 0, 1)
    return np.ascontiguousarray(raw)


def write_pfm(path, m: np.ndarray) -> None:
    """Grayscale PFM, little-endian, rows stored bottom-to-top as the format prescribes."""
    m = np.asarray(m, dtype="<f4")
    h, w = m.shape
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode() + np.flipud(m).tobytes())


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    try:
        (magic, w, h, scale), offset = _read_header(buf, 4)
        w, h, scale = int(w), int(h), float(scale)
    except (DecodeError, ValueError) as exc:
        raise DecodeError(f"{path}: bad PFM header ({exc})") from None
    if magic != b"Pf":
        raise DecodeError(f"{path}: expected grayscale PFM 'Pf', got {magic!r}")
    dtype = "<f4" if scale < 0 else ">f4"
    if len(buf) - offset < 4 * w * h:
        raise DecodeError(f"{path}: float data truncated")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    return np.flipud(data).astype(np.float64)


def write_fixations(path, points) -> None:
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    Path(path).write_text("".join(f"{r} {c}\n" for r, c in pts))


def read_fixations(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DecodeError(f"{path}:{lineno}: expected 'row col', got {line!r}")
        try:
            rows.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise DecodeError(f"{path}:{lineno}: non-integer fixation {line!r}") from None
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def save_dataset(samples, root) -> Path:
    root = Path(root)
    for sub in ("images", "maps", "fixations", "masks"):
        needed = {
            "images": True,
            "maps": any(s.sal is not None for s in samples),
            "fixations": any(s.fixations is not None for s in samples),
            "masks": any(s.mask is not None for s in samples),
        }[sub]
        if needed:
            (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "images" / f"{s.id}.ppm", s.image)
        if s.sal is not None:
            write_pfm(root / "maps" / f"{s.id}.pfm", s.sal)
        if s.fixations is not None:
            write_fixations(root / "fixations" / f"{s.id}.txt", s.fixations)
        if s.mask is not None:
            write_pnm(root / "masks" / f"{s.id}.pgm", s.mask.astype(np.uint8))
    return root


def padded_size(hw: tuple, target_hw: tuple) -> tuple:
    """Smallest zero-padded (bottom/right) size with the target aspect ratio."""
    h, w = hw
    th, tw = target_hw
    if w * th > h * tw:  # too wide: pad height
        return max(h, math.ceil(w * th / tw)), w
    return h, max(w, math.ceil(h * tw / th))


def pad_and_resize(a: np.ndarray, target_hw: tuple) -> np.ndarray:
    """Zero-pad the trailing two axes to the target aspect ratio, then nearest-resize."""
    h, w = a.shape[-2:]
    ph, pw = padded_size((h, w), target_hw)
    pad = [(0, 0)] * (a.ndim - 2) + [(0, ph - h), (0, pw - w)]
    a = np.pad(a, pad)
    rows = np.minimum(np.arange(target_hw[0]) * ph // target_hw[0], ph - 1)
    cols = np.minimum(np.arange(target_hw[1]) * pw // target_hw[1], pw - 1)
    return a[..., rows[:, None], cols[None, :]]


def _rescale_fixations(fix: np.ndarray, hw: tuple, target_hw: tuple) -> np.ndarray:
    ph, pw = padded_size(hw, target_hw)
    out = fix.copy()
    out[:, 0] = fix[:, 0] * target_hw[0] // ph
    out[:, 1] = fix[:, 1] * target_hw[1] // pw
    return out


def _ids(directory: Path, ext: str) -> dict:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix == ext}


def load_dataset(root, target_hw: Optional[tuple] = None) -> list[Sample]:
    """Read a dataset directory; sizes are unified by pad-then-resize when needed.

    Without ``target_hw`` images keep their size if all agree, otherwise
    they are brought to ``DEFAULT_TARGET_HW``.
    """
    root = Path(root)
    images = {**_ids(root / "images", ".pgm"), **_ids(root / "images", ".ppm")}
    images = dict(sorted(images.items()))
    if not images:
        raise DataError(f"{root}: no images found under images/")
    maps = _ids(root / "maps", ".pfm")
    fixes = _ids(root / "fixations", ".txt")
    masks = _ids(root / "masks", ".pgm")
    has_maps, has_fix, has_masks = (root / "maps").is_dir(), (root / "fixations").is_dir(), (root / "masks").is_dir()

    orphans = set()
    for present, table in ((has_maps, maps), (has_fix, fixes), (has_masks, masks)):
        if present:
            orphans |= set(table) ^ set(images)
    if has_maps != has_fix:
        raise DataError(f"{root}: maps/ and fixations/ must be present together")
    if orphans:
        raise DataError(f"{root}: ids without a complete set of files: {sorted(orphans)}")

    samples = []
    for sid, path in images.items():
        image = read_image(path)
        sal = read_pfm(maps[sid]) if has_maps else None
        fix = read_fixations(fixes[sid]) if has_fix else None
        mask = read_pnm(masks[sid]).astype(np.int64) if has_masks else None
        for what, arr in (("map", sal), ("mask", mask)):
            if arr is not None and arr.shape != image.shape[1:]:
                raise DataError(f"{root}: {what} of {sid} is {arr.shape}, image is {image.shape[1:]}")
        samples.append(Sample(sid, image, sal, fix, mask))

    sizes = {s.image.shape[1:] for s in samples}
    if target_hw is None and len(sizes) > 1:
        target_hw = DEFAULT_TARGET_HW
    if target_hw is not None:
        target_hw = tuple(target_hw)
        for s in samples:
            hw = s.image.shape[1:]
            if hw == target_hw:
                continue
            s.image = pad_and_resize(s.image, target_hw)
            if s.sal is not None:
                s.sal = pad_and_resize(s.sal, target_hw)
            if s.fixations is not None:
                s.fixations = _rescale_fixations(s.fixations, hw, target_hw)
            if s.mask is not None:
                s.mask = pad_and_resize(s.mask, target_hw)
    return samples

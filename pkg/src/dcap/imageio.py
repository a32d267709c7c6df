"""Binary PGM/PPM (P5/P6, 8-bit) and split/class/image directory trees."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .episodes import SPLITS, Dataset, DatasetError

IMAGE_SUFFIXES = (".pgm", ".ppm")


class IngestionError(DatasetError):
    pass


def write_pnm(path, image: np.ndarray, comment: str | None = None) -> None:
    """Write ``(H, W)`` / ``(H, W, 1)`` as P5 or ``(H, W, 3)`` as P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("PNM writer expects uint8 pixels")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    header = magic + b"\n"
    if comment:
        header += b"".join(b"# " + line.encode("utf-8") + b"\n" for line in comment.splitlines())
    header += f"{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file as ``(H, W, C)`` uint8; comment lines in the header are skipped."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestionError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise IngestionError(f"{path}: unsupported format {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise IngestionError(f"{path}: malformed header") from None
    if maxval != 255:
        raise IngestionError(f"{path}: only 8-bit images are supported")
    c = 1 if magic == b"P5" else 3
    body = raw[pos:pos + w * h * c]
    if len(body) != w * h * c:
        raise IngestionError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()


def export_dataset(dataset: Dataset, root) -> Path:
    root = Path(root)
    for c, (name, split) in enumerate(zip(dataset.class_names, dataset.class_splits)):
        d = root / split / name
        d.mkdir(parents=True, exist_ok=True)
        for k, i in enumerate(dataset.indices(c)):
            write_pnm(d / f"{k:05d}{'.pgm' if dataset.channels == 1 else '.ppm'}", dataset.images[i])
    return root


def load_image_dir(root) -> Dataset:
    """Load ``root/<split>/<class>/<image>.pgm|ppm``; splits in canonical order, names sorted."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    unknown = [p.name for p in root.iterdir() if p.is_dir() and p.name not in SPLITS]
    if unknown:
        raise IngestionError(f"{root}: unknown split directories {sorted(unknown)}")
    images, labels, names, splits = [], [], [], []
    shape = None
    for split in SPLITS:
        sdir = root / split
        if not sdir.is_dir():
            continue
        for cdir in sorted(p for p in sdir.iterdir() if p.is_dir()):
            files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise IngestionError(f"{cdir}: class {cdir.name!r} has no images")
            cid = len(names)
            names.append(cdir.name)
            splits.append(split)
            for f in files:
                try:
                    img = read_pnm(f)
                except OSError as exc:
                    raise IngestionError(f"{f}: unreadable ({exc})") from exc
                if shape is None:
                    shape = img.shape
                elif img.shape != shape:
                    raise IngestionError(f"{f}: extent {img.shape} differs from {shape}")
                images.append(img)
                labels.append(cid)
    if not images:
        raise IngestionError(f"{root}: no images found")
    return Dataset(np.stack(images), np.array(labels), tuple(names), tuple(splits), name=root.name)

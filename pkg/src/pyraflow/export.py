"""Result persistence and slide-level statistics.

Rasters go to MetaImage (five-line ``.mhd`` text header plus a ``.raw``
payload), detections to CSV, and arbitrary tensors to a small single-file
header+payload container.  Stats reduce a heatmap to a class histogram and
one slide-level call.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .models import Detection
from .patchflow import Heatmap

MHD_TEMPLATE = (
    "ObjectType = Image\n"
    "NDims = 2\n"
    "DimSize = {w} {h}\n"
    "ElementType = MET_UCHAR\n"
    "ElementDataFile = {name}.raw\n"
)

CSV_HEADER = ["x", "y", "w", "h", "class", "score"]

TENSOR_MAGIC = b"PTNS1"
_DTYPE_CODES = {0: np.uint8, 1: np.float32, 2: np.int32, 3: np.float64}
_CODE_FOR_DTYPE = {np.dtype(d): c for c, d in _DTYPE_CODES.items()}


class ExportFormatError(ValueError):
    """File contents do not match the declared format."""


# -- MetaImage --------------------------------------------------------------


def export_metaimage(raster: np.ndarray, path: str | Path) -> None:
    """Write a 2-D uint8 raster as ``<stem>.mhd`` + ``<stem>.raw``."""
    arr = np.ascontiguousarray(raster)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("raster must be 2-D uint8")
    path = Path(path)
    if path.suffix != ".mhd":
        path = path.with_suffix(".mhd")
    header = MHD_TEMPLATE.format(w=arr.shape[1], h=arr.shape[0],
                                 name=path.stem)
    path.write_bytes(header.encode("ascii"))
    path.with_suffix(".raw").write_bytes(arr.tobytes())


def import_metaimage(path: str | Path) -> np.ndarray:
    path = Path(path)
    fields: dict[str, str] = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ExportFormatError(f"malformed header line: {line!r}")
        fields[key.strip()] = value.strip()
    if fields.get("ObjectType") != "Image":
        raise ExportFormatError("ObjectType must be Image")
    if fields.get("NDims") != "2":
        raise ExportFormatError("only 2-D images supported")
    if fields.get("ElementType") != "MET_UCHAR":
        raise ExportFormatError(
            f"unsupported ElementType {fields.get('ElementType')!r}"
        )
    try:
        w, h = (int(v) for v in fields["DimSize"].split())
    except (KeyError, ValueError) as exc:
        raise ExportFormatError("bad or missing DimSize") from exc
    data_name = fields.get("ElementDataFile")
    if not data_name:
        raise ExportFormatError("missing ElementDataFile")
    payload = (path.parent / data_name).read_bytes()
    if len(payload) != w * h:
        raise ExportFormatError(
            f"payload is {len(payload)} bytes, header declares {w * h}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# -- detections CSV ---------------------------------------------------------


def export_detections_csv(detections: list[Detection], path: str | Path) -> None:
    """Integer level-0 coordinates, class id, score with 6 decimals."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for d in detections:
            writer.writerow([int(d.x), int(d.y), int(d.w), int(d.h),
                             d.class_id, f"{d.score:.6f}"])


def import_detections_csv(path: str | Path) -> list[Detection]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ExportFormatError(f"unexpected CSV header: {header}")
        return [
            Detection(x=float(row[0]), y=float(row[1]), w=float(row[2]),
                      h=float(row[3]), class_id=int(row[4]),
                      score=float(row[5]))
            for row in reader
        ]


# -- tensor container -------------------------------------------------------
#
# magic "PTNS1" | u8 dtype code | u8 rank | rank x u64 LE dims | payload


def export_tensor(tensor: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(tensor)
    code = _CODE_FOR_DTYPE.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def import_tensor(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:5] != TENSOR_MAGIC:
        raise ExportFormatError("bad magic; not a tensor container")
    code, rank = struct.unpack_from("<BB", blob, 5)
    if code not in _DTYPE_CODES:
        raise ExportFormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", blob, 7)
    dtype = np.dtype(_DTYPE_CODES[code])
    payload = blob[7 + 8 * rank:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise ExportFormatError(
            f"payload is {len(payload)} bytes, shape needs {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


# -- heatmap persistence ----------------------------------------------------


def export_heatmap(h: Heatmap, path_stem: str | Path) -> None:
    """Two MetaImage rasters: ``<stem>_classes`` holds the argmax class per
    cell (255 = unprocessed) and ``<stem>_confidence`` its confidence as
    round(255 * value)."""
    classes, confidence = h.argmax_layer()
    stem = Path(path_stem)
    export_metaimage(classes, stem.parent / f"{stem.name}_classes.mhd")
    export_metaimage(confidence, stem.parent / f"{stem.name}_confidence.mhd")


# -- stats ------------------------------------------------------------------


def class_histogram(h: Heatmap) -> dict[int, int]:
    """Counts of the argmax class over processed cells only."""
    values, processed = h.snapshot()
    if not processed.any():
        return {}
    classes = values.argmax(axis=2)[processed]
    counts = np.bincount(classes, minlength=h.num_classes)
    return {c: int(n) for c, n in enumerate(counts) if n > 0}


class NoEligibleCellsError(ValueError):
    """Every processed cell belongs to an excluded class."""


def slide_level_call(h: Heatmap, exclude: set[int] = frozenset()) -> int:
    """Most frequent non-excluded argmax class; ties go to the lowest id."""
    histogram = class_histogram(h)
    eligible = {c: n for c, n in histogram.items() if c not in exclude}
    if not eligible:
        raise NoEligibleCellsError("no processed cells outside excluded classes")
    best = max(eligible.items(), key=lambda item: (item[1], -item[0]))
    return best[0]

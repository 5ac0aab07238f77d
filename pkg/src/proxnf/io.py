"""File formats shared across the toolkit.

Binary containers use one framing convention: an ASCII decimal header
length terminated by a newline, the JSON header itself (exactly that many
bytes), then a little-endian float64 payload.  Stacks ("stk1") and
measurements ("msr1") store their matrices in column-major order (one frame
per column, columns contiguous); field checkpoints ("nfk1") store the
flattened network parameters followed by the column-major coefficient
matrix.  Region-of-interest masks are plain JSON lists of pixel indices,
and traces are CSV with fully deterministic columns (timings live in the
run-summary JSON instead, so reruns with one seed are byte-identical).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from proxnf.crt import Measurements
from proxnf.grid import ImageStack, RoiMask, SpacetimeGrid
from proxnf.pounet import PartitionNet, POUNetField

STACK_MAGIC = "stk1"
MEASUREMENTS_MAGIC = "msr1"
FIELD_MAGIC = "nfk1"


class FileFormatError(ValueError):
    """Malformed container file; ``offset`` points at the offending bytes."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _write_framed(path, header: dict, payload: np.ndarray):
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{len(header_bytes)}\n".encode("ascii"))
        fh.write(header_bytes)
        fh.write(payload.astype("<f8", copy=False).tobytes(order="F"))


def _read_framed(path, magic: str, payload_count: int | None = None):
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FileFormatError("missing header length prefix", offset=0)
    try:
        header_len = int(raw[:newline])
    except ValueError:
        raise FileFormatError("header length prefix is not an integer", offset=0) from None
    header_start = newline + 1
    header_end = header_start + header_len
    if header_end > len(raw):
        raise FileFormatError("truncated header", offset=header_start)
    try:
        header = json.loads(raw[header_start:header_end])
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"invalid JSON header: {exc}", offset=header_start) from None
    if header.get("magic") != magic:
        raise FileFormatError(
            f"magic mismatch: expected {magic!r}, found {header.get('magic')!r}",
            offset=header_start,
        )
    payload = np.frombuffer(raw[header_end:], dtype="<f8")
    if payload_count is not None and payload.size != payload_count:
        raise FileFormatError(
            f"payload holds {payload.size} float64 values, expected {payload_count}",
            offset=header_end,
        )
    return header, payload, header_end


def write_stack(path, stack: ImageStack):
    header = {
        "magic": STACK_MAGIC,
        "M_s": stack.grid.side_pixels,
        "K": stack.grid.frames,
        "L_cm": stack.grid.fov_side,
        "T_s": stack.grid.horizon,
        "dtype": "f64le",
    }
    _write_framed(path, header, stack.coeffs)


def read_stack(path) -> ImageStack:
    header, payload, offset = _read_framed(path, STACK_MAGIC)
    grid = SpacetimeGrid(
        side_pixels=int(header["M_s"]),
        fov_side=float(header["L_cm"]),
        frames=int(header["K"]),
        horizon=float(header["T_s"]),
    )
    expected = grid.n_pixels * grid.frames
    if payload.size != expected:
        raise FileFormatError(
            f"payload holds {payload.size} values, expected {expected}", offset=offset
        )
    # C-contiguous copy so arithmetic on loaded stacks follows the same
    # BLAS paths (and bit patterns) as freshly computed ones
    coeffs = np.ascontiguousarray(payload.reshape((grid.n_pixels, grid.frames), order="F"))
    return ImageStack(grid, coeffs)


def write_measurements(path, meas: Measurements):
    header = {
        "magic": MEASUREMENTS_MAGIC,
        "K": meas.frames,
        "S": meas.n_sensors,
        "I": meas.n_radii,
        "sigma": meas.sigma,
        "rnl": meas.rnl,
        "seed": meas.seed,
        "dtype": "f64le",
    }
    _write_framed(path, header, meas.data)


def read_measurements(path) -> Measurements:
    header, payload, offset = _read_framed(path, MEASUREMENTS_MAGIC)
    k = int(header["K"])
    rows = int(header["S"]) * int(header["I"])
    if payload.size != rows * k:
        raise FileFormatError(
            f"payload holds {payload.size} values, expected {rows * k}", offset=offset
        )
    return Measurements(
        data=np.ascontiguousarray(payload.reshape((rows, k), order="F")),
        sigma=float(header["sigma"]),
        rnl=float(header["rnl"]),
        seed=header.get("seed"),
        n_sensors=int(header["S"]),
        n_radii=int(header["I"]),
    )


def write_field(path, field: POUNetField, seeds: dict | None = None):
    header = {
        "magic": FIELD_MAGIC,
        "widths": list(field.net.layer_widths()),
        "partitions": field.net.partitions,
        "M_s": field.grid.side_pixels,
        "L_cm": field.grid.fov_side,
        "K": field.grid.frames,
        "T_s": field.grid.horizon,
        "seeds": seeds or {},
        "dtype": "f64le",
    }
    payload = np.concatenate([field.net.flatten_params(), field.coeffs.ravel(order="F")])
    _write_framed(path, header, payload)


def read_field(path) -> POUNetField:
    header, payload, offset = _read_framed(path, FIELD_MAGIC)
    widths = [int(w) for w in header["widths"]]
    grid = SpacetimeGrid(
        side_pixels=int(header["M_s"]),
        fov_side=float(header["L_cm"]),
        frames=int(header["K"]),
        horizon=float(header["T_s"]),
    )
    n_eta = sum(widths[i + 1] * widths[i] + widths[i + 1] for i in range(len(widths) - 1))
    p = widths[-1]
    expected = n_eta + grid.n_pixels * p
    if payload.size != expected:
        raise FileFormatError(
            f"payload holds {payload.size} values, expected {expected}", offset=offset
        )
    template = PartitionNet(
        tuple(np.zeros((widths[i + 1], widths[i])) for i in range(len(widths) - 1)),
        tuple(np.zeros(widths[i + 1]) for i in range(len(widths) - 1)),
        grid.horizon,
    )
    net = template.with_params(payload[:n_eta])
    coeffs = np.ascontiguousarray(payload[n_eta:].reshape((grid.n_pixels, p), order="F"))
    return POUNetField(net, coeffs, grid)


def write_roi(path, roi: RoiMask):
    Path(path).write_text(json.dumps([int(p) for p in roi.member_pixels]))


def read_roi(path) -> RoiMask:
    pixels = json.loads(Path(path).read_text())
    if not isinstance(pixels, list):
        raise FileFormatError("ROI file must hold a JSON list of pixel indices")
    return RoiMask(np.asarray(pixels, dtype=np.int64))


def write_trace_csv(path, records: list[dict], columns: list[str]):
    """Deterministic CSV: floats via repr (round-trip exact), frames joined by ';'."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for rec in records:
            row = []
            for col in columns:
                val = rec.get(col)
                if isinstance(val, tuple):
                    row.append(";".join(str(v) for v in val))
                elif isinstance(val, float):
                    row.append(repr(val))
                else:
                    row.append("" if val is None else str(val))
            writer.writerow(row)


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)


def write_json(path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_frame_pgm(path, stack: ImageStack, k: int, vmin: float = 1e-4,
                    vmax: float = 0.06, log_scale: bool = True):
    """8-bit PGM export of one frame using the standard display convention
    (log-scale gray map over the induced-pressure range)."""
    img = stack.frame_image(k).T[::-1]  # y up, x right
    if log_scale:
        lo, hi = np.log10(vmin), np.log10(vmax)
        scaled = (np.log10(np.clip(img, vmin, vmax)) - lo) / (hi - lo)
    else:
        scaled = (np.clip(img, vmin, vmax) - vmin) / (vmax - vmin)
    gray = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())

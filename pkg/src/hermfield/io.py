"""Binary artifact formats and the metrics CSV.

Checkpoint container ("HNGP1"): magic, then little-endian uint32 header
fields (dim, levels, features, per-level resolutions, d+1 per-order table
sizes with 0 marking absent tables in linear mode), then each table's
float64 payload in declaration order (level-major, then order).  An "MLP"
section follows: widths, per-hidden-layer frequencies, then row-major
float64 weights/biases per layer.

Field dump ("HNGPFLD1"): dim, out_dim, grid shape, physical bounding box
(d lows then d highs), then the row-major float64 payload of
prod(shape) * out_dim values.
"""

import struct

import numpy as np

from .field import FieldModel

__all__ = [
    "CHECKPOINT_MAGIC",
    "FIELD_MAGIC",
    "save_checkpoint",
    "load_checkpoint",
    "params_from_checkpoint",
    "write_field_dump",
    "read_field_dump",
    "METRIC_COLUMNS",
    "format_metrics_csv",
    "parse_metrics_csv",
]

CHECKPOINT_MAGIC = b"HNGP1"
FIELD_MAGIC = b"HNGPFLD1"

METRIC_COLUMNS = (
    "epoch",
    "loss_pde",
    "loss_bc",
    "loss_ic",
    "lambda_bc",
    "lr",
    "active_levels",
    "rel_l2",
    "wall_ms",
)


def _u32(*vals) -> bytes:
    return struct.pack("<" + "I" * len(vals), *vals)


def save_checkpoint(path: str, model: FieldModel, params: np.ndarray) -> None:
    enc = model.encoding
    mlp = model.mlp
    enc_params, mlp_params = model.split(np.asarray(params, dtype=np.float64))
    tsizes = list(enc.table_sizes) + [0] * (enc.dim + 1 - len(enc.table_sizes))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_u32(enc.dim, enc.levels, enc.features))
        fh.write(_u32(*enc.resolutions))
        fh.write(_u32(*tsizes))
        fh.write(np.ascontiguousarray(enc_params, dtype="<f8").tobytes())
        fh.write(b"MLP")
        widths = [mlp.config.in_dim] + [s[0] for s in mlp.layer_shapes] + [
            mlp.config.out_dim
        ]
        fh.write(_u32(len(widths)))
        fh.write(_u32(*widths))
        fh.write(_u32(len(mlp.omegas)))
        fh.write(np.asarray(mlp.omegas, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(mlp_params, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint file")
    return data


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        dim, levels, features = struct.unpack("<III", _read_exact(fh, 12))
        resolutions = list(struct.unpack(f"<{levels}I", _read_exact(fh, 4 * levels)))
        tsizes = list(struct.unpack(f"<{dim + 1}I", _read_exact(fh, 4 * (dim + 1))))
        from math import comb

        active = [t for t in tsizes if t > 0]
        n_enc = levels * sum(
            t * comb(dim, k) * features for k, t in enumerate(active)
        )
        enc_params = np.frombuffer(_read_exact(fh, 8 * n_enc), dtype="<f8").copy()
        if _read_exact(fh, 3) != b"MLP":
            raise ValueError("missing MLP section")
        (n_widths,) = struct.unpack("<I", _read_exact(fh, 4))
        widths = list(struct.unpack(f"<{n_widths}I", _read_exact(fh, 4 * n_widths)))
        (n_om,) = struct.unpack("<I", _read_exact(fh, 4))
        omegas = np.frombuffer(_read_exact(fh, 8 * n_om), dtype="<f8").tolist()
        n_mlp = 0
        for a, b in zip(widths[:-1], widths[1:]):
            n_mlp += a * b + b
        mlp_params = np.frombuffer(_read_exact(fh, 8 * n_mlp), dtype="<f8").copy()
    return {
        "dim": dim,
        "levels": levels,
        "features": features,
        "resolutions": resolutions,
        "table_sizes": active,
        "enc_params": enc_params,
        "widths": widths,
        "omegas": omegas,
        "mlp_params": mlp_params,
    }


def params_from_checkpoint(model: FieldModel, ck: dict) -> np.ndarray:
    """Validate a loaded checkpoint against a model and return flat params."""
    enc = model.encoding
    if (
        ck["dim"] != enc.dim
        or ck["levels"] != enc.levels
        or ck["features"] != enc.features
        or ck["resolutions"] != enc.resolutions
        or tuple(ck["table_sizes"]) != enc.table_sizes
    ):
        raise ValueError("checkpoint encoding geometry does not match the model")
    widths = [model.mlp.config.in_dim] + [s[0] for s in model.mlp.layer_shapes] + [
        model.mlp.config.out_dim
    ]
    if ck["widths"] != widths or not np.allclose(ck["omegas"], model.mlp.omegas):
        raise ValueError("checkpoint MLP shape does not match the model")
    params = np.empty(model.n_params)
    params[model.layout.enc_slice] = ck["enc_params"]
    params[model.layout.mlp_slice] = ck["mlp_params"]
    return params


def write_field_dump(
    path: str, values: np.ndarray, shape, box_lo, box_hi
) -> None:
    """values has shape (prod(shape), m) in row-major grid order."""
    shape = tuple(int(s) for s in shape)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != int(np.prod(shape)):
        raise ValueError(f"payload shape {values.shape} does not match grid {shape}")
    dim = len(shape)
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(_u32(dim, values.shape[1]))
        fh.write(_u32(*shape))
        fh.write(np.asarray(list(box_lo) + list(box_hi), dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_field_dump(path: str):
    with open(path, "rb") as fh:
        if _read_exact(fh, len(FIELD_MAGIC)) != FIELD_MAGIC:
            raise ValueError(f"{path} is not a field dump (bad magic)")
        dim, m = struct.unpack("<II", _read_exact(fh, 8))
        shape = struct.unpack(f"<{dim}I", _read_exact(fh, 4 * dim))
        box = np.frombuffer(_read_exact(fh, 16 * dim), dtype="<f8")
        n = int(np.prod(shape)) * m
        payload = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").copy()
        extra = fh.read(1)
        if extra:
            raise ValueError("trailing bytes after field dump payload")
    return shape, (box[:dim].copy(), box[dim:].copy()), payload.reshape(-1, m)


def format_metrics_csv(rows: list[dict]) -> str:
    """Deterministic CSV text: shortest round-trip float formatting."""
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        cells = []
        for col in METRIC_COLUMNS:
            v = row[col]
            cells.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def parse_metrics_csv(text: str) -> list[dict]:
    lines = [l for l in text.strip().splitlines() if l]
    header = lines[0].split(",")
    if tuple(header) != METRIC_COLUMNS:
        raise ValueError("unexpected metrics header")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for col, cell in zip(header, cells):
            row[col] = int(cell) if col in ("epoch", "active_levels") else float(cell)
        out.append(row)
    return out

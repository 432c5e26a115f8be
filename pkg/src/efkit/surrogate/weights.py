"""Weight container: JSON manifest plus concatenated float32 payload.

File layout: 8-byte magic, 4-byte little-endian manifest length, the
manifest (UTF-8 JSON), then every tensor back to back as row-major
little-endian float32. The manifest records name/shape/offset/length per
tensor, echoes the encoder config and token layout, and carries a sha256 of
the payload. Round-trip is bit exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .tokens import TokenLayout

MAGIC = b"EFKITWT1"
FORMAT_VERSION = "efkit-weights-1"


def save_weights(path, weights: dict, cfg: EncoderConfig, layout: TokenLayout) -> None:
    names = sorted(weights)
    payload = bytearray()
    table = []
    for name in names:
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        raw = arr.tobytes()
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": len(payload),
                "length": len(raw),
            }
        )
        payload.extend(raw)
    manifest = {
        "format": FORMAT_VERSION,
        "dtype": "float32",
        "config": cfg.to_dict(),
        "layout": layout.to_dict(),
        "tensors": table,
        "checksum": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_weights(path):
    """Returns (weights: dict of float64 arrays, cfg, layout)."""
    with open(Path(path), "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a weight bundle: bad magic {magic!r}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        payload = fh.read()
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported format {manifest.get('format')!r}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["checksum"]:
        raise ValueError("payload checksum mismatch; file is corrupt")
    weights = {}
    for entry in manifest["tensors"]:
        start, length = entry["offset"], entry["length"]
        arr = np.frombuffer(payload[start : start + length], dtype="<f4")
        weights[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    cfg = EncoderConfig.from_dict(manifest["config"])
    layout = TokenLayout.from_dict(manifest["layout"])
    return weights, cfg, layout

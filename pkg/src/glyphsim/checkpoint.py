"""Checkpoint files: one-line JSON manifest + raw float32 payloads.

Layout: a single UTF-8 JSON line (terminated by ``\\n``) describing every
tensor (name, shape, dtype, byte offset into the payload region) plus
free-form metadata and a sha256 checksum, followed immediately by the
tensor payloads as little-endian float32 in manifest order.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .encoder import ACTIVATION, NORM_KIND, EncoderConfig, EncoderParams, PredictorParams

FORMAT_NAME = "glyphsim-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for version mismatches, corrupted payloads or bad tensors."""


def _payload_bytes(name: str, tensor: torch.Tensor) -> bytes:
    if tensor.dtype != torch.float32:
        raise CheckpointError(f"tensor {name!r} must be float32, got {tensor.dtype}")
    arr = tensor.detach().cpu().numpy()
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(
    path: Path | str,
    params: EncoderParams,
    predictor: Optional[PredictorParams] = None,
    metadata: Optional[dict] = None,
) -> None:
    """Serialize encoder (and optionally predictor) tensors with metadata."""
    named: list[tuple[str, torch.Tensor]] = [
        (f"encoder.{k}", v) for k, v in params.tensors.items()
    ]
    if predictor is not None:
        named += [(f"predictor.{k}", v) for k, v in predictor.tensors.items()]

    entries = []
    blobs = []
    offset = 0
    for name, tensor in named:
        blob = _payload_bytes(name, tensor)
        entries.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": "<f4",
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    payload = b"".join(blobs)
    meta = {
        "architecture": params.config.architecture,
        "embedding_dim": params.config.embedding_dim,
        "encoder_seed": params.config.seed,
        "role": params.role,
        "normalization": NORM_KIND,
        "activation": ACTIVATION,
        "tool_version": __version__,
    }
    if predictor is not None:
        meta["predictor_hidden_dim"] = predictor.hidden_dim
    meta.update(metadata or {})

    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tensors": entries,
        "metadata": meta,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_checkpoint(
    path: Path | str,
) -> tuple[EncoderParams, Optional[PredictorParams], dict]:
    """Read a checkpoint back; payload integrity is checksum-verified."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: version {header.get('version')} unsupported (want {FORMAT_VERSION})"
        )

    payload = raw[nl + 1 :]
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointError(
            f"{path}: payload truncated ({len(payload)} of {header['payload_nbytes']} bytes)"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    enc_tensors: dict[str, torch.Tensor] = {}
    pred_tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        if entry["dtype"] != "<f4":
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype="<f4").reshape(
            entry["shape"]
        )
        tensor = torch.from_numpy(arr.copy())
        name = entry["name"]
        if name.startswith("encoder."):
            enc_tensors[name[len("encoder.") :]] = tensor
        elif name.startswith("predictor."):
            pred_tensors[name[len("predictor.") :]] = tensor
        else:
            raise CheckpointError(f"{path}: unknown tensor group for {name!r}")

    meta = header["metadata"]
    cfg = EncoderConfig(
        architecture=meta["architecture"],
        embedding_dim=meta["embedding_dim"],
        seed=meta.get("encoder_seed", 0),
    )
    params = EncoderParams(tensors=enc_tensors, role=meta["role"], config=cfg)
    predictor = None
    if pred_tensors:
        predictor = PredictorParams(
            tensors=pred_tensors,
            dim=meta["embedding_dim"],
            hidden_dim=meta["predictor_hidden_dim"],
        )
    return params, predictor, meta

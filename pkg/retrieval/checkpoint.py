"""
Checkpoint container.

    SEA-CHECKPOINT
    key=value lines (format_version, fusion, k, dims, bindings, references, tensor manifest)
    END
    raw little-endian float32 tensors in manifest order
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .data import load_embedding_table, load_precomputed_store
from .encoders import EncoderResources, build_encoder
from .errors import DimensionMismatchError, FormatError, MissingIdError
from .spaces import MultiSpaceModel
from .textproc import Vocabulary

logger = logging.getLogger(__name__)

MAGIC_LINE = "SEA-CHECKPOINT"
END_LINE = "END"
FORMAT_VERSION = 1

_REFERENCE_LOADERS = {
    "bow_vocab": Vocabulary.load,
    "seq_vocab": Vocabulary.load,
    "table": load_embedding_table,
    "precomputed": load_precomputed_store,
}


def _encoder_of(sub):
    return getattr(sub.encoder, "parts", [sub.encoder])


def _architecture(model: MultiSpaceModel) -> Dict[str, str]:
    word_dim = gru_hidden = transform_dim = 0
    for sub in model.spaces:
        for enc in _encoder_of(sub):
            if hasattr(enc, "fwd"):
                word_dim, gru_hidden = enc.fwd.word_dim, enc.fwd.hidden
        transform_dim = getattr(sub.encoder, "transform_dim", None) or transform_dim
    return {
        "fusion": model.fusion,
        "k": str(model.k),
        "video_dim": str(model.video_dim),
        "dc": str(model.dc),
        "bindings": ";".join(model.bindings),
        "text_dims": ";".join(str(sub.text_proj.d_in) for sub in model.spaces),
        "word_dim": str(word_dim),
        "gru_hidden": str(gru_hidden),
        "transform_dim": str(transform_dim),
    }


def save_checkpoint(model: MultiSpaceModel, path, references: Optional[Dict[str, str]] = None) -> None:
    params = list(model.named_parameters())
    header = {"format_version": str(FORMAT_VERSION), **_architecture(model)}
    for key, value in sorted((references or {}).items()):
        header[f"ref.{key}"] = str(Path(value).resolve())
    header["tensors"] = ",".join(f"{name}:{'x'.join(str(d) for d in p.shape)}" for name, p in params)

    with open(path, "wb") as f:
        lines = [MAGIC_LINE] + [f"{k}={v}" for k, v in header.items()] + [END_LINE]
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for _, p in params:
            f.write(p.detach().cpu().numpy().astype("<f4").tobytes(order="C"))
    logger.info(f"Saved checkpoint with {len(params)} tensors to {path}")


def read_header(path) -> Dict[str, str]:
    header, _ = _split(path)
    return header


def _split(path):
    with open(path, "rb") as f:
        data = f.read()
    marker = ("\n" + END_LINE + "\n").encode("utf-8")
    end = data.find(marker)
    if not data.startswith((MAGIC_LINE + "\n").encode("utf-8")) or end < 0:
        raise FormatError(f"{path}: not a checkpoint (missing {MAGIC_LINE} header or {END_LINE} line)")
    header = {}
    for line in data[:end].decode("utf-8").split("\n")[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed header line {line!r}")
        header[key] = value
    version = header.get("format_version")
    if version != str(FORMAT_VERSION):
        raise FormatError(f"{path}: unsupported checkpoint format version {version!r}")
    return header, data[end + len(marker):]


def _manifest(header) -> List[tuple]:
    out = []
    for item in filter(None, header.get("tensors", "").split(",")):
        name, _, shape = item.rpartition(":")
        out.append((name, tuple(int(d) for d in shape.split("x")) if shape else ()))
    return out


def resources_from_header(header: Dict[str, str]) -> EncoderResources:
    resources = EncoderResources()
    for key, loader in _REFERENCE_LOADERS.items():
        ref = header.get(f"ref.{key}")
        if ref:
            if not Path(ref).exists():
                raise MissingIdError(f"Checkpoint references missing file {ref} ({key})")
            setattr(resources, key, loader(ref))
            resources.paths[key] = ref
    return resources


def load_checkpoint(path, resources: Optional[EncoderResources] = None) -> MultiSpaceModel:
    """Rebuilds the model; encoder resources come from the referenced files unless given"""
    header, payload = _split(path)
    if resources is None:
        resources = resources_from_header(header)
    fusion = header["fusion"]
    video_dim, dc = int(header["video_dim"]), int(header["dc"])
    word_dim, gru_hidden = int(header["word_dim"]) or 1, int(header["gru_hidden"]) or 1
    transform_dim = int(header["transform_dim"]) or None
    bindings = header["bindings"].split(";")

    def encoders(tags):
        return [build_encoder(t, resources, word_dim, gru_hidden) for t in tags]

    if fusion in ("concat", "transformed_concat"):
        model = MultiSpaceModel.build(encoders(bindings[0].split("+")), video_dim, dc, fusion,
                                      transform_dim or 1)
    else:
        spaces = MultiSpaceModel.build(encoders(bindings), video_dim, dc, "sea").spaces
        model = MultiSpaceModel(list(spaces), video_dim, fusion)
    if model.k != int(header["k"]):
        raise FormatError(f"{path}: header declares k={header['k']}, rebuilt {model.k} spaces")

    params = dict(model.named_parameters())
    manifest = _manifest(header)
    if [n for n, _ in manifest] != list(params):
        raise FormatError(f"{path}: tensor manifest does not match the rebuilt architecture")
    offset = 0
    with torch.no_grad():
        for name, shape in manifest:
            if tuple(params[name].shape) != shape:
                raise DimensionMismatchError(
                    f"{path}: tensor {name} has shape {shape}, model expects {tuple(params[name].shape)}")
            count = int(np.prod(shape)) if shape else 1
            if offset + 4 * count > len(payload):
                raise FormatError(f"{path}: truncated tensor data at {name}, expected "
                                  f"{offset + 4 * count} bytes, got {len(payload)}")
            values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
            params[name].copy_(torch.from_numpy(values.astype(np.float32)))
            offset += 4 * count
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} trailing bytes after the tensors")
    return model

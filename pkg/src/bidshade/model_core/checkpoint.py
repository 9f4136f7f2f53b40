"""Versioned JSON checkpoints. Tensors are base64 little-endian float32."""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from ..errors import DataError
from .deepfm import DeepFM, EmbeddingTable, NetSpec

FORMAT_VERSION = 1


def encode_tensor(a) -> dict:
    a = np.asarray(a, dtype="<f4")
    return {"shape": list(a.shape), "dtype": "float32", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_tensor(d) -> np.ndarray:
    if d.get("dtype") != "float32":
        raise DataError(f"unsupported tensor dtype {d.get('dtype')}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).astype(np.float32)


def model_to_dict(net: DeepFM, model_kind: str, hyperparams: dict) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
        "schema": net.spec.to_dict(),
        "hyperparams": hyperparams,
        "embedding": {
            "fingerprint": net.embedding.fingerprint(),
            "frozen": bool(net.embedding.frozen),
            "owned": bool(net.owns_embedding),
        },
        "tensors": {k: encode_tensor(v) for k, v in sorted(net.tensors().items())},
    }


def model_from_dict(d: dict, embedding: EmbeddingTable = None):
    """Rebuild a DeepFM. Passing ``embedding`` re-links a shared table (the
    stored copy must match its fingerprint)."""
    if d.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format_version {d.get('format_version')}")
    s = d["schema"]
    spec = NetSpec(
        name=s["name"], vocab=tuple(s["vocab"]), numeric=tuple(s["numeric"]), embed_dim=s["embed_dim"],
        hidden=tuple(s["hidden"]), out_dim=s["out_dim"], dtype="float32",
    )
    tensors = {k: decode_tensor(v) for k, v in d["tensors"].items()}
    if embedding is None:
        embedding = EmbeddingTable(spec.vocab, spec.embed_dim, weights=tensors["embedding"])
        embedding.frozen = d["embedding"]["frozen"]
        net = DeepFM(spec, embedding=embedding)
        net.owns_embedding = d["embedding"]["owned"]
    else:
        if embedding.fingerprint() != d["embedding"]["fingerprint"]:
            raise DataError("shared embedding fingerprint does not match checkpoint")
        net = DeepFM(spec, embedding=embedding)
    for k in net.params:
        net.params[k] = tensors[k]
    return net, d["model_kind"], d["hyperparams"]


def save_model(path, net: DeepFM, model_kind: str, hyperparams: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(model_to_dict(net, model_kind, hyperparams), fh, sort_keys=True)


def load_model(path, embedding: EmbeddingTable = None):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path) as fh:
        return model_from_dict(json.load(fh), embedding)

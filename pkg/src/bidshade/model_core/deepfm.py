"""DeepFM-shaped network: field embeddings plus projected numeric inputs feed
a second-order FM term and a ReLU MLP; their sum is the logit."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import SchemaError
from . import autodiff as ad


class EmbeddingTable:
    """One (vocab_f x d) matrix per categorical field, stored stacked."""

    def __init__(self, vocab, dim, rng=None, dtype="float32", weights=None):
        self.vocab = tuple(int(v) for v in vocab)
        self.dim = int(dim)
        self.offsets = np.concatenate([[0], np.cumsum(self.vocab)[:-1]]).astype(np.int64)
        if weights is None:
            lim = 1.0 / np.sqrt(dim)
            weights = rng.uniform(-lim, lim, (sum(self.vocab), self.dim)).astype(dtype)
        self.weights = weights
        self.frozen = False

    def index(self, features) -> np.ndarray:
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != len(self.vocab):
            raise SchemaError(f"expected (n, {len(self.vocab)}) categorical inputs, got {features.shape}")
        if features.size and (features.min() < 0 or np.any(features.max(axis=0) >= self.vocab)):
            bad = [i for i, v in enumerate(self.vocab) if features[:, i].min() < 0 or features[:, i].max() >= v]
            raise SchemaError(f"out-of-vocabulary category id in field column(s) {bad}")
        return features + self.offsets

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.weights).tobytes()).hexdigest()[:16]


@dataclass
class NetSpec:
    name: str
    vocab: tuple
    numeric: tuple
    embed_dim: int = 8
    hidden: tuple = (64, 32, 16)
    out_dim: int = 1
    dtype: str = "float32"

    def to_dict(self):
        d = asdict(self)
        d["vocab"], d["numeric"], d["hidden"] = list(self.vocab), list(self.numeric), list(self.hidden)
        return d


@dataclass
class ForwardCounter:
    calls: int = 0
    rows: int = 0


class DeepFM:
    def __init__(self, spec: NetSpec, embedding: EmbeddingTable = None, seed: int = 0, init_bias: float = 0.0,
                 fm_init: float = None):
        self.spec = spec
        rng = np.random.default_rng([seed, 104729])
        dt = np.dtype(spec.dtype)
        if embedding is None:
            embedding = EmbeddingTable(spec.vocab, spec.embed_dim, rng, dt)
            self.owns_embedding = True
        else:
            if embedding.vocab != tuple(spec.vocab) or embedding.dim != spec.embed_dim:
                raise SchemaError("shared embedding does not match the network schema")
            self.owns_embedding = False
        self.embedding = embedding
        n_fields, m, d = len(spec.vocab), len(spec.numeric), spec.embed_dim
        p = {}
        p["num_proj"] = (rng.uniform(-1.0, 1.0, (m, d)) / np.sqrt(d)).astype(dt)
        fan_in = (n_fields + m) * d
        for i, width in enumerate(spec.hidden):
            lim = np.sqrt(6.0 / fan_in)
            p[f"W{i}"] = rng.uniform(-lim, lim, (fan_in, width)).astype(dt)
            p[f"b{i}"] = np.zeros(width, dtype=dt)
            fan_in = width
        lim = 1.0 / np.sqrt(fan_in)
        p["W_out"] = rng.uniform(-lim, lim, (fan_in, spec.out_dim)).astype(dt)
        p["b_out"] = np.full(spec.out_dim, init_bias, dtype=dt)
        # learnable weight on the FM term; a net reading a borrowed (frozen)
        # embedding starts without it, since it cannot reshape those pairs
        if fm_init is None:
            fm_init = 1.0 if self.owns_embedding else 0.0
        p["fm_w"] = np.full(1, fm_init, dtype=dt)
        self.params = p
        self.counter = ForwardCounter()

    def zero_output(self):
        """Make the net output exactly its bias (identity start for an offset)."""
        self.params["W_out"][:] = 0
        self.params["fm_w"][:] = 0
        return self

    @property
    def name(self):
        return self.spec.name

    @property
    def embedding_trainable(self) -> bool:
        return self.owns_embedding and not self.embedding.frozen

    def trainable_params(self) -> dict:
        out = {f"{self.name}/{k}": v for k, v in self.params.items()}
        if self.embedding_trainable:
            out[f"{self.name}/embedding"] = self.embedding.weights
        return out

    def tensors(self) -> dict:
        out = dict(self.params)
        out["embedding"] = self.embedding.weights
        return out

    def forward(self, tape: ad.Tape, features, numeric, trainable: bool = True) -> ad.Node:
        """Logits for a batch: shape (n,) for single-output nets, else (n, out_dim)."""
        spec = self.spec
        idx = self.embedding.index(features)
        numeric = tape.lift(numeric)
        n = idx.shape[0]
        if numeric.shape != (n, len(spec.numeric)):
            raise SchemaError(f"{self.name}: numeric inputs must be (n, {len(spec.numeric)}), got {numeric.shape}")
        numeric = ad.cast(numeric, np.dtype(spec.dtype))
        self.counter.calls += 1
        self.counter.rows += n

        def param(k, value):
            return tape.var(value, f"{self.name}/{k}") if trainable else tape.const(value)

        if trainable and self.embedding_trainable:
            table = tape.var(self.embedding.weights, f"{self.name}/embedding")
        else:
            table = tape.const(self.embedding.weights)
        P = {k: param(k, v) for k, v in self.params.items()}
        m, d = len(spec.numeric), spec.embed_dim

        emb = ad.gather_rows(table, idx)
        dense = ad.reshape(numeric, (n, m, 1)) * ad.reshape(P["num_proj"], (1, m, d))
        fields = ad.concat([emb, dense], axis=1)
        fm = ad.fm_interaction(fields) * P["fm_w"]
        h = ad.reshape(fields, (n, -1))
        for i in range(len(spec.hidden)):
            h = ad.relu(h @ P[f"W{i}"] + P[f"b{i}"])
        out = h @ P["W_out"] + P["b_out"]
        if spec.out_dim == 1:
            return ad.reshape(out, (n,)) + fm
        return out + ad.reshape(fm, (n, 1))

    def predict_logits(self, features, numeric) -> np.ndarray:
        return self.forward(ad.Tape(), features, np.asarray(numeric), trainable=False).value

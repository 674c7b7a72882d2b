"""Energy model: station embedding, adaptive re-weighting layer, MLP head.

Forward pass::

    x  = [features | emb[bsid]]
    w  = sigmoid(arl_w2 @ relu(arl_w1 @ x + arl_b1) + arl_b2)
    x' = w * x                       (x' = x when the ARL is disabled)
    y  = scale * out(relu(fc_k(... relu(fc1(x')) ...)))

``scale`` is a fixed constant of the config (training sets it to the mean
target), not a parameter.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import nn
from .encoder import EncodingPlan, dimension

MAGIC = b"BSEMCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<BI")  # version byte, header length


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


def default_embed_rows(n_bsids: int) -> int:
    """Smallest power of two holding ``n_bsids`` stations plus the unknown row."""
    need = n_bsids + 1
    return 1 << (need - 1).bit_length()


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128, 64)
    embed_dim: int = 64
    embed_rows: int = 0  # 0 disables the station embedding
    arl_bottleneck: int = 12
    arl_enabled: bool = True
    output_scale: float = 1.0  # constant multiplier on the network output

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("dimensions must be positive")
        if self.use_embedding and self.input_dim <= self.embed_dim:
            raise ValueError("input_dim must exceed embed_dim when the embedding is used")
        if not self.output_scale > 0.0:
            raise ValueError("output_scale must be > 0")
        if self.arl_enabled and not 0 < self.arl_bottleneck < self.input_dim:
            raise ValueError(
                f"arl_bottleneck must be in (0, input_dim={self.input_dim}), got {self.arl_bottleneck}"
            )

    @property
    def use_embedding(self) -> bool:
        return self.embed_rows > 0

    @property
    def feature_dim(self) -> int:
        return self.input_dim - (self.embed_dim if self.use_embedding else 0)

    @classmethod
    def for_plan(cls, plan: EncodingPlan, *, hidden_dims=(128, 64), embed_dim: int = 64,
                 embed_rows: int | None = None, arl_bottleneck: int = 12,
                 arl_enabled: bool = True, output_scale: float = 1.0) -> "ModelConfig":
        use_emb = plan.bsid_mode == "embedding"
        if use_emb:
            rows = default_embed_rows(plan.n_bsids) if embed_rows is None else embed_rows
            if rows < plan.n_bsids + 1:
                raise ValueError(f"embed_rows={rows} cannot hold {plan.n_bsids} stations + unknown")
        else:
            rows = 0
        return cls(
            input_dim=dimension(plan) + (embed_dim if use_emb else 0),
            hidden_dims=tuple(hidden_dims),
            embed_dim=embed_dim,
            embed_rows=rows,
            arl_bottleneck=arl_bottleneck,
            arl_enabled=arl_enabled,
            output_scale=output_scale,
        )


def _mlp_names(n_hidden: int) -> list[str]:
    return [f"fc{i + 1}" for i in range(n_hidden)] + ["out"]


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of trainable scalars for ``config``."""
    total = config.embed_rows * config.embed_dim if config.use_embedding else 0
    d, k = config.input_dim, config.arl_bottleneck
    if config.arl_enabled:
        total += (k * d + k) + (d * k + d)
    widths = [d, *config.hidden_dims, 1]
    total += sum(o * i + o for i, o in zip(widths[:-1], widths[1:]))
    return total


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class EnergyModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = config
        store = nn.ParameterStore()
        if cfg.use_embedding:
            store.add("emb", rng.uniform(-0.1, 0.1, size=(cfg.embed_rows, cfg.embed_dim)))
        d = cfg.input_dim
        if cfg.arl_enabled:
            k = cfg.arl_bottleneck
            store.add("arl_w1", _glorot(rng, k, d))
            store.add("arl_b1", np.zeros(k))
            store.add("arl_w2", _glorot(rng, d, k))
            store.add("arl_b2", np.zeros(d))
        widths = [d, *cfg.hidden_dims, 1]
        for name, fan_in, fan_out in zip(_mlp_names(len(cfg.hidden_dims)), widths[:-1], widths[1:]):
            store.add(f"{name}_w", _glorot(rng, fan_out, fan_in))
            store.add(f"{name}_b", np.zeros(fan_out))
        self.params = store

    def __repr__(self) -> str:
        return f"EnergyModel({self.config}, params={self.params.num_elements()})"

    def forward(self, features: np.ndarray, bsid_idx: np.ndarray | None = None) -> tuple[np.ndarray, dict[str, Any]]:
        """Predictions ``[batch]`` and the cache :meth:`backward` needs."""
        cfg, P = self.config, self.params
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != cfg.feature_dim:
            raise ValueError(f"expected features [batch, {cfg.feature_dim}], got {features.shape}")
        cache: dict[str, Any] = {}
        if cfg.use_embedding:
            if bsid_idx is None:
                raise ValueError("model has a station embedding; bsid_idx is required")
            bsid_idx = np.asarray(bsid_idx, dtype=np.int64)
            if bsid_idx.shape != (features.shape[0],):
                raise ValueError(f"bsid_idx shape {bsid_idx.shape} does not match batch {features.shape[0]}")
            x = np.concatenate([features, nn.embedding_lookup(P["emb"].value, bsid_idx)], axis=1)
            cache["idx"] = bsid_idx
        else:
            x = features
        cache["x"] = x

        if cfg.arl_enabled:
            a1 = nn.linear(x, P["arl_w1"].value, P["arl_b1"].value)
            h = nn.relu(a1)
            w = nn.sigmoid(nn.linear(h, P["arl_w2"].value, P["arl_b2"].value))
            x = nn.hadamard(w, x)
            cache.update(arl_a1=a1, arl_h=h, arl_w=w)

        acts = [x]
        pre = []
        names = _mlp_names(len(cfg.hidden_dims))
        for name in names[:-1]:
            z = nn.linear(acts[-1], P[f"{name}_w"].value, P[f"{name}_b"].value)
            pre.append(z)
            acts.append(nn.relu(z))
        y = nn.linear(acts[-1], P["out_w"].value, P["out_b"].value)[:, 0] * cfg.output_scale
        cache.update(acts=acts, pre=pre)
        return y, cache

    def predict(self, features: np.ndarray, bsid_idx: np.ndarray | None = None,
                batch_size: int = 4096) -> np.ndarray:
        n = features.shape[0]
        out = np.empty(n)
        for s in range(0, n, batch_size):
            idx = None if bsid_idx is None else bsid_idx[s:s + batch_size]
            out[s:s + batch_size] = self.forward(features[s:s + batch_size], idx)[0]
        return out

    def attention_weights(self, features: np.ndarray, bsid_idx: np.ndarray | None = None) -> np.ndarray:
        """ARL re-weighting vectors ``[batch, input_dim]``."""
        if not self.config.arl_enabled:
            raise ValueError("model has no attention layer")
        return self.forward(features, bsid_idx)[1]["arl_w"]

    def backward(self, dy: np.ndarray, cache: dict[str, Any]) -> None:
        """Accumulate parameter gradients for upstream gradient ``dy`` ``[batch]``."""
        cfg, P = self.config, self.params
        names = _mlp_names(len(cfg.hidden_dims))
        acts, pre = cache["acts"], cache["pre"]
        g = np.asarray(dy, dtype=np.float64)[:, None] * cfg.output_scale
        for layer in range(len(names) - 1, -1, -1):
            name = names[layer]
            W = P[f"{name}_w"]
            dx, dW, db = nn.linear_backward(g, acts[layer], W.value)
            W.grad += dW
            P[f"{name}_b"].grad += db
            g = nn.relu_backward(dx, pre[layer - 1]) if layer > 0 else dx

        x = cache["x"]
        if cfg.arl_enabled:
            w = cache["arl_w"]
            dw, dx = nn.hadamard_backward(g, w, x)
            ds = nn.sigmoid_backward(dw, w)
            dh, dW2, db2 = nn.linear_backward(ds, cache["arl_h"], P["arl_w2"].value)
            P["arl_w2"].grad += dW2
            P["arl_b2"].grad += db2
            da1 = nn.relu_backward(dh, cache["arl_a1"])
            dx_arl, dW1, db1 = nn.linear_backward(da1, x, P["arl_w1"].value)
            P["arl_w1"].grad += dW1
            P["arl_b1"].grad += db1
            g = dx + dx_arl

        if cfg.use_embedding:
            emb = P["emb"]
            emb.grad += nn.embedding_backward(g[:, cfg.feature_dim:], cache["idx"], cfg.embed_rows)


# -- checkpoints -------------------------------------------------------------

def save(model: EnergyModel, path: str | Path, sidecar: dict[str, str] | None = None) -> None:
    """Write ``model`` to ``path``.

    ``sidecar`` optionally records the encoding plan file name and digest
    this checkpoint was trained with.
    """
    for p in model.params:
        if not np.all(np.isfinite(p.value)):
            raise CheckpointError(f"parameter {p.name} contains NaN/Inf")
    payload = b"".join(p.value.astype("<f8").tobytes() for p in model.params)
    header = {
        "config": asdict(model.config),
        "entries": [[p.name, list(p.shape)] for p in model.params],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "sidecar": sidecar,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)


def read_header(path: str | Path) -> dict[str, Any]:
    return _read(path)[0]


def _read(path: str | Path) -> tuple[dict[str, Any], bytes]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    if len(blob) < off + _HEADER.size:
        raise ChecksumMismatch(f"{path}: truncated header")
    version, head_len = _HEADER.unpack_from(blob, off)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off += _HEADER.size
    head = blob[off:off + head_len]
    if len(head) != head_len:
        raise ChecksumMismatch(f"{path}: truncated header")
    try:
        header = json.loads(head)
    except ValueError as exc:
        raise ChecksumMismatch(f"{path}: corrupt header") from exc
    payload = blob[off + head_len:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumMismatch(f"{path}: payload checksum mismatch")
    return header, payload


def load(path: str | Path) -> EnergyModel:
    header, payload = _read(path)
    cfg = dict(header["config"])
    cfg["hidden_dims"] = tuple(cfg["hidden_dims"])
    model = EnergyModel(ModelConfig(**cfg))
    expected = [[p.name, list(p.shape)] for p in model.params]
    if header["entries"] != expected:
        raise CheckpointError(f"{path}: parameter layout does not match its config")
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != model.params.num_elements():
        raise ChecksumMismatch(f"{path}: payload size mismatch")
    if not np.all(np.isfinite(flat)):
        raise CheckpointError(f"{path}: parameters contain NaN/Inf")
    off = 0
    for p in model.params:
        p.value[...] = flat[off:off + p.value.size].reshape(p.shape)
        off += p.value.size
    return model


def export_embeddings(model: EnergyModel, plan: EncodingPlan) -> list[tuple[str, np.ndarray]]:
    """Embedding vector of every fitted station, preceded by the ``UNKNOWN`` row."""
    if not model.config.use_embedding or "emb" not in model.params:
        raise ValueError("model has no station embedding")
    if plan.bsid_vocab is None:
        raise ValueError("plan has no station vocabulary")
    table = model.params["emb"].value
    if plan.n_bsids + 1 > table.shape[0]:
        raise ValueError("plan has more stations than the embedding table")
    rows = [("UNKNOWN", table[0].copy())]
    rows += [(bs, table[i + 1].copy()) for i, bs in enumerate(plan.bsid_vocab.values)]
    return rows


def write_embeddings_csv(rows: list[tuple[str, np.ndarray]], path: str | Path) -> None:
    dim = len(rows[0][1]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bs_id", *(f"e{i}" for i in range(dim))])
        for bs, vec in rows:
            writer.writerow([bs, *(repr(float(v)) for v in vec)])

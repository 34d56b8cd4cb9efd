"""Flat binary checkpoints for the feature extractor, head bank and domain classifier.

Byte layout (all integers little-endian unsigned 32-bit, all values
little-endian float64, matrices row-major); see ``docs/formats.md``::

    magic      8 bytes  b"DBDGCKPT"
    version    u32      1
    n_layers   u32
    dims       u32 * (n_layers + 1)
    acts       u8 * n_layers           0 = relu, 1 = identity
    per layer: weight (dims[k] x dims[k+1]) then bias (dims[k+1])
    b"HEAD"    rows u32, cols u32, n_domains u32, alpha_on_intercept u8
               w_vw, then alpha_i, delta_i for each domain
    b"DOMC"    rows u32, cols u32, phi
    b"META"    length u32, UTF-8 JSON (training config, domain ids, ...)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .heads import BiasHeadBank, DomainClassifier
from .network import DenseLayer, LayeredNet, layer_names

MAGIC = b"DBDGCKPT"
VERSION = 1
_ACT_CODES = {"relu": 0, "identity": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class CheckpointError(ValueError):
    pass


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode_net(net: LayeredNet) -> bytes:
    dims = net.dims
    parts = [MAGIC, struct.pack("<II", VERSION, len(net.layers)),
             struct.pack(f"<{len(dims)}I", *dims),
             bytes(_ACT_CODES[layer.activation] for layer in net.layers)]
    for layer in net.layers:
        parts += [_f64(layer.weight.data), _f64(layer.bias.data)]
    return b"".join(parts)


def encode_heads(bank: BiasHeadBank, dc: DomainClassifier) -> bytes:
    rows, cols = bank.w_vw.shape
    parts = [b"HEAD", struct.pack("<III", rows, cols, bank.n_domains),
             bytes([1 if bank.alpha_on_intercept else 0]), _f64(bank.w_vw.data)]
    for a, d in zip(bank.alphas, bank.deltas):
        parts += [_f64(a.data), _f64(d.data)]
    parts += [b"DOMC", struct.pack("<II", *dc.phi.shape), _f64(dc.phi.data)]
    return b"".join(parts)


def encode(net: LayeredNet, bank: BiasHeadBank, dc: DomainClassifier,
           meta: Optional[dict] = None) -> bytes:
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    return encode_net(net) + encode_heads(bank, dc) + b"META" + struct.pack("<I", len(blob)) + blob


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                                  f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int, what: str) -> tuple:
        return struct.unpack(f"<{count}I", self.take(4 * count, what))

    def matrix(self, shape: tuple, what: str) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64).reshape(shape)

    def tag(self, expected: bytes) -> None:
        at = self.pos
        got = self.take(len(expected), f"section tag {expected!r}")
        if got != expected:
            raise CheckpointError(f"expected section {expected!r} at offset {at}, found {got!r}")


def _decode_net(r: _Reader) -> LayeredNet:
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {magic!r}")
    version, n_layers = r.u32(2, "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if n_layers < 1:
        raise CheckpointError("checkpoint has no layers")
    dims = r.u32(n_layers + 1, "layer dims")
    acts = r.take(n_layers, "activation codes")
    names = layer_names(n_layers)
    layers = []
    for k in range(n_layers):
        if acts[k] not in _ACT_NAMES:
            raise CheckpointError(f"layer {k}: unknown activation code {acts[k]}")
        w = r.matrix((dims[k], dims[k + 1]), f"layer {k} weight")
        b = r.matrix((dims[k + 1],), f"layer {k} bias")
        layers.append(DenseLayer(Tensor(w, name=f"{names[k]}.weight"), Tensor(b, name=f"{names[k]}.bias"),
                                 _ACT_NAMES[acts[k]], names[k]))
    return LayeredNet(layers)


def decode(buf: bytes) -> tuple[LayeredNet, BiasHeadBank, DomainClassifier, dict]:
    r = _Reader(buf)
    net = _decode_net(r)
    r.tag(b"HEAD")
    rows, cols, n_domains = r.u32(3, "head header")
    if rows != net.embedding_dim + 1:
        raise CheckpointError(f"head rows {rows} do not match embedding dim {net.embedding_dim} + 1")
    alpha_on_intercept = r.take(1, "alpha flag")[0] == 1
    w_vw = Tensor(r.matrix((rows, cols), "w_vw"), name="w_vw")
    alphas, deltas = [], []
    for i in range(n_domains):
        alphas.append(Tensor(r.matrix((rows, cols), f"alpha{i}"), name=f"alpha{i}"))
        deltas.append(Tensor(r.matrix((rows, cols), f"delta{i}"), name=f"delta{i}"))
    bank = BiasHeadBank(w_vw, alphas, deltas, alpha_on_intercept)
    r.tag(b"DOMC")
    prow, pcol = r.u32(2, "phi header")
    dc = DomainClassifier(Tensor(r.matrix((prow, pcol), "phi"), name="phi"))
    r.tag(b"META")
    (length,) = r.u32(1, "metadata length")
    meta = json.loads(r.take(length, "metadata").decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after metadata")
    return net, bank, dc, meta


def save_model(path, model) -> Path:
    """Write a :class:`~debias_dg.trainer.TrainedModel` to ``path``."""
    meta = {"config": model.config.to_dict(), "domain_ids": list(model.domain_ids),
            "n_classes": int(model.n_classes), "step": int(model.state.step)}
    path = Path(path)
    path.write_bytes(encode(model.state.net, model.state.bank, model.state.dc, meta))
    return path


def load_model(path):
    """Read a checkpoint written by :func:`save_model` back into a ``TrainedModel``."""
    from .trainer import ModelState, TrainConfig, TrainedModel

    net, bank, dc, meta = decode(Path(path).read_bytes())
    if "config" not in meta:
        raise CheckpointError("checkpoint metadata has no training config")
    config = TrainConfig.from_dict(meta["config"])
    state = ModelState(net, bank, dc, int(meta.get("step", 0)))
    return TrainedModel(state, config, list(meta["domain_ids"]), int(meta["n_classes"]))

"""Relational graph convolution model with an MLP link predictor.

Everything here is hand-rolled on numpy: the layered message passing

    h_v' = f( sum_r sum_{u in N_r(v)} (1/c_{v,r}) W_r h_u  +  W_0 h_v )

with c_{v,r} = |N_r(v)| and f = relu (identity after the last layer), exact
reverse-mode gradients for every parameter including the jointly trained
token-embedding table, Adam, and a per-program-batch training loop. Sparse
adjacency products use scipy CSR; the dense brute-force oracle the tests
compare against lives in the test suite, independent of this module.
"""
from __future__ import annotations

import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .acfg import Acfg, FeatureConfig, NodeType
from .errors import (CorruptCheckpoint, DimensionMismatch, InvalidNode,
                     NonFiniteLoss, VersionMismatch)
from .features import GraphFeatures, Vocabulary

log = logging.getLogger(__name__)

CKPT_MAGIC = b"NMDL"
CKPT_VERSION = 1
PROB_EPS = 1e-7


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 0.001
    hidden: int = 512
    depth: int = 3
    dropout: float = 0.2
    embed_dim: int = 128
    pe_dim: int = 8
    max_insns: int = 70
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.depth < 1:
            raise DimensionMismatch("depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise DimensionMismatch("dropout must be in [0, 1)")


@dataclass
class ModelParams:
    hyper: Hyperparams
    config: FeatureConfig
    vocab: Vocabulary
    params: dict[str, np.ndarray]        # declaration order preserved
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    seed: int

    @property
    def dtype(self) -> np.dtype:
        return self.params["token_table"].dtype

    @property
    def relations(self) -> list[str]:
        return self.config.relations()

    def effective_pe_dim(self) -> int:
        return self.hyper.pe_dim if self.config.position_encoding else 0

    def raw_width(self, node_type: NodeType) -> int:
        if node_type is NodeType.CODE:
            return self.effective_pe_dim() + self.hyper.embed_dim + 2
        return self.effective_pe_dim() + 1

    def copy(self) -> "ModelParams":
        return ModelParams(self.hyper, self.config, self.vocab,
                           {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.adam_m.items()},
                           {k: v.copy() for k, v in self.adam_v.items()},
                           self.adam_t, self.seed)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: FeatureConfig, hyper: Hyperparams, vocab: Vocabulary,
                seed: int, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in declaration order."""
    hyper.validate()
    config.validate()
    rng = np.random.default_rng(seed)
    H = hyper.hidden
    params: dict[str, np.ndarray] = {}
    params["token_table"] = _glorot(rng, (len(vocab), hyper.embed_dim), dtype)
    pe = hyper.pe_dim if config.position_encoding else 0
    for nt in config.node_types():
        raw = pe + hyper.embed_dim + 2 if nt is NodeType.CODE else pe + 1
        params[f"in_proj.{nt.value}.W"] = _glorot(rng, (raw, H), dtype)
        params[f"in_proj.{nt.value}.b"] = np.zeros(H, dtype=dtype)
    for layer in range(hyper.depth):
        params[f"layer{layer}.W0"] = _glorot(rng, (H, H), dtype)
        for rel in config.relations():
            params[f"layer{layer}.{rel}"] = _glorot(rng, (H, H), dtype)
    params["pred.W1"] = _glorot(rng, (2 * H, H), dtype)
    params["pred.b1"] = np.zeros(H, dtype=dtype)
    params["pred.W2"] = _glorot(rng, (H, H), dtype)
    params["pred.b2"] = np.zeros(H, dtype=dtype)
    params["pred.W3"] = _glorot(rng, (H, 1), dtype)
    params["pred.b3"] = np.zeros(1, dtype=dtype)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelParams(hyper, config, vocab, params,
                       {k: v.copy() for k, v in zeros.items()},
                       {k: v.copy() for k, v in zeros.items()}, 0, seed)


# --- graph-side caches ----------------------------------------------------------

def _relation_adjacency(graph: Acfg, relations: list[str], dtype) -> dict[str, sp.csr_matrix]:
    """Degree-normalized adjacency per relation: row v holds 1/|N_r(v)| at column u."""
    cache = getattr(graph, "_adj_cache", None)
    key = (tuple(relations), np.dtype(dtype).name)
    if cache is not None and key in cache:
        return cache[key]
    n = graph.n_nodes
    mats: dict[str, sp.csr_matrix] = {}
    for rel in relations:
        edges = graph.relation_edges.get(rel, [])
        if not edges:
            continue
        src = np.fromiter((e[0] for e in edges), dtype=np.int64)
        dst = np.fromiter((e[1] for e in edges), dtype=np.int64)
        counts = np.bincount(dst, minlength=n).astype(np.float64)
        vals = (1.0 / counts[dst]).astype(dtype)
        mats[rel] = sp.csr_matrix((vals, (dst, src)), shape=(n, n))
    if cache is None:
        cache = {}
        graph._adj_cache = cache
    cache[key] = mats
    return mats


def _token_scatter(feats: GraphFeatures) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat (token id, code node, 1/len) triples for pooled-embedding scatter ops."""
    cached = getattr(feats, "_tok_scatter", None)
    if cached is not None:
        return cached
    toks, nodes, inv = [], [], []
    for i, seq in enumerate(feats.token_seqs):
        if not seq.tokens:
            continue
        toks.extend(seq.tokens)
        nodes.extend([i] * len(seq.tokens))
        inv.extend([1.0 / len(seq.tokens)] * len(seq.tokens))
    out = (np.asarray(toks, dtype=np.int64), np.asarray(nodes, dtype=np.int64),
           np.asarray(inv, dtype=np.float64))
    feats._tok_scatter = out
    return out


# --- forward ----------------------------------------------------------------------

@dataclass
class ForwardCache:
    x_by_type: dict[NodeType, np.ndarray]
    type_index: dict[NodeType, np.ndarray]
    h_in: list[np.ndarray]       # input to each layer
    z: list[np.ndarray]          # pre-activation of each layer
    drop_masks: list[np.ndarray | None]
    h_out: np.ndarray


def _assemble_inputs(graph: Acfg, feats: GraphFeatures, params: ModelParams):
    dtype = params.dtype
    table = params.params["token_table"]
    n_code = graph.n_code
    if len(feats.token_seqs) != n_code or feats.code_static.shape[0] != n_code:
        raise DimensionMismatch("features do not cover the graph's code nodes")
    pe = params.effective_pe_dim()
    if feats.pe_dim != pe:
        raise DimensionMismatch(f"feature pe_dim {feats.pe_dim} != model {pe}")

    if feats.external_vectors is not None:
        pooled = feats.external_vectors.astype(dtype)
    else:
        pooled = np.zeros((n_code, params.hyper.embed_dim), dtype=dtype)
        toks, nodes, inv = _token_scatter(feats)
        if toks.size:
            np.add.at(pooled, nodes, table[toks] * inv[:, None].astype(dtype))
    x_code = np.concatenate([feats.code_static[:, :pe].astype(dtype), pooled,
                             feats.code_static[:, pe:].astype(dtype)], axis=1)
    x_by_type = {NodeType.CODE: x_code}
    index = {NodeType.CODE: np.arange(n_code)}
    if NodeType.DATA in params.config.node_types():
        x_by_type[NodeType.DATA] = feats.data_static.astype(dtype)
        index[NodeType.DATA] = graph.n_code + np.arange(graph.n_data)
    if NodeType.FUNCTION in params.config.node_types():
        x_by_type[NodeType.FUNCTION] = feats.function_static.astype(dtype)
        index[NodeType.FUNCTION] = graph.n_code + graph.n_data + np.arange(graph.n_function)
    return x_by_type, index


def rgcn_forward(graph: Acfg, feats: GraphFeatures, params: ModelParams,
                 train_mode: bool = False, rng: np.random.Generator | None = None,
                 want_cache: bool = False):
    """Per-node hidden vectors after the input projection and all RGCN layers.

    Dropout (inverted scaling) is applied to hidden activations between layers
    in train_mode only; inference is deterministic.
    """
    if train_mode and params.hyper.dropout > 0 and rng is None:
        raise ValueError("train_mode with dropout requires an rng")
    dtype = params.dtype
    H = params.hyper.hidden
    x_by_type, index = _assemble_inputs(graph, feats, params)

    h = np.zeros((graph.n_nodes, H), dtype=dtype)
    for nt, x in x_by_type.items():
        w = params.params[f"in_proj.{nt.value}.W"]
        if x.shape[1] != w.shape[0]:
            raise DimensionMismatch(
                f"{nt.value} features are {x.shape[1]}-wide, projection expects {w.shape[0]}")
        h[index[nt]] = x @ w + params.params[f"in_proj.{nt.value}.b"]

    adj = _relation_adjacency(graph, params.relations, dtype)
    h_in, zs, masks = [], [], []
    depth = params.hyper.depth
    for layer in range(depth):
        h_in.append(h)
        z = h @ params.params[f"layer{layer}.W0"]
        for rel in params.relations:
            mat = adj.get(rel)
            if mat is not None:
                z += mat @ (h @ params.params[f"layer{layer}.{rel}"])
        zs.append(z)
        if layer < depth - 1:
            h = np.maximum(z, 0)
            mask = None
            if train_mode and params.hyper.dropout > 0:
                keep = 1.0 - params.hyper.dropout
                mask = (rng.random(h.shape) < keep).astype(dtype) / dtype.type(keep)
                h = h * mask
            masks.append(mask)
        else:
            h = z
            masks.append(None)

    if want_cache:
        return h, ForwardCache(x_by_type, index, h_in, zs, masks, h)
    return h


# --- link predictor ----------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _predict_scores(h: np.ndarray, pairs: np.ndarray, params: ModelParams):
    p = params.params
    u = np.concatenate([h[pairs[:, 0]], h[pairs[:, 1]]], axis=1)
    z1 = u @ p["pred.W1"] + p["pred.b1"]
    a1 = np.maximum(z1, 0)
    z2 = a1 @ p["pred.W2"] + p["pred.b2"]
    a2 = np.maximum(z2, 0)
    z3 = (a2 @ p["pred.W3"] + p["pred.b3"]).ravel()
    s = _sigmoid(z3)
    prob = np.clip(s, PROB_EPS, 1.0 - PROB_EPS)
    return prob, (u, z1, a1, z2, a2, s)


def predict_pair(h: np.ndarray, callsite_block: int, callee_entry: int,
                 params: ModelParams) -> float:
    """Probability that callee_entry is a target of the indirect call at callsite_block."""
    for node in (callsite_block, callee_entry):
        if not 0 <= node < h.shape[0]:
            raise InvalidNode(f"node {node} out of range")
    pairs = np.array([[callsite_block, callee_entry]])
    prob, _ = _predict_scores(h, pairs, params)
    return float(prob[0])


def predict_pairs(h: np.ndarray, pairs: np.ndarray, params: ModelParams) -> np.ndarray:
    if pairs.size and (pairs.min() < 0 or pairs.max() >= h.shape[0]):
        raise InvalidNode("pair node id out of range")
    return _predict_scores(h, pairs, params)[0]


def pair_loss(f_true: float, f_false: float) -> float:
    """-log f(true pair) - log(1 - f(false pair)); inputs pre-clamped to (0,1)."""
    return float(-np.log(f_true) - np.log(1.0 - f_false))


def batch_loss(probs: np.ndarray, labels: np.ndarray, normalize: bool = True) -> float:
    """Mean -log f over positives plus mean -log(1-f) over negatives.

    With normalize=False the sums are unnormalized, which makes the loss (and
    its gradients) additive under sample duplication.
    """
    pos = labels.astype(bool)
    loss = 0.0
    if pos.any():
        term = -np.log(probs[pos]).sum()
        loss += term / pos.sum() if normalize else term
    if (~pos).any():
        term = -np.log(1.0 - probs[~pos]).sum()
        loss += term / (~pos).sum() if normalize else term
    return float(loss)


# --- backward ------------------------------------------------------------------------

def _zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.params.items()}


def forward_backward(graph: Acfg, feats: GraphFeatures, params: ModelParams,
                     pairs: np.ndarray, labels: np.ndarray,
                     train_mode: bool = False, rng: np.random.Generator | None = None,
                     normalize: bool = True):
    """One combined pass: returns (loss, probs, grads-for-every-parameter)."""
    h, cache = rgcn_forward(graph, feats, params, train_mode, rng, want_cache=True)
    probs, pred_cache = _predict_scores(h, pairs, params)
    loss = batch_loss(probs, labels, normalize)

    grads = _zero_grads(params)
    p = params.params
    dtype = params.dtype
    pos = labels.astype(bool)
    dprob = np.zeros_like(probs)
    if pos.any():
        wp = 1.0 / pos.sum() if normalize else 1.0
        dprob[pos] = -wp / probs[pos]
    if (~pos).any():
        wn = 1.0 / (~pos).sum() if normalize else 1.0
        dprob[~pos] = wn / (1.0 - probs[~pos])

    u, z1, a1, z2, a2, s = pred_cache
    inside = (s >= PROB_EPS) & (s <= 1.0 - PROB_EPS)
    dz3 = (dprob * s * (1.0 - s) * inside).astype(dtype)
    grads["pred.W3"] = a2.T @ dz3[:, None]
    grads["pred.b3"] = np.array([dz3.sum()], dtype=dtype)
    da2 = dz3[:, None] @ p["pred.W3"].T
    dz2 = da2 * (z2 > 0)
    grads["pred.W2"] = a1.T @ dz2
    grads["pred.b2"] = dz2.sum(axis=0)
    da1 = dz2 @ p["pred.W2"].T
    dz1 = da1 * (z1 > 0)
    grads["pred.W1"] = u.T @ dz1
    grads["pred.b1"] = dz1.sum(axis=0)
    du = dz1 @ p["pred.W1"].T

    H = params.hyper.hidden
    dh = np.zeros_like(h)
    np.add.at(dh, pairs[:, 0], du[:, :H])
    np.add.at(dh, pairs[:, 1], du[:, H:])

    adj = _relation_adjacency(graph, params.relations, dtype)
    for layer in range(params.hyper.depth - 1, -1, -1):
        if layer < params.hyper.depth - 1:
            mask = cache.drop_masks[layer]
            if mask is not None:
                dh = dh * mask
            dz = dh * (cache.z[layer] > 0)
        else:
            dz = dh
        h_prev = cache.h_in[layer]
        grads[f"layer{layer}.W0"] = h_prev.T @ dz
        dh = dz @ p[f"layer{layer}.W0"].T
        for rel in params.relations:
            mat = adj.get(rel)
            if mat is None:
                continue
            g = mat.T @ dz
            grads[f"layer{layer}.{rel}"] = h_prev.T @ g
            dh += g @ p[f"layer{layer}.{rel}"].T

    for nt, x in cache.x_by_type.items():
        dh_t = dh[cache.type_index[nt]]
        grads[f"in_proj.{nt.value}.W"] = x.T @ dh_t
        grads[f"in_proj.{nt.value}.b"] = dh_t.sum(axis=0)
        if nt is NodeType.CODE and feats.external_vectors is None:
            dx = dh_t @ p["in_proj.code.W"].T
            pe = params.effective_pe_dim()
            dpooled = dx[:, pe:pe + params.hyper.embed_dim]
            toks, nodes, inv = _token_scatter(feats)
            if toks.size:
                np.add.at(grads["token_table"], toks,
                          dpooled[nodes] * inv[:, None].astype(dtype))
    return loss, probs, grads


def backward(graph: Acfg, feats: GraphFeatures, params: ModelParams,
             pairs: np.ndarray, labels: np.ndarray,
             normalize: bool = True) -> dict[str, np.ndarray]:
    """Eval-mode gradients of the batched loss for every parameter."""
    return forward_backward(graph, feats, params, pairs, labels,
                            train_mode=False, normalize=normalize)[2]


# --- optimizer and training loop -------------------------------------------------------

def adam_step(params: ModelParams, grads: dict[str, np.ndarray]) -> None:
    hp = params.hyper
    params.adam_t += 1
    t = params.adam_t
    for name, value in params.params.items():
        g = grads[name]
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= hp.adam_beta1
        m += (1 - hp.adam_beta1) * g
        v *= hp.adam_beta2
        v += (1 - hp.adam_beta2) * g * g
        m_hat = m / (1 - hp.adam_beta1 ** t)
        v_hat = v / (1 - hp.adam_beta2 ** t)
        value -= (hp.lr * m_hat / (np.sqrt(v_hat) + hp.adam_eps)).astype(value.dtype)


@dataclass
class ProgramBatch:
    """One program's graph plus its sampled callsite-callee pairs."""
    batch_id: str
    graph: Acfg
    feats: GraphFeatures
    pairs: np.ndarray    # (B, 2) node ids: callsite block, candidate entry block
    labels: np.ndarray   # (B,) bool


@dataclass
class EpochStats:
    mean_loss: float
    n_batches: int
    n_samples: int
    seconds: float

    @property
    def throughput(self) -> float:
        return self.n_samples / self.seconds if self.seconds > 0 else 0.0


def train_epoch(batches: Iterable[ProgramBatch], params: ModelParams,
                rng: np.random.Generator) -> EpochStats:
    """One Adam step per program batch, in the given (fixed) iteration order."""
    t0 = time.perf_counter()
    total_loss = 0.0
    n_batches = 0
    n_samples = 0
    for batch in batches:
        if batch.pairs.size == 0:
            continue
        loss, _, grads = forward_backward(batch.graph, batch.feats, params,
                                          batch.pairs, batch.labels,
                                          train_mode=True, rng=rng)
        if not np.isfinite(loss):
            raise NonFiniteLoss(batch.batch_id)
        adam_step(params, grads)
        total_loss += loss
        n_batches += 1
        n_samples += len(batch.labels)
    mean = total_loss / n_batches if n_batches else 0.0
    return EpochStats(mean, n_batches, n_samples, time.perf_counter() - t0)


# --- checkpointing -----------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    hyper = {k: getattr(params.hyper, k) for k in (
        "lr", "hidden", "depth", "dropout", "embed_dim", "pe_dim", "max_insns",
        "adam_beta1", "adam_beta2", "adam_eps")}
    config = {k: getattr(params.config, k) for k in (
        "reverse_edges", "data_nodes", "ref_data_edges", "ref_code_edges",
        "function_nodes", "call_edges", "position_encoding")}
    blobs: list[tuple[str, np.ndarray]] = []
    for prefix, table in (("pS", params.params), ("mS", params.adam_m), ("vS", params.adam_v)):
        for name, arr in table.items():
            blobs.append((f"{prefix}.{name}", arr))
    header = json.dumps({
        "hyper": hyper, "config": config, "vocab": params.vocab.id_to_token,
        "adam_t": params.adam_t, "seed": params.seed,
        "blobs": [[name, arr.dtype.name, list(arr.shape)] for name, arr in blobs],
    }, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", len(header)) + header
    for _, arr in blobs:
        body += np.ascontiguousarray(arr).tobytes()
    head = CKPT_MAGIC + struct.pack("<H", CKPT_VERSION)
    Path(path).write_bytes(head + body + struct.pack("<I", zlib.crc32(head + body)))


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint("bad magic or truncated file")
    version = struct.unpack_from("<H", raw, 4)[0]
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint v{version}, reader supports v{CKPT_VERSION}")
    if zlib.crc32(raw[:-4]) != struct.unpack_from("<I", raw, len(raw) - 4)[0]:
        raise CorruptCheckpoint("checksum mismatch")
    try:
        off = 6
        header_len, = struct.unpack_from("<I", raw, off)
        off += 4
        meta = json.loads(raw[off:off + header_len].decode("utf-8"))
        off += header_len
        tables: dict[str, dict[str, np.ndarray]] = {"pS": {}, "mS": {}, "vS": {}}
        for name, dtype_name, shape in meta["blobs"]:
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * np.dtype(dtype_name).itemsize
            arr = np.frombuffer(raw[off:off + nbytes], dtype=dtype_name).reshape(shape).copy()
            off += nbytes
            prefix, pname = name.split(".", 1)
            tables[prefix][pname] = arr
        if off != len(raw) - 4:
            raise ValueError("trailing bytes")
        hyper = Hyperparams(**meta["hyper"])
        config = FeatureConfig(**meta["config"])
        vocab = Vocabulary.__new__(Vocabulary)
        vocab.id_to_token = list(meta["vocab"])
        vocab.token_to_id = {t: i for i, t in enumerate(vocab.id_to_token)}
        return ModelParams(hyper, config, vocab, tables["pS"], tables["mS"],
                           tables["vS"], int(meta["adam_t"]), int(meta["seed"]))
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from None

"""Per-node input features: token sequences, address scalars, Laplacian PE.

Code nodes carry ``[PE | pooled instruction embedding | normalized block
address | normalized function address]``; data and function nodes carry
``[PE | normalized address]``. The pooled embedding comes either from a
jointly-trained token table (the default, pooled at model forward time so
gradients reach the table) or from precomputed per-block vectors.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .acfg import Acfg, HomoGraph, NodeType
from .cfg import BasicBlock, FunctionExtent
from .errors import EigensolveFailure, MissingExternalVector, SchemaError
from .ingest import ProgramIR
from .symbolize import DataNode, XRef

log = logging.getLogger(__name__)

XREF_TOKEN = "XREF"
UNK_TOKEN = "<unk>"
MAX_BLOCK_INSNS = 70
DEFAULT_PE_DIM = 8

#: component size above which the eigensolve switches to Lanczos iteration
DENSE_EIG_LIMIT = 512
EIG_TOL = 1e-9
EIG_MAXITER = 10_000


class Vocabulary:
    """Shared token -> id map. Id 0 is reserved for unknown tokens."""

    def __init__(self, tokens: list[str] | None = None):
        self.id_to_token: list[str] = [UNK_TOKEN]
        self.token_to_id: dict[str, int] = {UNK_TOKEN: 0}
        for tok in tokens or []:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, 0)

    @classmethod
    def fit(cls, streams: list[list[str]]) -> "Vocabulary":
        """Deterministic vocabulary: sorted unique tokens across the streams."""
        seen = sorted({tok for stream in streams for tok in stream})
        return cls(seen)


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def _bucket_token(value: int) -> str:
    """Non-xref immediates keep only their log2 magnitude."""
    return f"imm{value.bit_length()}"


def token_stream(block: BasicBlock, xref_values: dict[int, set[int]],
                 max_insns: int = MAX_BLOCK_INSNS) -> list[str]:
    """Textual token stream for one block, truncated to max_insns instructions.

    ``xref_values`` maps instruction address -> immediate values that were
    symbolized into cross-references; those immediates collapse to a single
    XREF marker (the relationship lives as a graph edge). Every other
    immediate is bucketed by magnitude.
    """
    out: list[str] = []
    for insn in block.instructions[:max_insns]:
        out.append(insn.mnemonic)
        imm_values = {f"0x{im.value:x}": im.value for im in insn.immediates}
        refs = xref_values.get(insn.address, set())
        for tok in insn.operand_tokens:
            if tok in imm_values:
                out.append(XREF_TOKEN if imm_values[tok] in refs else _bucket_token(imm_values[tok]))
            elif tok.startswith("0x"):
                out.append(_bucket_token(int(tok, 16)))  # branch-target token
            else:
                out.append(tok)
    return out


def tokenize_block(block: BasicBlock, vocab: Vocabulary,
                   xref_values: dict[int, set[int]],
                   max_insns: int = MAX_BLOCK_INSNS) -> TokenSeq:
    return TokenSeq(tuple(vocab.lookup(t) for t in token_stream(block, xref_values, max_insns)))


def xref_values_by_insn(xrefs: list[XRef]) -> dict[int, set[int]]:
    values: dict[int, set[int]] = {}
    for ref in xrefs:
        values.setdefault(ref.from_address, set()).add(ref.to_address)
    return values


# --- embedding provider --------------------------------------------------------

@dataclass
class EmbeddingProvider:
    """Pluggable source of per-block instruction embeddings.

    joint_table: rows of a trainable table, mean-pooled over the block's
    tokens (handled inside the model so the table receives gradients).
    external: precomputed vectors keyed by block address, e.g. from a real
    pretrained encoder run offline.
    """
    mode: str = "joint_table"
    dim: int = 128
    table: np.ndarray | None = None
    vectors: dict[int, np.ndarray] | None = None

    def pooled(self, seq: TokenSeq, block_address: int) -> np.ndarray:
        if self.mode == "external":
            if self.vectors is None or block_address not in self.vectors:
                raise MissingExternalVector(block_address)
            return self.vectors[block_address]
        if self.table is None:
            raise ValueError("joint_table provider has no table attached")
        if not seq.tokens:
            return np.zeros(self.table.shape[1], dtype=self.table.dtype)
        return self.table[list(seq.tokens)].mean(axis=0)


def load_external_vectors(path: str | Path, dim: int) -> dict[int, np.ndarray]:
    """JSONL {"block": hex, "vec": [f32...]} -> address-keyed vectors."""
    vectors: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            addr = int(obj["block"], 16)
            vec = np.asarray(obj["vec"], dtype=np.float32)
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise SchemaError(lineno, f"bad embedding record: {exc}") from None
        if vec.shape != (dim,):
            raise SchemaError(lineno, f"vector has {vec.shape[0]} dims, expected {dim}")
        vectors[addr] = vec
    return vectors


# --- address normalization -----------------------------------------------------

def normalize_address(address: int, ir: ProgramIR) -> float:
    return (address - ir.image_base) / (ir.image_limit - ir.image_base)


def embed_code_node(seq: TokenSeq, provider: EmbeddingProvider, block_address: int,
                    function_address: int, ir: ProgramIR) -> np.ndarray:
    """[pooled embedding | normalized block address | normalized function address]."""
    pooled = provider.pooled(seq, block_address)
    addrs = np.array([normalize_address(block_address, ir),
                      normalize_address(function_address, ir)], dtype=pooled.dtype)
    return np.concatenate([pooled, addrs])


def embed_data_node(node: DataNode, ir: ProgramIR) -> np.ndarray:
    return np.array([normalize_address(node.address, ir)], dtype=np.float32)


def embed_function_node(fn: FunctionExtent, ir: ProgramIR) -> np.ndarray:
    return np.array([normalize_address(fn.entry_address, ir)], dtype=np.float32)


# --- Laplacian positional encoding ----------------------------------------------

def laplacian_pe(hg: HomoGraph, k: int = DEFAULT_PE_DIM) -> np.ndarray:
    """Per-node k-dim positional encoding from the symmetric normalized Laplacian.

    Computed independently per connected component: eigenvectors of the k
    smallest nonzero eigenvalues, zero-padded when the component is too small,
    each eigenvector's sign fixed so its first nonzero entry is positive.
    Isolated nodes get zero rows.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = hg.n_nodes
    pe = np.zeros((n, k), dtype=np.float64)
    if n == 0 or not hg.edges:
        return pe

    rows = np.fromiter((u for u, v in hg.edges), dtype=np.int64)
    cols = np.fromiter((v for u, v in hg.edges), dtype=np.int64)
    data = np.ones(len(hg.edges), dtype=np.float64)
    adj = sp.coo_matrix((np.concatenate([data, data]),
                         (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
                        shape=(n, n)).tocsr()
    n_comp, labels = connected_components(adj, directed=False)
    for comp in range(n_comp):
        members = np.flatnonzero(labels == comp)
        if members.size < 2:
            continue
        sub = adj[np.ix_(members, members)]
        vals, vecs = _component_eigs(sub, min(k + 1, members.size), members.size)
        nonzero = vals > 1e-8
        take = min(k, int(nonzero.sum()))
        chosen = vecs[:, nonzero][:, :take]
        for j in range(take):
            col = chosen[:, j]
            nz = np.flatnonzero(np.abs(col) > 1e-12)
            if nz.size and col[nz[0]] < 0:
                col = -col
            pe[members, j] = col
    return pe


def _component_eigs(sub: sp.csr_matrix, want: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    deg = np.asarray(sub.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = sp.identity(size, format="csr") - sp.diags(inv_sqrt) @ sub @ sp.diags(inv_sqrt)
    if size <= DENSE_EIG_LIMIT:
        vals, vecs = scipy.linalg.eigh(lap.toarray())
        return vals, vecs
    try:
        vals, vecs = sp.linalg.eigsh(lap, k=min(want, size - 1), which="SA",
                                     tol=EIG_TOL, maxiter=EIG_MAXITER)
    except (sp.linalg.ArpackNoConvergence, sp.linalg.ArpackError) as exc:
        raise EigensolveFailure(f"component of {size} nodes: {exc}") from None
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


# --- per-graph feature bundle ----------------------------------------------------

@dataclass
class GraphFeatures:
    """Everything the model needs about one graph's nodes.

    ``code_static`` rows are [PE | norm block addr | norm func addr]; the
    pooled embedding slot between them is filled at forward time. For data
    and function nodes the static part is the whole feature vector.
    """
    pe_dim: int
    embed_dim: int
    code_static: np.ndarray          # (n_code, pe_dim + 2)
    data_static: np.ndarray          # (n_data, pe_dim + 1)
    function_static: np.ndarray      # (n_function, pe_dim + 1)
    token_seqs: list[TokenSeq]       # one per code node
    block_addresses: list[int]       # one per code node
    external_vectors: np.ndarray | None = None  # (n_code, embed_dim) in external mode

    @property
    def code_width(self) -> int:
        return self.pe_dim + self.embed_dim + 2

    @property
    def other_width(self) -> int:
        return self.pe_dim + 1


def build_graph_features(graph: Acfg, blocks: list[BasicBlock],
                         functions: list[FunctionExtent], data_nodes: list[DataNode],
                         xrefs: list[XRef], ir: ProgramIR, vocab: Vocabulary,
                         embed_dim: int, pe: np.ndarray | None,
                         max_insns: int = MAX_BLOCK_INSNS,
                         provider: EmbeddingProvider | None = None) -> GraphFeatures:
    """Assemble static features for every node of an ACFG.

    ``pe`` is the precomputed positional encoding over the unified node space
    (or None when position encoding is disabled, giving pe_dim 0).
    """
    pe_dim = pe.shape[1] if pe is not None else 0
    entry_of_block: dict[int, int] = {}
    for fn in functions:
        for b in fn.blocks:
            entry_of_block[b] = fn.entry_address

    def pe_row(node_id: int) -> np.ndarray:
        return pe[node_id] if pe is not None else np.empty(0)

    xv = xref_values_by_insn(xrefs)
    code_rows, seqs, addrs = [], [], []
    for b in blocks:
        fn_addr = entry_of_block.get(b.id, b.start_address)
        code_rows.append(np.concatenate([
            pe_row(graph.code_node(b.id)),
            [normalize_address(b.start_address, ir), normalize_address(fn_addr, ir)]]))
        seqs.append(tokenize_block(b, vocab, xv, max_insns))
        addrs.append(b.start_address)

    data_rows = [np.concatenate([pe_row(graph.data_node(d.id)),
                                 embed_data_node(d, ir)])
                 for d in data_nodes[:graph.n_data]]
    fn_rows = [np.concatenate([pe_row(graph.function_node(fid)),
                               embed_function_node(fn, ir)])
               for fid, fn in enumerate(functions[:graph.n_function])]

    external = None
    if provider is not None and provider.mode == "external":
        external = np.stack([provider.pooled(seq, addr).astype(np.float64)
                             for seq, addr in zip(seqs, addrs)]) if seqs else \
            np.zeros((0, embed_dim))

    def stack(rows: list[np.ndarray], width: int) -> np.ndarray:
        return np.stack(rows) if rows else np.zeros((0, width))

    return GraphFeatures(
        pe_dim=pe_dim, embed_dim=embed_dim,
        code_static=stack(code_rows, pe_dim + 2),
        data_static=stack(data_rows, pe_dim + 1),
        function_static=stack(fn_rows, pe_dim + 1),
        token_seqs=seqs, block_addresses=addrs,
        external_vectors=external,
    )

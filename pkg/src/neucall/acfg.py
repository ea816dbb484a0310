"""Heterogeneous augmented CFG assembly, homogenization, and serialization.

Edge directions for the reference relations are intentionally "inward":

    r_cd / r_dd : referenced data node  ->  referencing block / data node
    r_dc        : referenced block      ->  referencing data node
    r_cc        : referencing block     ->  targeted block

Enabling ``reverse_edges`` adds an exact transpose relation ``rev_<r>`` for
every base relation, restoring bidirectional message flow.
"""
from __future__ import annotations

import enum
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .cfg import BasicBlock, EdgeKind, FlowEdge, FunctionExtent, TerminatorKind
from .errors import ConfigViolation, CorruptGraph, InvariantViolation, VersionMismatch
from .symbolize import DataNode, XRef, XRefKind

ACFG_MAGIC = b"NACF"
ACFG_VERSION = 1

BASE_RELATIONS = ("r_t", "r_c", "r_cc", "r_cd", "r_dc", "r_dd", "r_cf")


class NodeType(str, enum.Enum):
    CODE = "code"
    DATA = "data"
    FUNCTION = "function"


#: (source type, destination type) signature per base relation
RELATION_SIGNATURES = {
    "r_t": (NodeType.CODE, NodeType.CODE),
    "r_c": (NodeType.CODE, NodeType.CODE),
    "r_cc": (NodeType.CODE, NodeType.CODE),
    "r_cd": (NodeType.DATA, NodeType.CODE),
    "r_dc": (NodeType.CODE, NodeType.DATA),
    "r_dd": (NodeType.DATA, NodeType.DATA),
    "r_cf": (NodeType.CODE, NodeType.FUNCTION),
}


def reverse_name(relation: str) -> str:
    return f"rev_{relation}"


def relation_signature(relation: str) -> tuple[NodeType, NodeType]:
    if relation.startswith("rev_"):
        src, dst = RELATION_SIGNATURES[relation[4:]]
        return dst, src
    return RELATION_SIGNATURES[relation]


@dataclass(frozen=True)
class FeatureConfig:
    """Ablation toggles controlling ACFG construction and node features."""
    reverse_edges: bool = False
    data_nodes: bool = False
    ref_data_edges: bool = False
    ref_code_edges: bool = False
    function_nodes: bool = False
    call_edges: bool = False
    position_encoding: bool = False

    def validate(self) -> None:
        if self.ref_data_edges and not self.data_nodes:
            raise ConfigViolation("ref_data_edges requires data_nodes")

    def relations(self) -> list[str]:
        """Relation names present under this configuration, reverses last."""
        rels = ["r_t"]
        if self.call_edges:
            rels.append("r_c")
        if self.ref_code_edges:
            rels.append("r_cc")
            if self.data_nodes:
                rels.append("r_dc")
        if self.ref_data_edges:
            rels.extend(["r_cd", "r_dd"])
        if self.function_nodes:
            rels.append("r_cf")
        rels = [r for r in BASE_RELATIONS if r in rels]
        if self.reverse_edges:
            rels = rels + [reverse_name(r) for r in rels]
        return rels

    def node_types(self) -> list[NodeType]:
        types = [NodeType.CODE]
        if self.data_nodes:
            types.append(NodeType.DATA)
        if self.function_nodes:
            types.append(NodeType.FUNCTION)
        return types


#: Table of the ten predefined ablation settings, keyed 1..10. Columns:
#: reverse edges, data nodes, ref-data edges, ref-code edges, function nodes,
#: call edges, position encoding.
SETTINGS: dict[int, FeatureConfig] = {
    1: FeatureConfig(),
    2: FeatureConfig(reverse_edges=True),
    3: FeatureConfig(data_nodes=True, ref_data_edges=True),
    4: FeatureConfig(data_nodes=True, ref_data_edges=True, ref_code_edges=True),
    5: FeatureConfig(ref_code_edges=True),
    6: FeatureConfig(function_nodes=True),
    7: FeatureConfig(call_edges=True),
    8: FeatureConfig(position_encoding=True),
    9: FeatureConfig(reverse_edges=True, data_nodes=True, ref_data_edges=True,
                     ref_code_edges=True, function_nodes=True, call_edges=True),
    10: FeatureConfig(reverse_edges=True, data_nodes=True, ref_data_edges=True,
                      ref_code_edges=True, function_nodes=True, call_edges=True,
                      position_encoding=True),
}


@dataclass
class Acfg:
    """The assembled heterogeneous graph.

    Node ids are a single dense space: code nodes first (one per basic block,
    in block-id order), then data nodes, then function nodes. ``node_types``
    and ``payloads`` tag each node with its kind and the id of the underlying
    block / data node / function.
    """
    config: FeatureConfig
    node_types: list[NodeType]
    payloads: list[int]
    relation_edges: dict[str, list[tuple[int, int]]]
    icall_sites: list[int]                # block ids with an indirect_call terminator
    function_entries: dict[int, int]      # function id -> entry block id
    n_code: int = 0
    n_data: int = 0
    n_function: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.node_types)

    def code_node(self, block_id: int) -> int:
        return block_id

    def data_node(self, data_id: int) -> int:
        return self.n_code + data_id

    def function_node(self, function_id: int) -> int:
        return self.n_code + self.n_data + function_id

    def validate(self) -> None:
        for rel, edges in self.relation_edges.items():
            src_t, dst_t = relation_signature(rel)
            for src, dst in edges:
                if not (0 <= src < self.n_nodes and 0 <= dst < self.n_nodes):
                    raise InvariantViolation(f"{rel} edge ({src},{dst}) out of range")
                if self.node_types[src] is not src_t or self.node_types[dst] is not dst_t:
                    raise InvariantViolation(
                        f"{rel} edge ({src},{dst}) violates signature {src_t.value}->{dst_t.value}")
        if self.config.reverse_edges:
            for rel in list(self.relation_edges):
                if rel.startswith("rev_"):
                    continue
                fwd = set(self.relation_edges[rel])
                rev = {(d, s) for s, d in self.relation_edges.get(reverse_name(rel), [])}
                if fwd != rev:
                    raise InvariantViolation(f"{rel} reverses are not an exact transpose")

    def to_debug_json(self) -> str:
        """Canonical JSON dump, used for golden tests."""
        payload = {
            "config": {k: getattr(self.config, k) for k in (
                "reverse_edges", "data_nodes", "ref_data_edges", "ref_code_edges",
                "function_nodes", "call_edges", "position_encoding")},
            "nodes": [[t.value, p] for t, p in zip(self.node_types, self.payloads)],
            "relations": {rel: sorted(edges) for rel, edges in self.relation_edges.items()},
            "icall_sites": sorted(self.icall_sites),
            "function_entries": {str(k): v for k, v in sorted(self.function_entries.items())},
        }
        return json.dumps(payload, sort_keys=True, indent=1)


def build_acfg(blocks: list[BasicBlock], flow_edges: list[FlowEdge],
               functions: list[FunctionExtent], data_nodes: list[DataNode],
               xrefs: list[XRef], config: FeatureConfig) -> Acfg:
    """Assemble the graph for one program under a feature configuration.

    Construction is fully deterministic: node order is block/data/function id
    order and every relation's edge list is sorted and deduplicated.
    """
    config.validate()

    n_code = len(blocks)
    n_data = len(data_nodes) if config.data_nodes else 0
    n_function = len(functions) if config.function_nodes else 0

    node_types = [NodeType.CODE] * n_code + [NodeType.DATA] * n_data + [NodeType.FUNCTION] * n_function
    payloads = [b.id for b in blocks] + [d.id for d in data_nodes[:n_data]] + list(range(n_function))

    def block_containing(address: int) -> int | None:
        for b in blocks:
            if b.contains(address):
                return b.id
        return None

    def data_containing(address: int) -> int | None:
        for d in data_nodes:
            if d.contains(address):
                return d.id
        return None

    rel: dict[str, set[tuple[int, int]]] = {}

    def add(relation: str, src: int, dst: int) -> None:
        rel.setdefault(relation, set()).add((src, dst))

    for e in flow_edges:
        if e.kind is EdgeKind.TRANSFER:
            add("r_t", e.src, e.dst)
        elif config.call_edges:
            add("r_c", e.src, e.dst)
    rel.setdefault("r_t", set())

    data_off = n_code
    for ref in xrefs:
        if ref.kind is XRefKind.C2C and config.ref_code_edges:
            src_b = block_containing(ref.from_address)
            dst_b = block_containing(ref.to_address)
            if src_b is not None and dst_b is not None:
                add("r_cc", src_b, dst_b)
        elif ref.kind is XRefKind.C2D and config.ref_data_edges:
            blk = block_containing(ref.from_address)
            dat = data_containing(ref.to_address)
            if blk is not None and dat is not None:
                add("r_cd", data_off + dat, blk)
        elif ref.kind is XRefKind.D2D and config.ref_data_edges:
            src_d = data_containing(ref.from_address)
            dst_d = data_containing(ref.to_address)
            if src_d is not None and dst_d is not None:
                add("r_dd", data_off + dst_d, data_off + src_d)
        elif ref.kind is XRefKind.D2C and config.ref_code_edges and config.data_nodes:
            blk = block_containing(ref.to_address)
            dat = data_containing(ref.from_address)
            if blk is not None and dat is not None:
                add("r_dc", blk, data_off + dat)

    if config.function_nodes:
        func_off = n_code + n_data
        for fid, fn in enumerate(functions):
            for block_id in fn.blocks:
                add("r_cf", block_id, func_off + fid)

    for ename in config.relations():
        if not ename.startswith("rev_"):
            rel.setdefault(ename, set())
    if config.reverse_edges:
        for base in list(rel):
            rel[reverse_name(base)] = {(d, s) for s, d in rel[base]}

    graph = Acfg(
        config=config,
        node_types=node_types,
        payloads=payloads,
        relation_edges={name: sorted(edges) for name, edges in sorted(rel.items())},
        icall_sites=sorted(b.id for b in blocks
                           if b.terminator_kind is TerminatorKind.INDIRECT_CALL),
        function_entries={fid: fn.entry_block for fid, fn in enumerate(functions)},
        n_code=n_code, n_data=n_data, n_function=n_function,
    )
    graph.validate()
    return graph


@dataclass(frozen=True)
class HomoGraph:
    """Undirected simple graph over the unified node-id space."""
    n_nodes: int
    edges: tuple[tuple[int, int], ...]  # u < v, sorted, no self-loops


def homogenize(graph: Acfg) -> HomoGraph:
    """Merge all relations, dropping direction, duplicates, and self-loops."""
    und: set[tuple[int, int]] = set()
    for edges in graph.relation_edges.values():
        for src, dst in edges:
            if src == dst:
                continue
            und.add((min(src, dst), max(src, dst)))
    return HomoGraph(graph.n_nodes, tuple(sorted(und)))


# --- binary serialization -----------------------------------------------------

def serialize_acfg(graph: Acfg, path: str | Path) -> None:
    body = bytearray()
    cfg = graph.config
    bits = sum(int(getattr(cfg, name)) << i for i, name in enumerate(
        ("reverse_edges", "data_nodes", "ref_data_edges", "ref_code_edges",
         "function_nodes", "call_edges", "position_encoding")))
    body += struct.pack("<BIII", bits, graph.n_code, graph.n_data, graph.n_function)
    body += bytes({"code": 0, "data": 1, "function": 2}[t.value] for t in graph.node_types)
    body += b"".join(struct.pack("<I", p) for p in graph.payloads)
    body += struct.pack("<I", len(graph.relation_edges))
    for name in sorted(graph.relation_edges):
        edges = graph.relation_edges[name]
        body += struct.pack("<B", len(name)) + name.encode("ascii")
        body += struct.pack("<I", len(edges))
        for src, dst in edges:
            body += struct.pack("<II", src, dst)
    body += struct.pack("<I", len(graph.icall_sites))
    body += b"".join(struct.pack("<I", b) for b in graph.icall_sites)
    body += struct.pack("<I", len(graph.function_entries))
    for fid in sorted(graph.function_entries):
        body += struct.pack("<II", fid, graph.function_entries[fid])
    head = ACFG_MAGIC + struct.pack("<H", ACFG_VERSION)
    Path(path).write_bytes(head + body + struct.pack("<I", zlib.crc32(head + body)))


def deserialize_acfg(path: str | Path) -> Acfg:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != ACFG_MAGIC:
        raise CorruptGraph("bad magic or truncated header")
    version = struct.unpack_from("<H", raw, 4)[0]
    if version != ACFG_VERSION:
        raise VersionMismatch(f"graph format v{version}, reader supports v{ACFG_VERSION}")
    if zlib.crc32(raw[:-4]) != struct.unpack_from("<I", raw, len(raw) - 4)[0]:
        raise CorruptGraph("checksum mismatch")
    try:
        return _parse_acfg_body(raw[6:-4])
    except (struct.error, IndexError, ValueError) as exc:
        raise CorruptGraph(f"malformed body: {exc}") from None


def _parse_acfg_body(body: bytes) -> Acfg:
    off = 0
    bits, n_code, n_data, n_function = struct.unpack_from("<BIII", body, off)
    off += 13
    names = ("reverse_edges", "data_nodes", "ref_data_edges", "ref_code_edges",
             "function_nodes", "call_edges", "position_encoding")
    config = FeatureConfig(**{name: bool(bits >> i & 1) for i, name in enumerate(names)})
    n_nodes = n_code + n_data + n_function
    type_map = {0: NodeType.CODE, 1: NodeType.DATA, 2: NodeType.FUNCTION}
    node_types = [type_map[b] for b in body[off:off + n_nodes]]
    off += n_nodes
    payloads = list(struct.unpack_from(f"<{n_nodes}I", body, off)) if n_nodes else []
    off += 4 * n_nodes
    n_rel, = struct.unpack_from("<I", body, off)
    off += 4
    relations: dict[str, list[tuple[int, int]]] = {}
    for _ in range(n_rel):
        name_len = body[off]
        off += 1
        name = body[off:off + name_len].decode("ascii")
        off += name_len
        n_edges, = struct.unpack_from("<I", body, off)
        off += 4
        flat = struct.unpack_from(f"<{2 * n_edges}I", body, off) if n_edges else ()
        off += 8 * n_edges
        relations[name] = [(flat[2 * i], flat[2 * i + 1]) for i in range(n_edges)]
    n_icalls, = struct.unpack_from("<I", body, off)
    off += 4
    icalls = list(struct.unpack_from(f"<{n_icalls}I", body, off)) if n_icalls else []
    off += 4 * n_icalls
    n_funcs, = struct.unpack_from("<I", body, off)
    off += 4
    entries: dict[int, int] = {}
    for _ in range(n_funcs):
        fid, entry = struct.unpack_from("<II", body, off)
        off += 8
        entries[fid] = entry
    if off != len(body):
        raise CorruptGraph("trailing bytes")
    graph = Acfg(config, node_types, payloads, relations, icalls, entries,
                 n_code, n_data, n_function)
    graph.validate()
    return graph

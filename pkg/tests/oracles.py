"""Independent reference implementations the production code is checked against.

Everything here is deliberately naive: dense matrices, explicit loops,
threshold sweeps. None of it shares code with the library paths under test.
"""
from __future__ import annotations

import numpy as np

from neucall.acfg import Acfg, NodeType
from neucall.ingest import ProgramIR, SectionKind
from neucall.model import ModelParams


def dense_rgcn_forward(graph: Acfg, x_by_type: dict, type_index: dict,
                       params: ModelParams) -> np.ndarray:
    """Brute-force layered forward: explicit per-relation dense adjacency,
    naive triple loops, float64 throughout."""
    n = graph.n_nodes
    hidden = params.hyper.hidden
    h = np.zeros((n, hidden), dtype=np.float64)
    for nt, x in x_by_type.items():
        w = params.params[f"in_proj.{nt.value}.W"].astype(np.float64)
        b = params.params[f"in_proj.{nt.value}.b"].astype(np.float64)
        for row, node in enumerate(type_index[nt]):
            h[node] = x[row].astype(np.float64) @ w + b

    adj = {}
    for rel in params.relations:
        a = np.zeros((n, n), dtype=np.float64)
        for src, dst in graph.relation_edges.get(rel, []):
            a[dst, src] = 1.0
        adj[rel] = a

    depth = params.hyper.depth
    for layer in range(depth):
        w0 = params.params[f"layer{layer}.W0"].astype(np.float64)
        z = np.zeros_like(h)
        for v in range(n):
            z[v] = w0.T @ h[v]
            for rel in params.relations:
                a = adj[rel]
                wr = params.params[f"layer{layer}.{rel}"].astype(np.float64)
                c = a[v].sum()
                if c == 0:
                    continue
                agg = np.zeros(hidden)
                for u in range(n):
                    if a[v, u]:
                        agg += wr.T @ h[u]
                z[v] += agg / c
        h = np.maximum(z, 0.0) if layer < depth - 1 else z
    return h


def dense_predict(h: np.ndarray, i: int, t: int, params: ModelParams) -> float:
    """Independent recomputation of the 3-layer link predictor."""
    p = {k: v.astype(np.float64) for k, v in params.params.items()}
    x = np.concatenate([h[i], h[t]]).astype(np.float64)
    a1 = np.maximum(x @ p["pred.W1"] + p["pred.b1"], 0)
    a2 = np.maximum(a1 @ p["pred.W2"] + p["pred.b2"], 0)
    z = float(a2 @ p["pred.W3"] + p["pred.b3"])
    s = 1.0 / (1.0 + np.exp(-z))
    return min(max(s, 1e-7), 1.0 - 1e-7)


def brute_xref_scan(ir: ProgramIR) -> set[tuple[int, int, str]]:
    """Membership rule applied exhaustively, independent of scan_xrefs."""

    def section_kind(addr: int):
        for sec in ir.sections:
            if sec.virtual_address <= addr < sec.virtual_address + sec.size:
                return sec.kind
        return None

    def classify(src_kind, dst_kind) -> str:
        a = "c" if src_kind is SectionKind.CODE else "d"
        b = "c" if dst_kind is SectionKind.CODE else "d"
        return f"{a}2{b}"

    refs: set[tuple[int, int, str]] = set()
    for insn in ir.instructions:
        for imm in insn.immediates:
            if imm.width < 4:
                continue
            dst = section_kind(imm.value)
            if dst is None or dst is SectionKind.OTHER:
                continue
            refs.add((insn.address, imm.value, classify(SectionKind.CODE, dst)))
    for sec in ir.sections:
        if sec.kind not in (SectionKind.DATA, SectionKind.READONLY_DATA) or sec.data is None:
            continue
        addr = sec.virtual_address
        while addr % 8:
            addr += 1
        while addr + 8 <= sec.virtual_address + sec.size:
            off = addr - sec.virtual_address
            value = int.from_bytes(sec.data[off:off + 8], "little")
            dst = section_kind(value)
            if dst is not None and dst is not SectionKind.OTHER:
                refs.add((addr, value, classify(sec.kind, dst)))
            addr += 8
    return refs


def trapezoid_auroc(scored: list[tuple[float, bool]]) -> float:
    """Area under the ROC curve from an explicit threshold sweep."""
    probs = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([bool(l) for _, l in scored])
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    points = [(0.0, 0.0)]
    for t in sorted(set(probs), reverse=True):
        pred = probs >= t
        tpr = float(np.sum(pred & labels)) / n_pos
        fpr = float(np.sum(pred & ~labels)) / n_neg
        points.append((fpr, tpr))
    points.append((1.0, 1.0))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def finite_difference_grads(loss_fn, params: ModelParams, step: float = 1e-3
                            ) -> dict[str, np.ndarray]:
    """Central differences of loss_fn() w.r.t. every parameter entry."""
    grads: dict[str, np.ndarray] = {}
    for name, arr in params.params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            up = loss_fn()
            flat[idx] = original - step
            down = loss_fn()
            flat[idx] = original
            gflat[idx] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads

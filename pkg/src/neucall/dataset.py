"""Ground-truth labels, project-level splitting, balanced pair sampling."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cfg import BasicBlock, FunctionExtent, TerminatorKind
from .errors import SchemaError, TooFewProjects, UnresolvedAddress

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "validation", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class LabelSet:
    """Per-binary ground truth: icall instruction address -> true callee entries."""
    project_id: str
    build_tag: str
    pairs: dict[int, frozenset[int]]


@dataclass(frozen=True)
class PairSample:
    callsite_block: int
    candidate_block: int
    label: bool


@dataclass
class SplitAssignment:
    assignment: dict[str, str]           # project_id -> split name
    fractions: dict[str, float] = field(default_factory=dict)

    def split_of(self, project_id: str) -> str:
        return self.assignment[project_id]


def load_labels(path: str | Path) -> LabelSet:
    """JSON {"project","build_tag","pairs":[{"icall":hex,"targets":[hex,...]}]}."""
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.lineno, f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict) or "pairs" not in obj:
        raise SchemaError(0, "label file must be an object with a 'pairs' list")
    pairs: dict[int, frozenset[int]] = {}
    for i, rec in enumerate(obj["pairs"]):
        try:
            icall = int(rec["icall"], 16)
            targets = frozenset(int(t, 16) for t in rec["targets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(i, f"bad pair record: {exc}") from None
        pairs[icall] = pairs.get(icall, frozenset()) | targets
    return LabelSet(str(obj.get("project", "")), str(obj.get("build_tag", "")), pairs)


def save_labels(labels: LabelSet, path: str | Path) -> None:
    payload = {
        "project": labels.project_id,
        "build_tag": labels.build_tag,
        "pairs": [{"icall": f"0x{ic:x}", "targets": [f"0x{t:x}" for t in sorted(tg)]}
                  for ic, tg in sorted(labels.pairs.items())],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


@dataclass
class ValidationReport:
    unresolved_icalls: list[int]
    unresolved_targets: list[int]
    resolved: dict[int, tuple[int, frozenset[int]]]  # icall addr -> (block id, entry block ids)

    @property
    def clean(self) -> bool:
        return not self.unresolved_icalls and not self.unresolved_targets


def validate_labels(labels: LabelSet, blocks: list[BasicBlock],
                    functions: list[FunctionExtent], strict: bool = False) -> ValidationReport:
    """Resolve label addresses against recovered blocks and function entries.

    An icall address must be the terminator of an indirect_call block; a
    target must be a recovered entry address. Unresolvable addresses are
    reported (and fatal in strict mode); resolvable pairs are retained.
    """
    icall_block_by_addr = {b.terminator.address: b.id for b in blocks
                           if b.terminator_kind is TerminatorKind.INDIRECT_CALL}
    entry_by_addr = {fn.entry_address: fn.entry_block for fn in functions}

    report = ValidationReport([], [], {})
    for icall_addr, targets in sorted(labels.pairs.items()):
        block_id = icall_block_by_addr.get(icall_addr)
        if block_id is None:
            report.unresolved_icalls.append(icall_addr)
            continue
        good, bad = set(), []
        for t in sorted(targets):
            if t in entry_by_addr:
                good.add(entry_by_addr[t])
            else:
                bad.append(t)
        report.unresolved_targets.extend(bad)
        if good:
            report.resolved[icall_addr] = (block_id, frozenset(good))
    if strict and not report.clean:
        first = (report.unresolved_icalls + report.unresolved_targets)[0]
        raise UnresolvedAddress(f"0x{first:x} does not resolve against the recovered program")
    return report


def sample_balanced_resolved(labels: LabelSet, icall_block_by_addr: dict[int, int],
                             entry_block_by_addr: dict[int, int],
                             rng: np.random.Generator) -> list[PairSample]:
    """Balanced sampling against pre-resolved address maps (see sample_balanced)."""
    entry_blocks = sorted(set(entry_block_by_addr.values()))
    samples: list[PairSample] = []
    for icall_addr in sorted(labels.pairs):
        block_id = icall_block_by_addr.get(icall_addr)
        true_entries = {entry_block_by_addr[t] for t in labels.pairs[icall_addr]
                        if t in entry_block_by_addr}
        if block_id is None or not true_entries:
            log.warning("icall 0x%x has no resolvable targets; skipped", icall_addr)
            continue
        eligible = [e for e in entry_blocks if e not in true_entries]
        n_neg = min(len(true_entries), len(eligible))
        if n_neg < len(true_entries):
            log.warning("icall 0x%x: only %d eligible negatives for %d positives",
                        icall_addr, n_neg, len(true_entries))
        for entry in sorted(true_entries):
            samples.append(PairSample(block_id, entry, True))
        if n_neg:
            chosen = rng.choice(len(eligible), size=n_neg, replace=False)
            for idx in sorted(chosen):
                samples.append(PairSample(block_id, eligible[idx], False))
    return samples


def sample_balanced(labels: LabelSet, blocks: list[BasicBlock],
                    functions: list[FunctionExtent],
                    rng: np.random.Generator) -> list[PairSample]:
    """Positives plus an equal number of negatives per icallsite.

    For a site with p true targets, negatives are drawn uniformly without
    replacement from recovered function entries outside the true-target set;
    when fewer than p are eligible the negative side is truncated (warned).
    Sites with zero resolvable targets are skipped with a warning. Call this
    fresh each epoch for resampled negatives.
    """
    icall_block_by_addr = {b.terminator.address: b.id for b in blocks
                           if b.terminator_kind is TerminatorKind.INDIRECT_CALL}
    entry_block_by_addr = {fn.entry_address: fn.entry_block for fn in functions}
    return sample_balanced_resolved(labels, icall_block_by_addr, entry_block_by_addr, rng)


def split_projects(projects: list[tuple[str, int]],
                   ratios: tuple[float, float, float] = DEFAULT_RATIOS,
                   seed: int = 0) -> SplitAssignment:
    """Assign whole projects to train/validation/test by pair-count fractions.

    Projects are shuffled with the seeded rng, then each goes to the split
    whose cumulative pair-count fraction is furthest below its target.
    Deterministic given the seed.
    """
    if len(projects) < 3:
        raise TooFewProjects(f"need >= 3 projects, got {len(projects)}")
    total = sum(max(count, 0) for _, count in projects)
    total = max(total, 1)
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(projects)))

    assigned: dict[str, str] = {}
    counts = dict.fromkeys(SPLIT_NAMES, 0)
    for idx in order:
        project_id, pair_count = projects[idx]
        best = max(range(len(SPLIT_NAMES)),
                   key=lambda i: (ratios[i] - counts[SPLIT_NAMES[i]] / total, ratios[i], -i))
        assigned[project_id] = SPLIT_NAMES[best]
        counts[SPLIT_NAMES[best]] += max(pair_count, 0)

    fractions = {name: counts[name] / total for name in SPLIT_NAMES}
    for name, target in zip(SPLIT_NAMES, ratios):
        if abs(fractions[name] - target) > 0.05:
            log.warning("split %s holds %.1f%% of pairs (target %.1f%%); corpus is skewed",
                        name, 100 * fractions[name], 100 * target)
    return SplitAssignment(assigned, fractions)


def save_split(split: SplitAssignment, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.assignment, sort_keys=True, indent=1) + "\n")


def load_split(path: str | Path) -> SplitAssignment:
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise SchemaError(0, "split manifest must be an object")
    for project, name in obj.items():
        if name not in SPLIT_NAMES:
            raise SchemaError(0, f"unknown split {name!r} for project {project!r}")
    return SplitAssignment(dict(obj))

"""Data model for labeled scene graphs, input graphs and dataset records.

A scene graph carries a label-score matrix O (n x d) for nodes and a
directed edge-score array R (n x n x d') whose diagonal is identically
zero (no self edges).  Predicate index 0 is the explicit no-relation
class.  The image graph carries one feature vector per node; its
connectivity is implicit: fully connected, directed, no self loops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LabelSpace:
    object_classes: tuple
    predicate_classes: tuple  # index 0 is the no-relation class

    def __post_init__(self):
        object.__setattr__(self, "object_classes", tuple(self.object_classes))
        object.__setattr__(self, "predicate_classes", tuple(self.predicate_classes))
        if len(self.object_classes) < 2 or len(self.predicate_classes) < 2:
            raise ValueError("need at least two object and two predicate classes")
        if len(set(self.object_classes)) != len(self.object_classes):
            raise ValueError("duplicate object class names")
        if len(set(self.predicate_classes)) != len(self.predicate_classes):
            raise ValueError("duplicate predicate class names")

    @property
    def num_object_classes(self) -> int:
        return len(self.object_classes)

    @property
    def num_predicate_classes(self) -> int:
        return len(self.predicate_classes)

    def to_json(self) -> dict:
        return {
            "object_classes": list(self.object_classes),
            "predicate_classes": list(self.predicate_classes),
        }

    @staticmethod
    def from_json(obj: dict) -> "LabelSpace":
        return LabelSpace(tuple(obj["object_classes"]), tuple(obj["predicate_classes"]))


@dataclass
class SceneGraphState:
    """Node scores O (n x d) and directed edge scores R (n x n x d')."""

    O: ad.Tensor
    R: ad.Tensor

    def __post_init__(self):
        o, r = self.O.value, self.R.value
        if o.ndim != 2 or r.ndim != 3:
            raise ValueError(f"state ranks O{o.shape} R{r.shape}")
        n = o.shape[0]
        if r.shape[0] != n or r.shape[1] != n:
            raise ValueError(f"node count mismatch O{o.shape} R{r.shape}")

    @property
    def n(self) -> int:
        return self.O.value.shape[0]

    def check_zero_diagonal(self, atol: float = 0.0):
        diag = self.R.value[np.arange(self.n), np.arange(self.n), :]
        if not np.all(np.abs(diag) <= atol):
            raise ValueError("self-edge rows of R must be zero")


@dataclass
class ImageGraph:
    node_features: ad.Tensor  # (n, f)

    def __post_init__(self):
        if self.node_features.value.ndim != 2:
            raise ValueError("node_features must be 2-D")

    @property
    def n(self) -> int:
        return self.node_features.value.shape[0]

    @property
    def f(self) -> int:
        return self.node_features.value.shape[1]


@dataclass
class SceneRecord:
    image_graph: ImageGraph
    node_labels: np.ndarray  # (n,) int
    edge_labels: np.ndarray  # (n, n) int, diagonal 0
    scene_type: int
    seed: int

    def __post_init__(self):
        self.node_labels = np.asarray(self.node_labels, dtype=np.int64)
        self.edge_labels = np.asarray(self.edge_labels, dtype=np.int64)
        n = self.image_graph.n
        if self.node_labels.shape != (n,) or self.edge_labels.shape != (n, n):
            raise ValueError("label shapes do not match node count")
        if np.any(np.diag(self.edge_labels) != 0):
            raise ValueError("self edges must carry the no-relation label")

    @property
    def n(self) -> int:
        return self.image_graph.n

    def triplets(self) -> list:
        """Ground-truth (subject node, object node, predicate) with p != 0."""
        out = []
        n = self.n
        for i in range(n):
            for j in range(n):
                p = int(self.edge_labels[i, j])
                if i != j and p != 0:
                    out.append((i, j, p))
        return out

    def class_triplet(self, i: int, j: int, p: int) -> tuple:
        return (int(self.node_labels[i]), p, int(self.node_labels[j]))


# ---------------------------------------------------------------------------
# constraint rules (shared by the generator, the validator and the metrics)


@dataclass(frozen=True)
class MutualExclusionRule:
    """Per subject node, at most one distinct predicate from the set."""

    predicates: frozenset

    def __post_init__(self):
        object.__setattr__(self, "predicates", frozenset(int(p) for p in self.predicates))
        if len(self.predicates) < 2:
            raise ValueError("exclusion set needs at least two predicates")


@dataclass(frozen=True)
class TypeConstraintRule:
    """Edges with this predicate need subject/object classes from the sets."""

    predicate: int
    subject_classes: frozenset
    object_classes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "predicate", int(self.predicate))
        object.__setattr__(self, "subject_classes",
                           frozenset(int(c) for c in self.subject_classes))
        object.__setattr__(self, "object_classes",
                           frozenset(int(c) for c in self.object_classes))


def rule_to_json(rule) -> dict:
    if isinstance(rule, MutualExclusionRule):
        return {"kind": "mutual_exclusion", "predicates": sorted(rule.predicates)}
    if isinstance(rule, TypeConstraintRule):
        return {
            "kind": "type_constraint",
            "predicate": rule.predicate,
            "subject_classes": sorted(rule.subject_classes),
            "object_classes": sorted(rule.object_classes),
        }
    raise ValueError(f"unknown rule type {type(rule).__name__}")


def rule_from_json(obj: dict):
    kind = obj["kind"]
    if kind == "mutual_exclusion":
        return MutualExclusionRule(frozenset(obj["predicates"]))
    if kind == "type_constraint":
        return TypeConstraintRule(obj["predicate"], frozenset(obj["subject_classes"]),
                                  frozenset(obj["object_classes"]))
    raise ValueError(f"unknown rule kind {kind!r}")


def rule_violations(node_labels, edge_labels, rules) -> list:
    """Human-readable violations of the constraint rules in one scene."""
    node_labels = np.asarray(node_labels)
    edge_labels = np.asarray(edge_labels)
    n = node_labels.shape[0]
    out = []
    for rule in rules:
        if isinstance(rule, MutualExclusionRule):
            for i in range(n):
                used = {int(edge_labels[i, j]) for j in range(n) if j != i}
                hits = sorted(used & rule.predicates)
                if len(hits) >= 2:
                    out.append(f"subject {i} uses exclusive predicates {hits}")
        elif isinstance(rule, TypeConstraintRule):
            for i in range(n):
                for j in range(n):
                    if i == j or int(edge_labels[i, j]) != rule.predicate:
                        continue
                    if int(node_labels[i]) not in rule.subject_classes:
                        out.append(f"edge {i}->{j}: subject class "
                                   f"{int(node_labels[i])} invalid for predicate {rule.predicate}")
                    if int(node_labels[j]) not in rule.object_classes:
                        out.append(f"edge {i}->{j}: object class "
                                   f"{int(node_labels[j])} invalid for predicate {rule.predicate}")
        else:
            raise ValueError(f"unknown rule type {type(rule).__name__}")
    return out


# ---------------------------------------------------------------------------
# state construction and inspection


def one_hot(record: SceneRecord, space: LabelSpace) -> SceneGraphState:
    """Ground-truth state: one-hot O and R, zero diagonal."""
    d = space.num_object_classes
    dp = space.num_predicate_classes
    n = record.n
    if np.any(record.node_labels < 0) or np.any(record.node_labels >= d):
        raise IndexError("node label out of range")
    if np.any(record.edge_labels < 0) or np.any(record.edge_labels >= dp):
        raise IndexError("edge predicate out of range")
    o = np.zeros((n, d))
    o[np.arange(n), record.node_labels] = 1.0
    r = np.zeros((n, n, dp))
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    r[ii, jj, record.edge_labels] = 1.0
    r[np.arange(n), np.arange(n), :] = 0.0
    return SceneGraphState(ad.constant(o), ad.constant(r))


def decode(sg: SceneGraphState) -> tuple:
    """Argmax labels: (node_labels (n,), edge_labels (n, n) with 0 diagonal)."""
    node_labels = np.argmax(sg.O.value, axis=1).astype(np.int64)
    edge_labels = np.argmax(sg.R.value, axis=2).astype(np.int64)
    np.fill_diagonal(edge_labels, 0)
    return node_labels, edge_labels


def permute_nodes(sg: SceneGraphState, ig: ImageGraph, perm) -> tuple:
    """Relabel nodes of both graphs consistently: new index k = old perm[k]."""
    perm = np.asarray(perm, dtype=np.int64)
    n = sg.n
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {perm}")
    o = sg.O.value[perm, :]
    r = sg.R.value[np.ix_(perm, perm)]
    feats = ig.node_features.value[perm, :]
    return (SceneGraphState(ad.constant(o), ad.constant(r)),
            ImageGraph(ad.constant(feats)))


def validate(record: SceneRecord, space: LabelSpace, rules=()) -> list:
    """All violations in a record: index ranges, shapes, diagonal, rules."""
    out = []
    d = space.num_object_classes
    dp = space.num_predicate_classes
    if np.any(record.node_labels < 0) or np.any(record.node_labels >= d):
        out.append(f"node label out of range [0, {d})")
    if np.any(record.edge_labels < 0) or np.any(record.edge_labels >= dp):
        out.append(f"edge predicate out of range [0, {dp})")
    if np.any(np.diag(record.edge_labels) != 0):
        out.append("nonzero self-edge predicate")
    if not out:
        out.extend(rule_violations(record.node_labels, record.edge_labels, rules))
    return out


# ---------------------------------------------------------------------------
# dataset files: JSON lines, one record per line, plus a sidecar header


def record_to_json(record: SceneRecord) -> dict:
    edges = [[i, j, int(record.edge_labels[i, j])]
             for i in range(record.n) for j in range(record.n)
             if i != j and record.edge_labels[i, j] != 0]
    return {
        "n": record.n,
        "node_features": record.image_graph.node_features.value.tolist(),
        "node_labels": record.node_labels.tolist(),
        "edges": edges,
        "scene_type": int(record.scene_type),
        "seed": int(record.seed),
    }


def record_from_json(obj: dict) -> SceneRecord:
    n = int(obj["n"])
    feats = np.asarray(obj["node_features"], dtype=np.float64)
    edge_labels = np.zeros((n, n), dtype=np.int64)
    for s, o, p in obj["edges"]:
        if s == o:
            raise ValueError("self edge in dataset record")
        edge_labels[int(s), int(o)] = int(p)
    return SceneRecord(ImageGraph(ad.constant(feats)),
                       np.asarray(obj["node_labels"], dtype=np.int64),
                       edge_labels, int(obj["scene_type"]), int(obj["seed"]))


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(_dumps(record_to_json(record)))
            fh.write("\n")


def read_records(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_json(json.loads(line)))
    return out


def write_header(path, space: LabelSpace, config: dict, rules, census: dict) -> None:
    """Sidecar header: label space, generator config, rules, triplet census."""
    payload = {
        "format_version": DATASET_FORMAT_VERSION,
        "label_space": space.to_json(),
        "config": config,
        "rules": [rule_to_json(r) for r in rules],
        "census": {",".join(map(str, k)): v for k, v in sorted(census.items())},
    }
    with open(path, "w") as fh:
        fh.write(_dumps(payload))
        fh.write("\n")


def read_header(path) -> dict:
    with open(path) as fh:
        payload = json.loads(fh.read())
    if payload.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {payload.get('format_version')}")
    payload["label_space"] = LabelSpace.from_json(payload["label_space"])
    payload["rules"] = [rule_from_json(r) for r in payload["rules"]]
    payload["census"] = {tuple(int(x) for x in k.split(",")): v
                         for k, v in payload["census"].items()}
    return payload

"""Synthetic structured-scene generator.

Scenes are drawn from a generative law the evaluation rules can check
exhaustively: node classes come from a scene-type-conditioned
distribution, relation labels from a type-conditioned predicate palette
filtered by hard constraint rules (rejection sampling), and node
features are the class embedding plus scene-type offset plus Gaussian
noise.  Palettes are calibrated so the predicate marginal over scene
types stays Zipf; within a scene the type couples every edge to the
same palette, so a factorized per-edge predictor is structurally
mis-specified while a joint scorer is not.  The noise dial sigma
controls how ambiguous the features are.

A held-out list of class-level triplets is rejected in the train split
and guaranteed to occur in the test split, which makes zero-shot recall
measurable by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .graphs import (ImageGraph, LabelSpace, MutualExclusionRule, SceneRecord,
                     TypeConstraintRule, rule_from_json, rule_to_json,
                     rule_violations, read_records, write_header,
                     write_records)

# seed-stream ids: 0..2 are the splits, the rest are reserved
SPLITS = ("train", "val", "test")
_TABLE_STREAM = 3
_TRIAL_STREAM = 4

EMBEDDING_SCALE = 2.0  # class-mean separation; sigma is measured against this
OFFSET_SCALE = 2.5     # scene-type offset separation, relative to unit noise
PALETTE_BOOST = 6.0    # how strongly a scene type prefers its own predicates
REJECTION_BUDGET = 500
SATISFIABILITY_TRIALS = 100


class GenerationError(RuntimeError):
    """Sampling could not produce a valid scene (config unsatisfiable)."""


def zipf_weights(s: float, k: int) -> np.ndarray:
    """Zipf(s) probabilities over ranks 1..k; rank 1 is the no-relation label."""
    if k < 1:
        raise ValueError("need at least one rank")
    w = np.arange(1, k + 1, dtype=np.float64) ** (-float(s))
    return w / w.sum()


def palette_table(zipf: np.ndarray, num_types: int,
                  boost: float = PALETTE_BOOST) -> np.ndarray:
    """P(predicate | scene type) with the Zipf marginal preserved.

    Each type prefers the real predicates assigned to it round-robin;
    Sinkhorn balancing then fixes row sums to 1 and the uniform-type
    column means to the Zipf weights, so conditioning is informative
    while the marginal stays exactly the proposal the config names.
    The no-relation mass is identical across types by construction.
    """
    d_prime = zipf.shape[0]
    real = zipf[1:] / zipf[1:].sum()
    table = np.ones((num_types, d_prime - 1))
    for p in range(d_prime - 1):
        table[p % num_types, p] = boost
    table *= real
    for _ in range(500):
        table *= real / table.mean(axis=0)
        table /= table.sum(axis=1, keepdims=True)
    return np.concatenate([np.full((num_types, 1), zipf[0]),
                           (1.0 - zipf[0]) * table], axis=1)


def default_rules() -> tuple:
    """Two exclusion pairs plus type constraints on the three rarest predicates.

    Each type rule constrains one end and leaves the other open (9 of 10
    classes allowed), calibrated so rejection shifts the realized predicate
    marginals at most ~2.5% total variation from the Zipf proposal.
    """
    return (
        MutualExclusionRule(frozenset({2, 4})),
        MutualExclusionRule(frozenset({3, 6})),
        TypeConstraintRule(4, frozenset(range(0, 9)), frozenset(range(0, 10))),
        TypeConstraintRule(5, frozenset(range(0, 10)), frozenset(range(0, 9))),
        TypeConstraintRule(6, frozenset(range(1, 10)), frozenset(range(0, 10))),
    )


def default_holdout_triplets() -> tuple:
    """(subject class, predicate, object class) excluded from train."""
    return ((0, 1, 7), (2, 2, 5), (8, 3, 1), (3, 4, 6))


@dataclass(frozen=True)
class SplitCounts:
    train: int = 2000
    val: int = 300
    test: int = 500

    def __post_init__(self):
        for split in SPLITS:
            if int(getattr(self, split)) <= 0:
                raise ValueError(f"{split} count must be positive")

    def to_json(self) -> dict:
        return {split: int(getattr(self, split)) for split in SPLITS}

    @staticmethod
    def from_json(obj: dict) -> "SplitCounts":
        return SplitCounts(**{split: int(obj[split]) for split in SPLITS})


@dataclass(frozen=True)
class GeneratorConfig:
    d: int = 10                    # object classes
    d_prime: int = 7               # predicate classes incl. no-relation 0
    f: int = 16                    # node feature width
    n_range: tuple = (3, 6)        # nodes per scene, inclusive
    zipf_s: float = 1.5
    feature_noise_sigma: float = 0.75
    rules: tuple = field(default_factory=default_rules)
    num_scene_types: int = 4
    holdout_triplets: tuple = field(default_factory=default_holdout_triplets)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_range", tuple(int(n) for n in self.n_range))
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "holdout_triplets",
                           tuple(tuple(int(x) for x in t) for t in self.holdout_triplets))
        if self.d < 2 or self.d_prime < 2:
            raise ValueError("need at least two object and two predicate classes")
        if self.f < 1:
            raise ValueError("feature width must be positive")
        lo, hi = self.n_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad node range {self.n_range}")
        if self.zipf_s <= 0 or not np.isfinite(self.zipf_s):
            raise ValueError("zipf exponent must be positive")
        if self.feature_noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.num_scene_types < 1:
            raise ValueError("need at least one scene type")
        for rule in self.rules:
            self._check_rule(rule)
        if self.holdout_triplets and lo < 2:
            raise ValueError("holdout triplets need scenes with at least two nodes")
        if len(set(self.holdout_triplets)) != len(self.holdout_triplets):
            raise ValueError("duplicate holdout triplet")
        for triplet in self.holdout_triplets:
            self._check_holdout(triplet)

    def _check_rule(self, rule):
        if isinstance(rule, MutualExclusionRule):
            bad = [p for p in rule.predicates if not 0 <= p < self.d_prime]
        elif isinstance(rule, TypeConstraintRule):
            bad = [] if 0 <= rule.predicate < self.d_prime else [rule.predicate]
            bad += [c for c in rule.subject_classes | rule.object_classes
                    if not 0 <= c < self.d]
        else:
            raise ValueError(f"unknown rule type {type(rule).__name__}")
        if bad:
            raise ValueError(f"rule {_rule_name(rule)} uses out-of-range indices {bad}")

    def _check_holdout(self, triplet):
        cs, p, co = triplet
        if not (0 <= cs < self.d and 0 <= co < self.d):
            raise ValueError(f"holdout {triplet} has out-of-range classes")
        if not 1 <= p < self.d_prime:
            raise ValueError(f"holdout {triplet} needs a real predicate")
        # must stay generable at test time: no type rule may forbid it
        for rule in self.rules:
            if isinstance(rule, TypeConstraintRule) and rule.predicate == p:
                if cs not in rule.subject_classes or co not in rule.object_classes:
                    raise ValueError(
                        f"holdout {triplet} is blocked by {_rule_name(rule)}")

    def to_json(self) -> dict:
        return {
            "d": self.d, "d_prime": self.d_prime, "f": self.f,
            "n_range": list(self.n_range),
            "zipf_s": self.zipf_s,
            "feature_noise_sigma": self.feature_noise_sigma,
            "rules": [rule_to_json(r) for r in self.rules],
            "num_scene_types": self.num_scene_types,
            "holdout_triplets": [list(t) for t in self.holdout_triplets],
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "GeneratorConfig":
        fields = dict(obj)
        fields["n_range"] = tuple(fields["n_range"])
        fields["rules"] = tuple(rule_from_json(r) for r in fields["rules"])
        fields["holdout_triplets"] = tuple(tuple(t) for t in fields["holdout_triplets"])
        return GeneratorConfig(**fields)


def label_space_for(cfg: GeneratorConfig) -> LabelSpace:
    return LabelSpace(
        tuple(f"obj{c:02d}" for c in range(cfg.d)),
        ("none",) + tuple(f"rel{p:02d}" for p in range(1, cfg.d_prime)))


def _rule_name(rule) -> str:
    if isinstance(rule, MutualExclusionRule):
        return f"mutual_exclusion({sorted(rule.predicates)})"
    return f"type_constraint(predicate={rule.predicate})"


# ---------------------------------------------------------------------------
# derived tables (deterministic in the config seed)


@lru_cache(maxsize=8)
def _tables(cfg: GeneratorConfig):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed,
                                                       spawn_key=(_TABLE_STREAM,)))
    if cfg.d <= cfg.f:
        q, _ = np.linalg.qr(rng.standard_normal((cfg.f, cfg.d)))
        emb = q.T * EMBEDDING_SCALE
    else:
        emb = rng.standard_normal((cfg.d, cfg.f))
        emb *= EMBEDDING_SCALE / np.linalg.norm(emb, axis=1, keepdims=True)
    offsets = rng.standard_normal((cfg.num_scene_types, cfg.f)) \
        * (OFFSET_SCALE / np.sqrt(cfg.f))
    class_probs = np.ones((cfg.num_scene_types, cfg.d))
    for t in range(cfg.num_scene_types):
        preferred = rng.choice(cfg.d, size=max(1, cfg.d // 2), replace=False)
        class_probs[t, preferred] = 2.0
    class_probs /= class_probs.sum(axis=1, keepdims=True)
    exclusion = [r for r in cfg.rules if isinstance(r, MutualExclusionRule)]
    type_rules = {}
    for r in cfg.rules:
        if isinstance(r, TypeConstraintRule):
            type_rules.setdefault(r.predicate, []).append(r)
    zipf = zipf_weights(cfg.zipf_s, cfg.d_prime)
    return {
        "emb": emb,
        "offsets": offsets,
        "class_probs": class_probs,
        "zipf": zipf,
        "palette": palette_table(zipf, cfg.num_scene_types),
        "exclusion": exclusion,
        "type_rules": type_rules,
        "holdouts": frozenset(cfg.holdout_triplets),
    }


def class_embeddings(cfg: GeneratorConfig) -> np.ndarray:
    return _tables(cfg)["emb"]


def type_offsets(cfg: GeneratorConfig) -> np.ndarray:
    return _tables(cfg)["offsets"]


def type_class_probs(cfg: GeneratorConfig) -> np.ndarray:
    return _tables(cfg)["class_probs"]


def type_palettes(cfg: GeneratorConfig) -> np.ndarray:
    return _tables(cfg)["palette"]


# ---------------------------------------------------------------------------
# scene sampling


def _block_reason(tabs, classes, row_labels, i, j, p, exclude_holdouts):
    """Why predicate p cannot go on edge (i, j), or None if it can."""
    for rule in tabs["type_rules"].get(p, ()):
        if (int(classes[i]) not in rule.subject_classes
                or int(classes[j]) not in rule.object_classes):
            return _rule_name(rule)
    for rule in tabs["exclusion"]:
        if p in rule.predicates and (row_labels[i] & rule.predicates) - {p}:
            return _rule_name(rule)
    if exclude_holdouts and p != 0:
        if (int(classes[i]), p, int(classes[j])) in tabs["holdouts"]:
            return f"train holdout ({int(classes[i])},{p},{int(classes[j])})"
    return None


def sample_scene(cfg: GeneratorConfig, rng, *, exclude_holdouts: bool = False,
                 force_triplet=None, scene_seed: int = 0) -> SceneRecord:
    """Draw one scene: type, classes, relations by rejection, features.

    force_triplet=(cs, p, co) implants that class-level triplet on the
    node pair (0, 1) before the remaining edges are sampled, which the
    test split uses to guarantee every holdout triplet occurs.
    """
    tabs = _tables(cfg)
    t = int(rng.integers(cfg.num_scene_types))
    lo, hi = cfg.n_range
    n = int(rng.integers(lo, hi + 1))
    classes = rng.choice(cfg.d, size=n, p=tabs["class_probs"][t])
    edge_labels = np.zeros((n, n), dtype=np.int64)
    row_labels = [set() for _ in range(n)]
    forced = None
    if force_triplet is not None:
        cs, p, co = (int(x) for x in force_triplet)
        if n < 2:
            raise GenerationError("cannot implant a triplet in a one-node scene")
        classes[0], classes[1] = cs, co
        reason = _block_reason(tabs, classes, row_labels, 0, 1, p, False)
        if reason is not None:
            raise GenerationError(f"forced triplet {force_triplet} blocked by {reason}")
        edge_labels[0, 1] = p
        row_labels[0].add(p)
        forced = (0, 1)

    for i in range(n):
        for j in range(n):
            if i == j or (i, j) == forced:
                continue
            reason = None
            for _ in range(REJECTION_BUDGET):
                p = int(rng.choice(cfg.d_prime, p=tabs["palette"][t]))
                reason = _block_reason(tabs, classes, row_labels, i, j, p,
                                       exclude_holdouts)
                if reason is None:
                    edge_labels[i, j] = p
                    row_labels[i].add(p)
                    break
            else:
                raise GenerationError(
                    f"rejection budget exhausted on edge ({i},{j}) with classes "
                    f"({int(classes[i])},{int(classes[j])}); last blocked by {reason}")

    violations = rule_violations(classes, edge_labels, cfg.rules)
    if violations:  # unreachable if _block_reason mirrors the rules
        raise GenerationError(f"sampled scene violates rules: {violations}")

    sigma = cfg.feature_noise_sigma
    features = tabs["emb"][classes].copy()
    features += sigma * (tabs["offsets"][t] + rng.standard_normal((n, cfg.f)))
    return SceneRecord(ImageGraph(ad.constant(features)), classes, edge_labels,
                       scene_type=t, seed=scene_seed)


def check_satisfiable(cfg: GeneratorConfig, trials: int = SATISFIABILITY_TRIALS):
    """Prove the config can emit scenes: trial draws plus one forced probe
    per holdout triplet.  Raises GenerationError naming the blocking rule."""
    for k in range(trials):
        rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(_TRIAL_STREAM, k)))
        sample_scene(cfg, rng, exclude_holdouts=True)
    for h, triplet in enumerate(cfg.holdout_triplets):
        rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(_TRIAL_STREAM, trials + h)))
        sample_scene(cfg, rng, force_triplet=triplet)


# ---------------------------------------------------------------------------
# datasets


def census(dataset) -> dict:
    """Exact class-level triplet counts; accepts records or a dataset path."""
    if isinstance(dataset, (str, os.PathLike)):
        dataset = read_records(dataset)
    counts = {}
    for record in dataset:
        for i, j, p in record.triplets():
            key = record.class_triplet(i, j, p)
            counts[key] = counts.get(key, 0) + 1
    return counts


def predicate_marginals(records, d_prime: int) -> np.ndarray:
    """Realized predicate distribution over ordered off-diagonal pairs."""
    counts = np.zeros(d_prime, dtype=np.int64)
    for record in records:
        n = record.n
        offdiag = ~np.eye(n, dtype=bool)
        counts += np.bincount(record.edge_labels[offdiag], minlength=d_prime)
    total = counts.sum()
    if total == 0:
        return np.full(d_prime, np.nan)
    return counts / total


def generate_dataset(cfg: GeneratorConfig, counts: SplitCounts, out_dir) -> dict:
    """Write train/val/test record files plus the sidecar header.

    Scene seeds are derived from (split index, scene index), so splits are
    disjoint and every byte is reproducible from the config alone.  The
    train split rejects holdout triplets; the first test scenes implant
    them.  The header carries the label space, the config, the train
    census, and the realized predicate marginals of every split (the
    documented rejection bias).
    """
    if counts.test < len(cfg.holdout_triplets):
        raise GenerationError("test split too small to cover the holdout triplets")
    check_satisfiable(cfg)
    os.makedirs(out_dir, exist_ok=True)
    space = label_space_for(cfg)
    paths = {}
    censuses = {}
    marginals = {}
    for split_idx, split in enumerate(SPLITS):
        records = []
        for idx in range(int(getattr(counts, split))):
            rng = np.random.default_rng(
                np.random.SeedSequence(cfg.seed, spawn_key=(split_idx, idx)))
            force = None
            if split == "test" and idx < len(cfg.holdout_triplets):
                force = cfg.holdout_triplets[idx]
            records.append(sample_scene(cfg, rng,
                                        exclude_holdouts=(split == "train"),
                                        force_triplet=force, scene_seed=idx))
        path = os.path.join(out_dir, f"{split}.jsonl")
        write_records(path, records)
        paths[split] = path
        censuses[split] = census(records)
        marginals[split] = predicate_marginals(records, cfg.d_prime)

    for triplet in cfg.holdout_triplets:
        if censuses["train"].get(triplet, 0) != 0:
            raise GenerationError(f"holdout {triplet} leaked into train")
        if censuses["test"].get(triplet, 0) == 0:
            raise GenerationError(f"holdout {triplet} missing from test")

    header_config = {
        "generator": cfg.to_json(),
        "counts": counts.to_json(),
        "zipf_target": zipf_weights(cfg.zipf_s, cfg.d_prime).tolist(),
        "predicate_marginals": {s: marginals[s].tolist() for s in SPLITS},
        "num_triplets": {s: int(sum(censuses[s].values())) for s in SPLITS},
    }
    header_path = os.path.join(out_dir, "header.json")
    write_header(header_path, space, header_config, cfg.rules, censuses["train"])
    paths["header"] = header_path
    return paths

"""Epoch-plan construction for every sampling strategy.

SRS permutes scenes and carries each scene's full contents. CBS draws hard
per-class quotas with replacement on one axis (entities or predicates), so
a batch's class marginal is exactly uniform over eligible classes. The
alternating scheme pairs one predicate-balanced plan with one
entity-balanced plan per alternation, reseeded each time.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .seeding import derive

ENTITY_MIN_COUNT = 1
PREDICATE_MIN_COUNT = 5   # classes below this are never sampled
ENTITY_PER_CLASS = 2
PREDICATE_PER_CLASS = 5


class SamplingError(Exception):
    pass


@dataclass(frozen=True)
class InstanceIndex:
    scene_id: int
    kind: str        # "entity" or "relation"
    slot: int


@dataclass(frozen=True)
class EpochPlan:
    strategy: str
    seed: int
    batches: tuple   # tuple of tuples of InstanceIndex

    def instance_count(self):
        return sum(len(b) for b in self.batches)

    def to_json(self):
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "batches": [
                [[ix.scene_id, ix.kind, ix.slot] for ix in batch]
                for batch in self.batches
            ],
        }


def dump_plan(plan, path):
    """Audit dump of a plan as JSON."""
    with open(path, "w") as fh:
        json.dump(plan.to_json(), fh)
        fh.write("\n")


@dataclass(frozen=True)
class ClassIndexMap:
    axis: str
    pools: tuple     # per class id, tuple of InstanceIndex
    eligible: tuple  # per class id, bool
    min_count: int

    def eligible_ids(self):
        return [i for i, ok in enumerate(self.eligible) if ok]


def build_class_index(scenes, n_classes, axis):
    """Per-class instance pools with the axis eligibility rule applied."""
    if axis not in ("entity", "predicate"):
        raise SamplingError("unknown axis %r" % axis)
    pools = [[] for _ in range(n_classes)]
    for sid, scene in enumerate(scenes):
        if axis == "entity":
            for slot, e in enumerate(scene.entities):
                pools[e.class_id].append(InstanceIndex(sid, "entity", slot))
        else:
            for slot, r in enumerate(scene.relations):
                pools[r.predicate].append(InstanceIndex(sid, "relation", slot))
    min_count = ENTITY_MIN_COUNT if axis == "entity" else PREDICATE_MIN_COUNT
    eligible = tuple(len(p) >= min_count for p in pools)
    return ClassIndexMap(
        axis=axis,
        pools=tuple(tuple(p) for p in pools),
        eligible=eligible,
        min_count=min_count,
    )


def plan_srs(scenes, batch_size, seed):
    """Uniform scene permutation chunked into batches of whole scenes.

    Every entity and relation of a chunked scene rides along, so one epoch
    touches each instance exactly once. Only SRS may end with a partial
    batch.
    """
    if not scenes:
        raise SamplingError("empty corpus")
    if batch_size < 1:
        raise SamplingError("batch_size must be >= 1")
    rng = np.random.Generator(np.random.PCG64(derive(seed, "srs")))
    order = rng.permutation(len(scenes))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        batch = []
        for sid in chunk:
            sid = int(sid)
            batch.extend(
                InstanceIndex(sid, "entity", slot)
                for slot in range(len(scenes[sid].entities))
            )
            batch.extend(
                InstanceIndex(sid, "relation", slot)
                for slot in range(len(scenes[sid].relations))
            )
        batches.append(tuple(batch))
    return EpochPlan(strategy="srs", seed=int(seed), batches=tuple(batches))


def plan_cbs(scenes, n_classes, axis, per_class, seed):
    """Class-balanced epoch: exact per-class quotas, with replacement.

    Batch size is per_class * eligible-class-count; the epoch length is
    ceil(total eligible instances / batch size), which keeps the data volume
    of one balanced epoch comparable to one natural pass.
    """
    if per_class < 1:
        raise SamplingError("per_class must be >= 1")
    index = build_class_index(scenes, n_classes, axis)
    ids = index.eligible_ids()
    if not ids:
        raise SamplingError("no eligible %s classes" % axis)
    total = sum(len(index.pools[c]) for c in ids)
    batch_size = per_class * len(ids)
    n_batches = max(1, math.ceil(total / batch_size))
    rng = np.random.Generator(np.random.PCG64(derive(seed, "cbs", axis)))
    batches = []
    for _ in range(n_batches):
        batch = []
        for c in ids:
            pool = index.pools[c]
            picks = rng.integers(0, len(pool), size=per_class)
            batch.extend(pool[int(k)] for k in picks)
        batches.append(tuple(batch))
    return EpochPlan(
        strategy="cbs-%s" % axis, seed=int(seed), batches=tuple(batches)
    )


def plan_acbs(scenes, n_classes_entity, n_classes_predicate, alternation_index, seed,
              entity_per_class=ENTITY_PER_CLASS,
              predicate_per_class=PREDICATE_PER_CLASS):
    """One alternation's plans: (predicate-balanced, entity-balanced).

    Seeds derive from (seed, alternation_index) so every alternation
    resamples both plans.
    """
    p_seed = derive(seed, "acbs-p", alternation_index)
    e_seed = derive(seed, "acbs-e", alternation_index)
    p_plan = plan_cbs(scenes, n_classes_predicate, "predicate",
                      predicate_per_class, p_seed)
    e_plan = plan_cbs(scenes, n_classes_entity, "entity",
                      entity_per_class, e_seed)
    return p_plan, e_plan

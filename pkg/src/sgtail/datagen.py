"""Synthetic long-tailed scene-graph corpora.

The image backbone is replaced by a generative world: class prototypes in
feature space, unit appearance directions per predicate, and a conditional
predicate table over (subject class, object class, spatial bucket). Class
frequencies on both axes follow Zipf laws so the corpus reproduces the
long-tail shape of real scene-graph data at desk scale.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive, rng as seeded_rng

FORMAT_VERSION = "1"

# scene geometry / composition constants
ENTITY_RANGE = (3, 8)        # inclusive
RELATION_RANGE = (2, 6)      # inclusive, over distinct ordered pairs
AREA_RANGE = (0.01, 0.25)
NOISE_SIGMA = 0.3            # feature noise around the class prototype
RELATION_PULL = 0.5          # epsilon on the summed predicate directions
PREFERRED_MASS = 0.85        # eta: mass on the preferred predicate per half-cell
# Prototype cloud scale. Small enough that, against the sigma=0.3 noise and
# the relation pulls, rare entity classes actually suffer from a skewed
# classifier; large enough that the separation floor below stays satisfiable.
PROTO_SCALE = 0.22
MIN_PROTO_DIST = 0.5
RARE_THRESHOLD = 5           # predicate classes below this are flagged rare


class GenerationError(Exception):
    pass


class CorpusFormatError(Exception):
    pass


@dataclass(frozen=True)
class ClassCatalog:
    entity_classes: int
    predicate_classes: int
    entity_zipf: float
    predicate_zipf: float

    def __post_init__(self):
        if self.entity_classes < 3 or self.predicate_classes < 3:
            raise ValueError("need at least 3 classes on each axis")
        if self.entity_zipf <= 0 or self.predicate_zipf <= 0:
            raise ValueError("zipf exponents must be positive")


def desk_catalog():
    """Desk-scale defaults: 20 entity / 15 predicate classes."""
    return ClassCatalog(20, 15, 1.2, 1.8)


@dataclass(frozen=True)
class EntityInstance:
    class_id: int
    bbox: tuple       # (x1, y1, x2, y2), normalized, x1 < x2, y1 < y2
    feature: np.ndarray


@dataclass(frozen=True)
class RelationTriplet:
    subject: int
    object: int
    predicate: int


@dataclass(frozen=True)
class Scene:
    entities: list
    relations: list


@dataclass(frozen=True)
class GroundTruthWorld:
    catalog: ClassCatalog
    feature_width: int
    entity_prior: np.ndarray
    predicate_prior: np.ndarray
    prototypes: np.ndarray        # (C, feature_width)
    directions: np.ndarray        # (P, feature_width), unit rows
    spatial_pref: np.ndarray      # (C, C, 2) preferred predicate per half-cell
    cond_table: np.ndarray        # (C, C, 2, P) predicate distributions
    relation_pull: float = RELATION_PULL
    noise_sigma: float = NOISE_SIGMA
    seed: int = 0


def zipf_weights(n, s):
    """w_k proportional to k^-s for ranks 1..n, normalized."""
    if n < 1:
        raise ValueError("need n >= 1")
    if s <= 0:
        raise ValueError("need s > 0")
    w = np.arange(1, n + 1, dtype=np.float64) ** (-float(s))
    return w / w.sum()


def zipf_exponent_for_ratio(n, ratio):
    """Exponent giving max/min weight ratio = ratio (closed form n^s = ratio)."""
    if n < 2 or ratio <= 1:
        raise ValueError("need n >= 2 and ratio > 1")
    return math.log(ratio) / math.log(n)


def _assign_preferred(entity_prior, predicate_prior, eta):
    """Greedy preferred-predicate map over (subject, object, bucket) cells.

    Cell weight under scene sampling is prior_s * prior_o / 2 (buckets are
    equiprobable by symmetry). Assigning heavy cells to predicates with the
    most remaining capacity prior_p / eta keeps the induced predicate
    marginal close to the target prior once the shared base distribution is
    solved for below.
    """
    C = entity_prior.shape[0]
    P = predicate_prior.shape[0]
    weights = (entity_prior[:, None] * entity_prior[None, :] / 2.0)[:, :, None]
    weights = np.broadcast_to(weights, (C, C, 2)).reshape(-1)
    order = np.argsort(-weights, kind="stable")
    capacity = predicate_prior / eta
    assigned = np.zeros(P)
    pref = np.zeros(C * C * 2, dtype=np.int64)
    for cell in order:
        p = int(np.argmax(capacity - assigned))
        pref[cell] = p
        assigned[p] += weights[cell]
    return pref.reshape(C, C, 2), assigned


def _solve_base(predicate_prior, assigned, eta):
    """Shared base distribution making eta*A + (1-eta)*base hit the prior.

    Overshot classes (assigned mass beyond prior/eta) clip at zero; the
    remainder renormalizes, which distorts the realized marginal slightly.
    """
    base = (predicate_prior - eta * assigned) / (1.0 - eta)
    base = np.maximum(base, 0.0)
    total = base.sum()
    if total <= 0:
        raise GenerationError("degenerate base distribution")
    return base / total


def build_world(catalog, seed, feature_width=32):
    """Deterministic ground-truth world for (catalog, seed)."""
    C, P = catalog.entity_classes, catalog.predicate_classes
    entity_prior = zipf_weights(C, catalog.entity_zipf)
    predicate_prior = zipf_weights(P, catalog.predicate_zipf)

    proto_rng = seeded_rng(seed, "prototypes")
    prototypes = None
    for _ in range(1000):
        cand = PROTO_SCALE * proto_rng.standard_normal((C, feature_width))
        diff = cand[:, None, :] - cand[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() > MIN_PROTO_DIST:
            prototypes = cand
            break
    if prototypes is None:
        raise GenerationError(
            "could not draw prototypes with pairwise distance > %.2f" % MIN_PROTO_DIST
        )

    directions = seeded_rng(seed, "directions").standard_normal((P, feature_width))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    pref, assigned = _assign_preferred(entity_prior, predicate_prior, PREFERRED_MASS)
    base = _solve_base(predicate_prior, assigned, PREFERRED_MASS)
    table = np.broadcast_to(
        (1.0 - PREFERRED_MASS) * base, (C, C, 2, P)
    ).copy()
    flat = table.reshape(-1, P)
    flat[np.arange(flat.shape[0]), pref.reshape(-1)] += PREFERRED_MASS
    return GroundTruthWorld(
        catalog=catalog,
        feature_width=feature_width,
        entity_prior=entity_prior,
        predicate_prior=predicate_prior,
        prototypes=prototypes,
        directions=directions,
        spatial_pref=pref,
        cond_table=table,
        seed=int(seed),
    )


def spatial_bucket(subject_box, object_box):
    """1 when the object center sits to the right of the subject center."""
    sx = (subject_box[0] + subject_box[2]) / 2.0
    ox = (object_box[0] + object_box[2]) / 2.0
    return 1 if ox - sx >= 0 else 0


def _sample_box(rng):
    area = rng.uniform(*AREA_RANGE)
    aspect = rng.uniform(0.5, 2.0)
    w = math.sqrt(area * aspect)
    h = math.sqrt(area / aspect)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return (x1, y1, x1 + w, y1 + h)


def sample_scene(world, seed):
    """One scene as a pure function of (world, seed)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    C = world.catalog.entity_classes
    n_ent = int(rng.integers(ENTITY_RANGE[0], ENTITY_RANGE[1] + 1))
    classes = rng.choice(C, size=n_ent, p=world.entity_prior)
    boxes = [_sample_box(rng) for _ in range(n_ent)]

    pairs = [(i, j) for i in range(n_ent) for j in range(n_ent) if i != j]
    n_rel = int(rng.integers(RELATION_RANGE[0], RELATION_RANGE[1] + 1))
    n_rel = min(n_rel, len(pairs))
    picked = rng.choice(len(pairs), size=n_rel, replace=False)

    relations = []
    pulls = [np.zeros(world.feature_width) for _ in range(n_ent)]
    for k in picked:
        s, o = pairs[k]
        bucket = spatial_bucket(boxes[s], boxes[o])
        dist = world.cond_table[classes[s], classes[o], bucket]
        p = int(rng.choice(world.catalog.predicate_classes, p=dist))
        relations.append(RelationTriplet(s, o, p))
        pulls[s] = pulls[s] + world.directions[p]
        pulls[o] = pulls[o] + world.directions[p]

    entities = []
    for i in range(n_ent):
        feat = (
            world.prototypes[classes[i]]
            + world.noise_sigma * rng.standard_normal(world.feature_width)
            + world.relation_pull * pulls[i]
        )
        entities.append(EntityInstance(int(classes[i]), boxes[i], feat))
    return Scene(entities, relations)


def make_corpus(world, n_scenes, seed):
    """n_scenes scenes with per-scene seeds derived from (seed, index)."""
    return [sample_scene(world, derive(seed, "scene", i)) for i in range(n_scenes)]


def corpus_counts(scenes, catalog):
    """Per-class instance counts over a scene list."""
    ent = np.zeros(catalog.entity_classes, dtype=np.int64)
    pred = np.zeros(catalog.predicate_classes, dtype=np.int64)
    for sc in scenes:
        for e in sc.entities:
            ent[e.class_id] += 1
        for r in sc.relations:
            pred[r.predicate] += 1
    return ent, pred


def build_manifest(scenes, catalog, seed, feature_width, split=None):
    ent, pred = corpus_counts(scenes, catalog)
    eligible = pred[pred >= RARE_THRESHOLD]
    manifest = {
        "format_version": FORMAT_VERSION,
        "split": split,
        "seed": int(seed),
        "scene_count": len(scenes),
        "feature_width": int(feature_width),
        "config": {
            "entity_classes": catalog.entity_classes,
            "predicate_classes": catalog.predicate_classes,
            "entity_zipf": catalog.entity_zipf,
            "predicate_zipf": catalog.predicate_zipf,
        },
        "entity_counts": ent.tolist(),
        "predicate_counts": pred.tolist(),
        "rare_predicates": [int(i) for i in np.flatnonzero(pred < RARE_THRESHOLD)],
        "predicate_imbalance_unfiltered": (
            float(pred.max() / pred.min()) if pred.min() > 0 else None
        ),
        "predicate_imbalance_filtered": (
            float(eligible.max() / eligible.min()) if eligible.size else None
        ),
        "entity_imbalance": float(ent.max() / ent.min()) if ent.min() > 0 else None,
    }
    return manifest


def _scene_to_json(scene):
    return {
        "entities": [
            {"c": e.class_id, "b": list(e.bbox), "f": e.feature.tolist()}
            for e in scene.entities
        ],
        "relations": [
            {"s": r.subject, "o": r.object, "p": r.predicate} for r in scene.relations
        ],
    }


def _scene_from_json(obj):
    entities = [
        EntityInstance(int(e["c"]), tuple(float(v) for v in e["b"]),
                       np.asarray(e["f"], dtype=np.float64))
        for e in obj["entities"]
    ]
    relations = [
        RelationTriplet(int(r["s"]), int(r["o"]), int(r["p"]))
        for r in obj["relations"]
    ]
    return Scene(entities, relations)


def write_corpus(scenes, path):
    """One scene per line, JSON Lines."""
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(json.dumps(_scene_to_json(scene), separators=(",", ":")))
            fh.write("\n")


def read_corpus(path):
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                scenes.append(_scene_from_json(obj))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError("line %d: %s" % (lineno, exc)) from exc
    return scenes


def write_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorpusFormatError(
            "unsupported manifest format_version %r" % manifest.get("format_version")
        )
    return manifest


def validate_scene(scene, catalog=None):
    """Raise GenerationError when a Scene invariant is broken."""
    if len(scene.entities) < 2:
        raise GenerationError("scene needs at least 2 entities")
    seen = set()
    for e in scene.entities:
        x1, y1, x2, y2 = e.bbox
        if not (x1 < x2 and y1 < y2):
            raise GenerationError("degenerate bbox %r" % (e.bbox,))
        if catalog is not None and not 0 <= e.class_id < catalog.entity_classes:
            raise GenerationError("entity class %d out of range" % e.class_id)
    for r in scene.relations:
        if r.subject == r.object:
            raise GenerationError("self-relation")
        if not (0 <= r.subject < len(scene.entities)
                and 0 <= r.object < len(scene.entities)):
            raise GenerationError("relation references missing entity")
        if catalog is not None and not 0 <= r.predicate < catalog.predicate_classes:
            raise GenerationError("predicate %d out of range" % r.predicate)
        key = (r.subject, r.object)
        if key in seen:
            raise GenerationError("duplicate ordered pair %r" % (key,))
        seen.add(key)

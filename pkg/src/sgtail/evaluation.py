"""Triplet ranking and recall metrics for scene-graph prediction.

Predictions are ranked per scene under the graph constraint (one predicate
per candidate pair), matched against ground truth at most once, and pooled
into R@K, mean per-class recall (mR@K), and head/middle/tail buckets of the
predicate classes sorted by training frequency.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import InvalidParameterError

EVAL_TASKS = ("predcls", "sgcls")


class EvaluationError(Exception):
    """Raised for unusable evaluation inputs (e.g. an empty test set)."""


@dataclass(frozen=True)
class ScoredTriplet:
    subject: int
    object: int
    predicate: int
    score: float
    subject_class: int
    object_class: int


def frequency_order(train_counts):
    """Class ids sorted by training frequency, most frequent first.

    Ties break toward the lower class id so the ordering is total.
    """
    return sorted(range(len(train_counts)), key=lambda c: (-train_counts[c], c))


def bucket_sizes(n_classes):
    # thirds of the class list; remainder goes to tail first, then middle
    base, rem = divmod(n_classes, 3)
    return base, base + (1 if rem >= 2 else 0), base + (1 if rem >= 1 else 0)


def class_buckets(train_counts):
    """Map class id -> bucket name ("head" | "middle" | "tail")."""
    order = frequency_order(train_counts)
    h, m, t = bucket_sizes(len(order))
    out = {}
    for rank, cls in enumerate(order):
        if rank < h:
            out[cls] = "head"
        elif rank < h + m:
            out[cls] = "middle"
        else:
            out[cls] = "tail"
    return out


def rank_triplets(scene, result, task, k):
    """Top-k scored triplets for one scene, graph-constrained.

    Keeps the single best predicate per candidate pair, scores it by
    predicate probability (predcls) or by the product of both entity-class
    probabilities and the predicate probability (sgcls), and sorts by
    descending score with a stable (pair index, predicate id) tie-break.
    """
    if k < 1:
        raise InvalidParameterError("k must be >= 1, got %r" % (k,))
    if task not in EVAL_TASKS:
        raise InvalidParameterError("unknown task %r" % (task,))
    ent = result.entity_probs
    out = []
    for i, (s, o) in enumerate(result.pairs):
        row = result.predicate_probs[i]
        p = int(np.argmax(row))
        if task == "predcls":
            s_cls = scene.entities[s].class_id
            o_cls = scene.entities[o].class_id
            score = float(row[p])
        else:
            s_cls = int(np.argmax(ent[s]))
            o_cls = int(np.argmax(ent[o]))
            score = float(ent[s, s_cls] * ent[o, o_cls] * row[p])
        out.append((-score, i, p, ScoredTriplet(s, o, p, score, s_cls, o_cls)))
    out.sort(key=lambda t: t[:3])
    return [t[3] for t in out[:k]]


def match_and_count(ranked, scene, task):
    """Per-predicate-class (matched, total) increments for one scene.

    A ground-truth triplet matches a prediction iff subject slot, object
    slot and predicate agree; sgcls additionally requires both predicted
    class ids to equal the ground-truth entity classes. Each ground-truth
    triplet is matched at most once.
    """
    counts = {}
    for rel in scene.relations:
        counts.setdefault(rel.predicate, [0, 0])[1] += 1
    taken = set()
    for t in ranked:
        for j, rel in enumerate(scene.relations):
            if j in taken:
                continue
            if (rel.subject, rel.object, rel.predicate) != (
                t.subject, t.object, t.predicate
            ):
                continue
            if task == "sgcls":
                if scene.entities[rel.subject].class_id != t.subject_class:
                    continue
                if scene.entities[rel.object].class_id != t.object_class:
                    continue
            taken.add(j)
            counts[rel.predicate][0] += 1
            break
    return {cls: tuple(mt) for cls, mt in counts.items()}


def merge_counts(into, inc):
    for cls, (m, t) in inc.items():
        cur = into.setdefault(cls, (0, 0))
        into[cls] = (cur[0] + m, cur[1] + t)


@dataclass
class EvalReport:
    task: str
    ks: tuple
    n_predicate_classes: int
    train_counts: tuple
    counts: dict                 # k -> {class id: (matched, total)}
    recall: dict                 # k -> R@k
    mean_recall: dict            # k -> mR@k
    per_class: dict              # k -> {class id: recall}
    bucket_recall: dict          # k -> {"head"/"middle"/"tail": mR or None}
    entity_accuracy: float = None
    pair_accuracy: float = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "task": self.task,
            "ks": list(self.ks),
            "n_predicate_classes": self.n_predicate_classes,
            "train_counts": list(self.train_counts),
            "counts": {str(k): {str(c): list(v) for c, v in sorted(m.items())}
                       for k, m in self.counts.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "mean_recall": {str(k): v for k, v in self.mean_recall.items()},
            "per_class": {str(k): {str(c): v for c, v in sorted(m.items())}
                          for k, m in self.per_class.items()},
            "bucket_recall": {str(k): dict(v)
                              for k, v in self.bucket_recall.items()},
            "entity_accuracy": self.entity_accuracy,
            "pair_accuracy": self.pair_accuracy,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            task=d["task"],
            ks=tuple(d["ks"]),
            n_predicate_classes=d["n_predicate_classes"],
            train_counts=tuple(d["train_counts"]),
            counts={int(k): {int(c): tuple(v) for c, v in m.items()}
                    for k, m in d["counts"].items()},
            recall={int(k): v for k, v in d["recall"].items()},
            mean_recall={int(k): v for k, v in d["mean_recall"].items()},
            per_class={int(k): {int(c): v for c, v in m.items()}
                       for k, m in d["per_class"].items()},
            bucket_recall={int(k): dict(v)
                           for k, v in d["bucket_recall"].items()},
            entity_accuracy=d.get("entity_accuracy"),
            pair_accuracy=d.get("pair_accuracy"),
            extra=d.get("extra", {}),
        )


def aggregate(counts, task, train_counts, entity_accuracy=None,
              pair_accuracy=None, extra=None):
    """Fold per-k match counts into an EvalReport.

    `counts` maps k -> {predicate class: (matched, total)}. Classes absent
    from the test set are excluded from mR and bucket means rather than
    counted as zero.
    """
    if not counts:
        raise EvaluationError("no match counts supplied")
    ks = tuple(sorted(counts))
    n_classes = len(train_counts)
    buckets = class_buckets(train_counts)
    totals = {}
    for k in ks:
        for cls, (m, t) in counts[k].items():
            if not 0 <= cls < n_classes:
                raise EvaluationError("class id %d out of range" % cls)
            if m > t:
                raise EvaluationError("matched > total for class %d" % cls)
            if cls in totals and totals[cls] != t:
                raise EvaluationError(
                    "inconsistent totals for class %d across k" % cls
                )
            totals[cls] = t
    grand_total = sum(totals.values())
    if grand_total == 0:
        raise EvaluationError("empty test set: no ground-truth triplets")

    recall, mean_recall, per_class, bucket_recall = {}, {}, {}, {}
    for k in ks:
        per = {cls: m / t for cls, (m, t) in counts[k].items() if t > 0}
        matched = sum(m for m, _ in counts[k].values())
        recall[k] = matched / grand_total
        mean_recall[k] = sum(per.values()) / len(per)
        by_bucket = {}
        for cls, r in per.items():
            by_bucket.setdefault(buckets[cls], []).append(r)
        bucket_recall[k] = {
            name: (sum(v) / len(v) if v else None)
            for name, v in ((b, by_bucket.get(b, [])) for b in
                            ("head", "middle", "tail"))
        }
        per_class[k] = per
    return EvalReport(
        task=task,
        ks=ks,
        n_predicate_classes=n_classes,
        train_counts=tuple(train_counts),
        counts={k: dict(counts[k]) for k in ks},
        recall=recall,
        mean_recall=mean_recall,
        per_class=per_class,
        bucket_recall=bucket_recall,
        entity_accuracy=entity_accuracy,
        pair_accuracy=pair_accuracy,
        extra=dict(extra or {}),
    )


def candidate_pairs(scene, all_pairs=False):
    """Annotated ground-truth pairs (default) or every ordered pair."""
    if all_pairs:
        n = len(scene.entities)
        return [(i, j) for i in range(n) for j in range(n) if i != j]
    return [(rel.subject, rel.object) for rel in scene.relations]


def evaluate(forward_fn, scenes, task, ks, train_counts, all_pairs=False,
             extra=None):
    """Run the full protocol over `scenes` and aggregate a report.

    `forward_fn(scene, pairs)` must return a ForwardResult covering the
    candidate pairs. Matching at smaller k reuses prefixes of the max-k
    ranking, which makes R@K and mR@K nondecreasing in K by construction.
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks:
        raise InvalidParameterError("need at least one k")
    if ks[0] < 1:
        raise InvalidParameterError("k must be >= 1, got %d" % ks[0])
    counts = {k: {} for k in ks}
    ent_hit = ent_all = pair_hit = pair_all = 0
    for scene in scenes:
        pairs = candidate_pairs(scene, all_pairs)
        result = forward_fn(scene, pairs)
        ranked = rank_triplets(scene, result, task, ks[-1])
        for k in ks:
            merge_counts(counts[k], match_and_count(ranked[:k], scene, task))
        pred_cls = np.argmax(result.entity_probs, axis=1)
        gt_cls = np.array([e.class_id for e in scene.entities])
        ok = pred_cls == gt_cls
        ent_hit += int(ok.sum())
        ent_all += len(scene.entities)
        for rel in scene.relations:
            pair_hit += int(ok[rel.subject] and ok[rel.object])
            pair_all += 1
    if ent_all == 0:
        raise EvaluationError("empty test set: no scenes")
    return aggregate(
        counts, task, train_counts,
        entity_accuracy=ent_hit / ent_all,
        pair_accuracy=pair_hit / pair_all if pair_all else None,
        extra=extra,
    )


def evaluate_model(model, scenes, task, ks, train_counts, all_pairs=False,
                   extra=None):
    def fwd(scene, pairs):
        return model.forward_scene(scene, pairs, task)

    return evaluate(fwd, scenes, task, ks, train_counts,
                    all_pairs=all_pairs, extra=extra)


# ---------------------------------------------------------------- reports

def write_report_json(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report_json(path):
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))


def write_report_csv(report, path):
    """One row per predicate class: id, frequency rank, bucket, counts,
    and recall at each k (blank when the class has no test instances)."""
    order = frequency_order(report.train_counts)
    rank_of = {cls: r for r, cls in enumerate(order)}
    buckets = class_buckets(report.train_counts)
    kmax = report.ks[-1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "frequency_rank", "bucket", "total",
                    "matched"] + ["recall@%d" % k for k in report.ks])
        for cls in range(report.n_predicate_classes):
            m, t = report.counts[kmax].get(cls, (0, 0))
            row = [cls, rank_of[cls], buckets[cls], t, m]
            for k in report.ks:
                r = report.per_class[k].get(cls)
                row.append("" if r is None else repr(r))
            w.writerow(row)


def write_plot_csv(report, path):
    """Per-class recall at the largest k, in frequency-rank order, for
    recall-vs-rank histograms."""
    kmax = report.ks[-1]
    buckets = class_buckets(report.train_counts)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_rank", "class_id", "bucket",
                    "train_count", "total", "recall@%d" % kmax])
        for rank, cls in enumerate(frequency_order(report.train_counts)):
            _, t = report.counts[kmax].get(cls, (0, 0))
            r = report.per_class[kmax].get(cls)
            w.writerow([rank, cls, buckets[cls], report.train_counts[cls],
                        t, "" if r is None else repr(r)])

import json

import numpy as np
import pytest

from sgtail import datagen as D
from sgtail import evaluation as E
from sgtail.model import ForwardResult
from sgtail.numerics import InvalidParameterError
from sgtail.seeding import rng as seeded_rng


def _scene(classes, rels):
    ents = tuple(
        D.EntityInstance(c, (0.1 * i, 0.1, 0.1 * i + 0.05, 0.2),
                         np.zeros(4))
        for i, c in enumerate(classes)
    )
    return D.Scene(ents, tuple(D.RelationTriplet(*r) for r in rels))


def _result(scene, pairs, ent_probs, pred_probs):
    return ForwardResult(
        entity_probs=np.asarray(ent_probs, dtype=float),
        teacher_probs=np.asarray(ent_probs, dtype=float),
        pairs=list(pairs),
        predicate_probs=np.asarray(pred_probs, dtype=float),
    )


def _random_result(scene, pairs, n_cls, n_pred, rng):
    ent = rng.random((len(scene.entities), n_cls)) + 1e-3
    ent /= ent.sum(axis=1, keepdims=True)
    pred = rng.random((len(pairs), n_pred)) + 1e-3
    pred /= pred.sum(axis=1, keepdims=True)
    return _result(scene, pairs, ent, pred)


# ---------------------------------------------------------- brute force

def brute_force_metrics(scenes, results, task, ks, train_counts):
    """Exhaustive re-implementation of the ranking protocol: enumerate every
    (pair, predicate) candidate, apply the graph constraint by scanning,
    sort, and match prefixes with plain loops."""
    counts = {k: {} for k in ks}
    for scene, res in zip(scenes, results):
        cand = []
        for i, (s, o) in enumerate(res.pairs):
            if task == "sgcls":
                s_cls = o_cls = 0
                for c in range(res.entity_probs.shape[1]):
                    if res.entity_probs[s, c] > res.entity_probs[s, s_cls]:
                        s_cls = c
                    if res.entity_probs[o, c] > res.entity_probs[o, o_cls]:
                        o_cls = c
            else:
                s_cls = scene.entities[s].class_id
                o_cls = scene.entities[o].class_id
            for p in range(res.predicate_probs.shape[1]):
                if task == "sgcls":
                    score = float(
                        res.entity_probs[s, s_cls]
                        * res.entity_probs[o, o_cls]
                        * res.predicate_probs[i][p]
                    )
                else:
                    score = float(res.predicate_probs[i][p])
                cand.append((i, p, score, s, o, s_cls, o_cls))
        best = {}
        for entry in cand:
            i, p, score = entry[0], entry[1], entry[2]
            cur = best.get(i)
            if cur is None or score > cur[2] or (score == cur[2] and p < cur[1]):
                best[i] = entry
        ordered = sorted(best.values(), key=lambda e: (-e[2], e[0], e[1]))
        for k in ks:
            taken = set()
            scene_counts = {}
            for rel in scene.relations:
                scene_counts.setdefault(rel.predicate, [0, 0])[1] += 1
            for entry in ordered[:k]:
                _, p, _, s, o, s_cls, o_cls = entry
                for j, rel in enumerate(scene.relations):
                    if j in taken:
                        continue
                    if (rel.subject, rel.object, rel.predicate) != (s, o, p):
                        continue
                    if task == "sgcls" and (
                        scene.entities[rel.subject].class_id != s_cls
                        or scene.entities[rel.object].class_id != o_cls
                    ):
                        continue
                    taken.add(j)
                    scene_counts[rel.predicate][0] += 1
                    break
            for cls, (m, t) in scene_counts.items():
                cm, ct = counts[k].get(cls, (0, 0))
                counts[k][cls] = (cm + m, ct + t)
    recall, mean_recall = {}, {}
    for k in ks:
        matched = sum(m for m, _ in counts[k].values())
        total = sum(t for _, t in counts[k].values())
        per = [m / t for m, t in counts[k].values() if t > 0]
        recall[k] = matched / total
        mean_recall[k] = sum(per) / len(per)
    return recall, mean_recall


# ------------------------------------------------------------- buckets

def test_bucket_sizes_fifty_and_fifteen():
    assert E.bucket_sizes(50) == (16, 17, 17)
    assert E.bucket_sizes(15) == (5, 5, 5)
    assert E.bucket_sizes(16) == (5, 5, 6)
    assert E.bucket_sizes(17) == (5, 6, 6)


def test_frequency_order_tie_break():
    assert E.frequency_order([5, 9, 5, 1]) == [1, 0, 2, 3]


def test_class_buckets_partition():
    counts = list(range(50, 0, -1))
    buckets = E.class_buckets(counts)
    names = [buckets[c] for c in range(50)]
    assert names.count("head") == 16
    assert names.count("middle") == 17
    assert names.count("tail") == 17
    assert names == sorted(names, key=["head", "middle", "tail"].index)


# ----------------------------------------------------------- aggregate

def test_hand_case_two_classes():
    counts = {100: {0: (2, 4), 1: (1, 1)}}
    rep = E.aggregate(counts, "predcls", [4, 1])
    assert rep.recall[100] == pytest.approx(0.6, abs=1e-12)
    assert rep.mean_recall[100] == pytest.approx(0.75, abs=1e-12)


def test_aggregate_excludes_absent_classes():
    counts = {10: {0: (1, 2), 2: (0, 1)}}
    rep = E.aggregate(counts, "predcls", [9, 5, 1])
    assert rep.mean_recall[10] == pytest.approx((0.5 + 0.0) / 2)
    assert 1 not in rep.per_class[10]


def test_duplication_shifts_recall_but_not_mean_recall():
    base = {50: {0: (2, 4), 1: (1, 1)}}
    dup = {50: {0: (2, 4), 1: (3, 3)}}  # class 1 triplets duplicated
    a = E.aggregate(base, "predcls", [4, 1])
    b = E.aggregate(dup, "predcls", [4, 1])
    assert b.mean_recall[50] == a.mean_recall[50]
    assert b.recall[50] > a.recall[50]  # pooled metric drifts to class 1


def test_aggregate_errors():
    with pytest.raises(E.EvaluationError):
        E.aggregate({}, "predcls", [1])
    with pytest.raises(E.EvaluationError):
        E.aggregate({10: {0: (2, 1)}}, "predcls", [1])
    with pytest.raises(E.EvaluationError):
        E.aggregate({10: {0: (0, 0)}}, "predcls", [1])
    with pytest.raises(E.EvaluationError):
        E.aggregate({10: {0: (1, 2)}, 20: {0: (1, 3)}}, "predcls", [1])


# ------------------------------------------------------- rank_triplets

def test_rank_three_pair_hand_scene():
    scene = _scene([0, 1, 2], [(0, 1, 0), (1, 2, 1), (0, 2, 1)])
    pairs = [(0, 1), (1, 2), (0, 2)]
    pred = [[0.7, 0.2, 0.1],
            [0.1, 0.1, 0.8],
            [0.15, 0.8, 0.05]]
    ent = np.eye(3)
    ranked = E.rank_triplets(scene, _result(scene, pairs, ent, pred),
                             "predcls", 10)
    assert [(t.subject, t.object, t.predicate) for t in ranked] == [
        (1, 2, 2), (0, 2, 1), (0, 1, 0)
    ]
    assert [t.score for t in ranked] == [0.8, 0.8, 0.7][:3]
    # the 0.8 tie broke toward the earlier pair index
    assert ranked[0].subject == 1


def test_rank_k_truncation_and_overrun():
    scene = _scene([0, 1], [(0, 1, 0)])
    pairs = [(0, 1), (1, 0)]
    pred = [[0.9, 0.1], [0.4, 0.6]]
    res = _result(scene, pairs, np.eye(2), pred)
    assert len(E.rank_triplets(scene, res, "predcls", 1)) == 1
    allr = E.rank_triplets(scene, res, "predcls", 99)
    assert len(allr) == 2
    assert allr[0].score >= allr[1].score


def test_rank_sgcls_score_is_product():
    scene = _scene([0, 1], [(0, 1, 0)])
    ent = [[0.6, 0.4], [0.3, 0.7]]
    pred = [[0.2, 0.8]]
    ranked = E.rank_triplets(scene, _result(scene, [(0, 1)], ent, pred),
                             "sgcls", 5)
    t = ranked[0]
    assert (t.subject_class, t.object_class, t.predicate) == (0, 1, 1)
    assert t.score == pytest.approx(0.6 * 0.7 * 0.8, abs=1e-15)


def test_rank_rejects_bad_k_and_task():
    scene = _scene([0, 1], [(0, 1, 0)])
    res = _result(scene, [(0, 1)], np.eye(2), [[1.0, 0.0]])
    with pytest.raises(InvalidParameterError):
        E.rank_triplets(scene, res, "predcls", 0)
    with pytest.raises(InvalidParameterError):
        E.rank_triplets(scene, res, "sgdet", 5)


# ----------------------------------------------------- match_and_count

def test_match_empty_ranked():
    scene = _scene([0, 1], [(0, 1, 2)])
    counts = E.match_and_count([], scene, "predcls")
    assert counts == {2: (0, 1)}


def test_match_sgcls_requires_both_classes():
    scene = _scene([3, 4], [(0, 1, 0)])
    hit = E.ScoredTriplet(0, 1, 0, 0.9, 3, 4)
    miss = E.ScoredTriplet(0, 1, 0, 0.9, 2, 4)
    assert E.match_and_count([hit], scene, "sgcls") == {0: (1, 1)}
    assert E.match_and_count([miss], scene, "sgcls") == {0: (0, 1)}
    # predcls ignores the class fields
    assert E.match_and_count([miss], scene, "predcls") == {0: (1, 1)}


def test_match_at_most_once():
    scene = _scene([0, 1], [(0, 1, 0)])
    dup = [E.ScoredTriplet(0, 1, 0, 0.9, 0, 1)] * 3
    assert E.match_and_count(dup, scene, "predcls") == {0: (1, 1)}


# ------------------------------------------------------------ evaluate

def _micro_corpus(seed, n_scenes):
    cat = D.ClassCatalog(5, 4, 1.0, 1.2)
    world = D.build_world(cat, seed=seed, feature_width=8)
    return [D.sample_scene(world, 1000 * seed + i) for i in range(n_scenes)]


def test_oracle_equivalence_on_micro_corpora():
    # brute-force enumeration agrees exactly on 24 randomized micro-corpora
    for case in range(24):
        task = "sgcls" if case % 2 else "predcls"
        scenes = _micro_corpus(case + 1, n_scenes=1 + case % 5)
        rng = seeded_rng(case, "eval-oracle")
        results = {}
        for idx, sc in enumerate(scenes):
            pairs = E.candidate_pairs(sc)
            results[idx] = _random_result(sc, pairs, 5, 4, rng)
        calls = iter(range(len(scenes)))

        def fwd(scene, pairs):
            return results[next(calls)]

        ks = (1, 2, 5, 20)
        rep = E.evaluate(fwd, scenes, task, ks, train_counts=[10, 5, 3, 1])
        r_ref, mr_ref = brute_force_metrics(
            scenes, [results[i] for i in range(len(scenes))],
            task, ks, [10, 5, 3, 1]
        )
        for k in ks:
            assert rep.recall[k] == r_ref[k], (case, k)
            assert rep.mean_recall[k] == mr_ref[k], (case, k)


def test_monotone_in_k():
    scenes = _micro_corpus(9, 5)
    rng = seeded_rng(9, "monotone")
    results = [
        _random_result(sc, E.candidate_pairs(sc), 5, 4, rng) for sc in scenes
    ]
    it = iter(results)
    rep = E.evaluate(lambda s, p: next(it), scenes, "predcls",
                     (1, 2, 3, 5, 10, 50), [4, 3, 2, 1])
    ks = rep.ks
    for a, b in zip(ks, ks[1:]):
        assert rep.recall[b] >= rep.recall[a]
        assert rep.mean_recall[b] >= rep.mean_recall[a]


def test_perfect_scorer_reaches_one():
    scenes = _micro_corpus(4, 3)

    def oracle(scene, pairs):
        ent = np.full((len(scene.entities), 5), 0.01)
        for i, e in enumerate(scene.entities):
            ent[i, e.class_id] = 1.0
        ent /= ent.sum(axis=1, keepdims=True)
        pred = np.full((len(pairs), 4), 0.01)
        lookup = {(r.subject, r.object): r.predicate for r in scene.relations}
        for i, pr in enumerate(pairs):
            pred[i, lookup[pr]] = 1.0
        pred /= pred.sum(axis=1, keepdims=True)
        return _result(scene, pairs, ent, pred)

    for task in ("predcls", "sgcls"):
        rep = E.evaluate(oracle, scenes, task, (20,), [4, 3, 2, 1])
        assert rep.recall[20] == 1.0
        assert rep.mean_recall[20] == 1.0
        assert rep.entity_accuracy == 1.0
        assert rep.pair_accuracy == 1.0


def test_entity_and_pair_accuracy_hand_case():
    scene = _scene([0, 1, 2], [(0, 1, 0), (1, 2, 1)])
    # entity 2 misclassified: pair (1,2) broken, pair (0,1) intact
    ent = np.array([[0.9, 0.05, 0.05],
                    [0.1, 0.8, 0.1],
                    [0.6, 0.2, 0.2]])
    pred = np.array([[0.9, 0.1], [0.2, 0.8]])

    def fwd(s, pairs):
        return _result(s, pairs, ent, pred)

    rep = E.evaluate(fwd, [scene], "sgcls", (10,), [2, 1])
    assert rep.entity_accuracy == pytest.approx(2 / 3)
    assert rep.pair_accuracy == pytest.approx(0.5)


def test_all_pairs_candidates():
    scene = _scene([0, 1, 2], [(0, 1, 0)])
    assert E.candidate_pairs(scene) == [(0, 1)]
    every = E.candidate_pairs(scene, all_pairs=True)
    assert len(every) == 6
    assert (2, 1) in every and (1, 2) in every


# -------------------------------------------------------------- report

def test_report_round_trip_and_determinism(tmp_path):
    scenes = _micro_corpus(5, 4)
    rng = seeded_rng(5, "report")
    results = [
        _random_result(sc, E.candidate_pairs(sc), 5, 4, rng) for sc in scenes
    ]

    def run():
        it = iter(results)
        return E.evaluate(lambda s, p: next(it), scenes, "sgcls",
                          (20, 50, 100), [9, 4, 2, 1])

    rep = run()
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    E.write_report_json(rep, p1)
    E.write_report_json(run(), p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = E.read_report_json(p1)
    assert back.recall == rep.recall
    assert back.mean_recall == rep.mean_recall
    assert back.counts == rep.counts
    assert back.entity_accuracy == rep.entity_accuracy


def test_report_csv_shape(tmp_path):
    counts = {20: {0: (1, 2), 1: (1, 1)}, 100: {0: (2, 2), 1: (1, 1)}}
    rep = E.aggregate(counts, "predcls", [7, 3, 1])
    csv_path = tmp_path / "per_class.csv"
    E.write_report_csv(rep, csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "class_id,frequency_rank,bucket,total,matched,recall@20,recall@100"
    assert len(lines) == 4  # header + one row per class, absent class blank
    assert lines[3].startswith("2,2,tail,0,0,,")

    plot_path = tmp_path / "plot.csv"
    E.write_plot_csv(rep, plot_path)
    plines = plot_path.read_text().strip().splitlines()
    assert plines[0] == "frequency_rank,class_id,bucket,train_count,total,recall@100"
    assert len(plines) == 4

import math

import numpy as np
import pytest

from oracles import finite_difference, rel_error
from sgtail import backend
from sgtail import datagen as D
from sgtail import numerics as N
from sgtail.model import (
    CheckpointError,
    Model,
    ModelDims,
    expected_parameter_count,
    full_scale_dims,
)


@pytest.fixture(scope="module")
def world():
    return D.build_world(D.desk_catalog(), seed=123)


def _model(seed=0, **kw):
    dims = ModelDims(**kw)
    return Model(dims, 20, 15, seed=seed)


# ------------------------------------------------------------------- dims

def test_dims_joint_width_identity():
    d = ModelDims()
    assert d.joint_width == 2 * (d.semantic_width + d.appearance_width) + d.bbox_embed_width
    assert d.head_hidden_width == 2 * d.predicate_feat_width


def test_dims_rejects_nonpositive():
    with pytest.raises(ValueError):
        ModelDims(semantic_width=0)


def test_full_scale_dims_widths():
    d = full_scale_dims()
    assert d.joint_width == 520
    assert d.predicate_feat_width == 128


def test_dims_without_appearance():
    d = ModelDims(use_appearance=False)
    assert d.pair_width == d.semantic_width
    assert d.joint_width == 2 * d.semantic_width + d.bbox_embed_width


# ------------------------------------------------------------------- init

def test_init_deterministic():
    a, b = _model(seed=3), _model(seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        assert np.array_equal(pa.value, pb.value)


def test_teacher_equals_entity_classifier_at_init():
    m = _model(seed=1)
    assert np.array_equal(m.w_ent.value, m.w_teacher.value)


def test_initial_loss_near_uniform():
    # balanced batch: one entity per class; fresh params predict near-uniform
    m = _model(seed=2)
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((20, 32))
    classes = np.arange(20)
    logits, _, _ = m.encode_entities(feats, classes, "predcls")
    loss, _ = N.SoftmaxCrossEntropy().forward(logits, classes)
    assert abs(loss - math.log(20)) / math.log(20) < 0.15


def test_parameter_count_matches_closed_form():
    for kw in ({}, {"use_appearance": False},
               {"backbone_width": 48, "semantic_width": 24,
                "appearance_width": 12, "predicate_feat_width": 20}):
        dims = ModelDims(**kw)
        m = Model(dims, 20, 15, seed=0)
        assert m.parameter_count() == expected_parameter_count(dims, 20, 15)


# ----------------------------------------------------------------- encode

def test_predcls_semantic_embed_depends_only_on_gt_class():
    m = _model(seed=4)
    feats = np.tile(np.random.default_rng(1).standard_normal(32), (3, 1))
    _, _, pair = m.encode_entities(feats, np.array([2, 2, 7]), "predcls")
    sem = pair[:, m.dims.appearance_width:]
    assert np.array_equal(sem[0], sem[1])       # same gt class
    assert not np.array_equal(sem[0], sem[2])   # different gt class


def test_encode_probability_outputs(world):
    m = _model(seed=5)
    sc = D.sample_scene(world, 77)
    feats = np.stack([e.feature for e in sc.entities])
    classes = np.array([e.class_id for e in sc.entities])
    el, tl, _ = m.encode_entities(feats, classes, "predcls")
    ep = N.softmax_temp(el, 1.0)
    tp = N.softmax_temp(tl, 1.0)
    assert np.abs(ep.sum(axis=1) - 1.0).max() < 1e-12
    assert np.abs(tp.sum(axis=1) - 1.0).max() < 1e-12
    assert np.array_equal(ep, tp)  # W^t == W^e at init


def test_argmax_gradient_stop_bit_identical():
    # perturbing entity-classifier logits without moving the argmax must not
    # change the semantic embedding in sgcls mode
    m = _model(seed=6)
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((6, 32))
    classes = np.zeros(6, dtype=int)
    logits, _, pair_before = m.encode_entities(feats, classes, "sgcls")
    winners = np.argmax(logits, axis=1)
    m.w_ent.value *= 1.0 + 1e-9  # rescale preserves every argmax
    logits2, _, pair_after = m.encode_entities(feats, classes, "sgcls")
    assert np.array_equal(np.argmax(logits2, axis=1), winners)
    A = m.dims.appearance_width
    assert pair_before[:, A:].tobytes() == pair_after[:, A:].tobytes()


def test_encode_rejects_wrong_width():
    m = _model(seed=0)
    with pytest.raises(N.ShapeError):
        m.encode_entities(np.zeros((2, 31)), np.zeros(2, dtype=int), "predcls")
    with pytest.raises(ValueError):
        m.encode_entities(np.zeros((2, 32)), np.zeros(2, dtype=int), "sgdet")


# --------------------------------------------------------------- classify

def _pair_batch(m, seed, n=12):
    rng = np.random.default_rng(seed)
    sf = rng.standard_normal((n, m.dims.pair_width))
    of = rng.standard_normal((n, m.dims.pair_width))
    sb = rng.random((n, 4)) * 0.4
    sb[:, 2:] = sb[:, :2] + 0.3
    ob = rng.random((n, 4)) * 0.4
    ob[:, 2:] = ob[:, :2] + 0.3
    y = rng.integers(0, m.n_predicate_classes, size=n)
    return sf, of, sb, ob, y


def test_pair_probabilities_sum_to_one():
    m = _model(seed=7)
    sf, of, sb, ob, _ = _pair_batch(m, 3)
    logits = m.classify_pairs(sf, of, sb, ob)
    p = N.softmax_temp(logits, 1.0)
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12


def test_subject_object_asymmetry_100_draws():
    asymmetric = 0
    for seed in range(100):
        m = Model(ModelDims(), 20, 15, seed=seed)
        sf, of, sb, ob, _ = _pair_batch(m, seed, n=4)
        a = m.classify_pairs(sf, of, sb, ob)
        b = m.classify_pairs(of, sf, ob, sb)
        if not np.allclose(a, b, atol=1e-9):
            asymmetric += 1
    assert asymmetric >= 99


def test_head_end_to_end_gradcheck():
    # L_pred gradient w.r.t. every head parameter and the predicate
    # classifier; margin-guarded draw keeps finite differences clear of the
    # post-batchnorm relu kink
    m = _model(seed=0)
    best = None
    for draw in range(20):
        cand = _pair_batch(m, 100 + draw)
        sf, of, sb, ob, y = cand
        emb = m.bbox_embed.forward(np.concatenate([sb, ob], axis=1))
        joint = np.concatenate([sf, of, emb], axis=1)
        h = m.head_bn.forward(m.head1.forward(joint), train=True)
        margin = np.abs(h).min()
        if best is None or margin > best[0]:
            best = (margin, cand)
    assert best[0] > 5e-4, "all draws sit on the relu kink"
    sf, of, sb, ob, y = best[1]
    xe = N.SoftmaxCrossEntropy()

    def loss():
        tape = N.Tape()
        z = m.classify_pairs(sf, of, sb, ob, tape, train=True)
        L, _ = xe.forward(z, y, tape)
        return L, tape

    m.zero_grad()
    _, tape = loss()
    m.classify_backward(xe.backward(tape), tape)
    assert len(tape) == 0
    params = [m.bbox_embed.w, m.bbox_embed.b, m.head1.w, m.head1.b,
              m.head_bn.gamma, m.head_bn.beta, m.head2.w, m.head2.b, m.w_pred]
    for p in params:
        def f(v, p=p):
            old = p.value.copy()
            p.value[...] = v
            out = loss()[0]
            p.value[...] = old
            return out

        err = rel_error(p.grad, finite_difference(f, p.value.copy()))
        assert err < 1e-4, "%s: %.3g" % (p.name, err)


def test_eval_forward_batch_size_independent(world):
    m = _model(seed=8)
    sc = D.sample_scene(world, 11)
    feats = np.stack([e.feature for e in sc.entities])
    classes = np.array([e.class_id for e in sc.entities])
    el_full, _, pair_full = m.encode_entities(feats, classes, "predcls")
    for i in range(len(sc.entities)):
        el_one, _, pair_one = m.encode_entities(
            feats[i:i + 1], classes[i:i + 1], "predcls"
        )
        if backend.kernels.NAME == "cy":
            assert el_one[0].tobytes() == el_full[i].tobytes()
            assert pair_one[0].tobytes() == pair_full[i].tobytes()
        else:
            assert np.allclose(el_one[0], el_full[i], rtol=1e-13, atol=1e-15)
            assert np.allclose(pair_one[0], pair_full[i], rtol=1e-13, atol=1e-15)


# ------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path, world):
    m = _model(seed=9)
    # dirty the running stats so state beyond raw params is exercised
    sf, of, sb, ob, y = _pair_batch(m, 5)
    m.classify_pairs(sf, of, sb, ob, train=True)
    path = tmp_path / "model.ckpt"
    m.save(path, extra={"stage": 1, "alternation": 3})
    back, extra = Model.load(path)
    assert extra == {"stage": 1, "alternation": 3}
    for pa, pb in zip(m.parameters(), back.parameters()):
        assert pa.value.tobytes() == pb.value.tobytes(), pa.name
    assert m.head_bn.running_mean.tobytes() == back.head_bn.running_mean.tobytes()
    assert m.head_bn.running_var.tobytes() == back.head_bn.running_var.tobytes()

    sc = D.sample_scene(world, 21)
    pairs = [(r.subject, r.object) for r in sc.relations]
    a = m.forward_scene(sc, pairs, "sgcls")
    b = back.forward_scene(sc, pairs, "sgcls")
    assert a.predicate_probs.tobytes() == b.predicate_probs.tobytes()


def test_checkpoint_checksum_guard(tmp_path):
    m = _model(seed=10)
    path = tmp_path / "model.ckpt"
    m.save(path)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        Model.load(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        Model.load(path)

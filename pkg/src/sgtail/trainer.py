"""Two-stage decoupled training with alternating class-balanced sampling.

Stage 1 trains the whole network under standard random sampling with
per-image loss averaging. Stage 2 freezes the feature extractors and both
embeddings, caches every frozen feature once, and re-learns the classifier
matrices under balanced sampling: the P-step updates the predicate
classifier and a teacher entity classifier on predicate-balanced batches,
the E-step updates the served entity classifier on entity-balanced batches
with a distillation pull toward the teacher. Single-stage baselines and the
ablation strategies share the same plumbing.
"""

import itertools
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import backend
from . import evaluation as E
from . import numerics as N
from . import sampling as S
from .model import Model
from .seeding import derive

STRATEGIES = (
    "single-srs",
    "single-indep-cbs",
    "dt2-predicate-cbs",
    "dt2-indep-cbs",
    "dt2-acbs",
)
TEACHER_MODES = ("pstep", "estep")
GROUP_ORDER = ("semantic", "appearance", "embed", "head",
               "w_ent", "w_teacher", "w_pred")


class TrainAbort(Exception):
    """Raised when a loss goes non-finite; carries the diagnostic path."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    strategy: str = "dt2-acbs"
    alpha: float = 0.2           # distillation weight
    beta: float = 1.0            # teacher entity-loss weight
    tau_s: float = 10.0          # distillation temperature
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 0.5
    lr_decay_every: int = 5
    stage1_epochs: int = 30
    stage1_batch_scenes: int = 64   # ~256 relation instances at desk scale
    max_alternations: int = 30
    patience: int = 5
    entity_per_class: int = S.ENTITY_PER_CLASS
    predicate_per_class: int = S.PREDICATE_PER_CLASS
    val_task: str = "sgcls"
    val_k: int = 100
    teacher_mode: str = "pstep"   # "estep" swaps the teacher role (debug)
    seed: int = 0

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise N.InvalidParameterError(
                "unknown strategy %r (choose from %s)"
                % (self.strategy, ", ".join(STRATEGIES))
            )
        if self.teacher_mode not in TEACHER_MODES:
            raise N.InvalidParameterError(
                "unknown teacher_mode %r" % (self.teacher_mode,)
            )
        if self.alpha < 0 or self.beta < 0:
            raise N.InvalidParameterError("alpha and beta must be >= 0")
        if not self.tau_s > 0:
            raise N.InvalidParameterError("tau_s must be > 0")
        if not self.lr > 0:
            raise N.InvalidParameterError("lr must be > 0")
        for name in ("stage1_epochs", "stage1_batch_scenes",
                     "max_alternations", "patience", "lr_decay_every",
                     "entity_per_class", "predicate_per_class", "val_k"):
            if getattr(self, name) < 1:
                raise N.InvalidParameterError("%s must be >= 1" % name)
        if self.val_task not in E.EVAL_TASKS:
            raise N.InvalidParameterError("val_task must be one of %s"
                                          % (E.EVAL_TASKS,))
        return self

    def to_dict(self):
        return asdict(self)


def lr_at(config, epoch):
    """Stepped decay: lr0 * decay^(epoch // every), epoch counted from 0."""
    return config.lr * config.lr_decay ** (epoch // config.lr_decay_every)


class Adam:
    """Adam over an explicit parameter list; anything else stays frozen."""

    def __init__(self, params, config):
        self.params = list(params)
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.lr = config.lr
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ log

LOG_COLUMNS = (
    "phase", "epoch", "step", "lr",
    "loss_pred", "loss_ent_tea", "loss_ent_stu", "loss_kd",
    "val_mr", "best",
) + tuple("delta_" + g for g in GROUP_ORDER)


class TrainLog:
    """Append-only training log with a fixed CSV column set."""

    def __init__(self):
        self.rows = []

    def add(self, phase, epoch, step=None, **vals):
        row = {"phase": phase, "epoch": epoch, "step": step}
        for key, val in vals.items():
            if key not in LOG_COLUMNS:
                raise KeyError("unknown log column %r" % key)
            if val is not None and not math.isfinite(val):
                raise TrainAbort("non-finite %s at %s epoch %s step %s"
                                 % (key, phase, epoch, step))
            row[key] = val
        self.rows.append(row)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            for row in self.rows:
                cells = []
                for col in LOG_COLUMNS:
                    val = row.get(col)
                    if val is None:
                        cells.append("")
                    elif isinstance(val, float):
                        cells.append(repr(val))
                    else:
                        cells.append(str(val))
                fh.write(",".join(cells) + "\n")

    def val_history(self, phase=None):
        return [
            (r["epoch"], r["val_mr"]) for r in self.rows
            if r.get("val_mr") is not None
            and (phase is None or r["phase"] == phase)
        ]


def _group_snapshot(model):
    return {name: [p.value.copy() for p in params]
            for name, params in model.param_groups().items()}


def _group_deltas(model, snap):
    out = {}
    for name, params in model.param_groups().items():
        sq = 0.0
        for p, old in zip(params, snap[name]):
            diff = p.value - old
            sq += float(np.dot(diff.ravel(), diff.ravel()))
        out["delta_" + name] = math.sqrt(sq)
    return out


def _ensure_finite(model, out_dir, context, **losses):
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if not bad:
        return
    path = None
    if out_dir is not None:
        path = str(out_dir) + "/abort.ckpt"
        model.save(path, extra={"abort": context, "losses":
                                {k: repr(v) for k, v in losses.items()}})
    raise TrainAbort(
        "non-finite loss at %s: %s%s" % (
            context,
            ", ".join("%s=%r" % kv for kv in sorted(bad.items())),
            "; diagnostic checkpoint at %s" % path if path else "",
        ),
        checkpoint_path=path,
    )


# -------------------------------------------------------------- stage 1

def _scene_batch_arrays(scenes, batch):
    """Flatten one SRS batch (whole scenes) into training arrays.

    Entity rows carry weight 1/(n_scenes * |E_i|) and relation rows
    1/(n_scenes * |R_i|), which makes the weighted sums equal the
    per-image double-average of both losses.
    """
    sids = []
    seen = set()
    for ix in batch:
        if ix.scene_id not in seen:
            seen.add(ix.scene_id)
            sids.append(ix.scene_id)
    n_scenes = len(sids)
    feats, classes, ent_w, boxes = [], [], [], []
    subj, obj, preds, rel_w = [], [], [], []
    offset = 0
    for sid in sids:
        scene = scenes[sid]
        n_e, n_r = len(scene.entities), len(scene.relations)
        for e in scene.entities:
            feats.append(e.feature)
            classes.append(e.class_id)
            boxes.append(e.bbox)
            ent_w.append(1.0 / (n_scenes * n_e))
        for r in scene.relations:
            subj.append(offset + r.subject)
            obj.append(offset + r.object)
            preds.append(r.predicate)
            rel_w.append(1.0 / (n_scenes * n_r))
        offset += n_e
    return (
        np.asarray(feats), np.asarray(classes, dtype=np.int64),
        np.asarray(ent_w), np.asarray(boxes),
        np.asarray(subj, dtype=np.int64), np.asarray(obj, dtype=np.int64),
        np.asarray(preds, dtype=np.int64), np.asarray(rel_w),
    )


def _stage1_step(model, arrays, opt):
    feats, classes, ent_w, boxes, subj, obj, preds, rel_w = arrays
    tape = N.Tape()
    ent_logits, teach_logits, pair = model.encode_entities(
        feats, classes, "predcls", tape, train=True
    )
    pred_logits = model.classify_pairs(
        pair[subj], pair[obj], boxes[subj], boxes[obj], tape, train=True
    )
    pred_xent = N.SoftmaxCrossEntropy()
    ent_xent = N.SoftmaxCrossEntropy()
    loss_pred, _ = pred_xent.forward(pred_logits, preds, tape, weights=rel_w)
    loss_ent, _ = ent_xent.forward(ent_logits, classes, tape, weights=ent_w)

    model.zero_grad()
    d_ent = ent_xent.backward(tape)
    d_pred = pred_xent.backward(tape)
    d_subj, d_obj = model.classify_backward(d_pred, tape)
    d_pair = np.zeros_like(pair)
    np.add.at(d_pair, subj, d_subj)
    np.add.at(d_pair, obj, d_obj)
    model.encode_backward(d_ent, np.zeros_like(teach_logits), d_pair, tape)
    opt.step()
    return loss_ent, loss_pred


def stage1(model, scenes, config, log=None, on_epoch=None, out_dir=None):
    """SRS training of everything except the teacher matrix."""
    params = [p for p in model.parameters() if p is not model.w_teacher]
    opt = Adam(params, config)
    for epoch in range(config.stage1_epochs):
        opt.lr = lr_at(config, epoch)
        snap = _group_snapshot(model)
        plan = S.plan_srs(scenes, config.stage1_batch_scenes,
                          derive(config.seed, "stage1", epoch))
        for step, batch in enumerate(plan.batches):
            arrays = _scene_batch_arrays(scenes, batch)
            loss_ent, loss_pred = _stage1_step(model, arrays, opt)
            _ensure_finite(model, out_dir,
                           "stage1 epoch %d step %d" % (epoch, step),
                           loss_ent=loss_ent, loss_pred=loss_pred)
            if log is not None:
                log.add("stage1", epoch, step, lr=opt.lr,
                        loss_pred=loss_pred, loss_ent_stu=loss_ent)
        if log is not None:
            log.add("stage1-epoch", epoch, lr=opt.lr,
                    **_group_deltas(model, snap))
        if on_epoch is not None:
            on_epoch(epoch)
    return model


# --------------------------------------------- single-stage balanced run

def _gather_entities(scenes, batch):
    feats = np.asarray([scenes[ix.scene_id].entities[ix.slot].feature
                        for ix in batch])
    classes = np.asarray([scenes[ix.scene_id].entities[ix.slot].class_id
                          for ix in batch], dtype=np.int64)
    return feats, classes


def _gather_relations(scenes, batch):
    sf, sc, sb, of, oc, ob, preds = [], [], [], [], [], [], []
    for ix in batch:
        scene = scenes[ix.scene_id]
        rel = scene.relations[ix.slot]
        s, o = scene.entities[rel.subject], scene.entities[rel.object]
        sf.append(s.feature)
        sc.append(s.class_id)
        sb.append(s.bbox)
        of.append(o.feature)
        oc.append(o.class_id)
        ob.append(o.bbox)
        preds.append(rel.predicate)
    return (np.asarray(sf), np.asarray(sc, dtype=np.int64), np.asarray(sb),
            np.asarray(of), np.asarray(oc, dtype=np.int64), np.asarray(ob),
            np.asarray(preds, dtype=np.int64))


def _indep_entity_step(model, scenes, batch, opt):
    feats, classes = _gather_entities(scenes, batch)
    tape = N.Tape()
    ent_logits, teach_logits, pair = model.encode_entities(
        feats, classes, "predcls", tape, train=True
    )
    xent = N.SoftmaxCrossEntropy()
    loss, _ = xent.forward(ent_logits, classes, tape)
    model.zero_grad()
    d_ent = xent.backward(tape)
    model.encode_backward(d_ent, np.zeros_like(teach_logits),
                          np.zeros_like(pair), tape)
    opt.step()
    return loss


def _indep_relation_step(model, scenes, batch, opt):
    sf, sc, sb, of, oc, ob, preds = _gather_relations(scenes, batch)
    tape = N.Tape()
    _, s_tl, s_pair = model.encode_entities(sf, sc, "predcls", tape, train=True)
    _, o_tl, o_pair = model.encode_entities(of, oc, "predcls", tape, train=True)
    pred_logits = model.classify_pairs(s_pair, o_pair, sb, ob, tape, train=True)
    xent = N.SoftmaxCrossEntropy()
    loss, _ = xent.forward(pred_logits, preds, tape)
    model.zero_grad()
    d_pred = xent.backward(tape)
    d_subj, d_obj = model.classify_backward(d_pred, tape)
    zeros = np.zeros_like(s_tl)
    model.encode_backward(zeros, zeros, d_obj, tape)   # object encoded last
    model.encode_backward(zeros, zeros, d_subj, tape)
    opt.step()
    return loss


def _run_single_indep(model, scenes, config, log, on_epoch, out_dir):
    groups = model.param_groups()
    opt_e = Adam(groups["semantic"] + [model.w_ent], config)
    opt_p = Adam(groups["appearance"] + groups["embed"] + groups["head"]
                 + [model.w_pred], config)
    C, P = model.n_entity_classes, model.n_predicate_classes
    for epoch in range(config.stage1_epochs):
        opt_e.lr = opt_p.lr = lr_at(config, epoch)
        snap = _group_snapshot(model)
        p_plan = S.plan_cbs(scenes, P, "predicate", config.predicate_per_class,
                            derive(config.seed, "indep-p", epoch))
        e_plan = S.plan_cbs(scenes, C, "entity", config.entity_per_class,
                            derive(config.seed, "indep-e", epoch))
        step = 0
        for p_batch, e_batch in itertools.zip_longest(p_plan.batches,
                                                      e_plan.batches):
            loss_pred = loss_ent = None
            if p_batch is not None:
                loss_pred = _indep_relation_step(model, scenes, p_batch, opt_p)
                _ensure_finite(model, out_dir,
                               "indep epoch %d step %d" % (epoch, step),
                               loss_pred=loss_pred)
            if e_batch is not None:
                loss_ent = _indep_entity_step(model, scenes, e_batch, opt_e)
                _ensure_finite(model, out_dir,
                               "indep epoch %d step %d" % (epoch, step),
                               loss_ent=loss_ent)
            if log is not None:
                log.add("indep", epoch, step, lr=opt_e.lr,
                        loss_pred=loss_pred, loss_ent_stu=loss_ent)
            step += 1
        if log is not None:
            log.add("indep-epoch", epoch, lr=opt_e.lr,
                    **_group_deltas(model, snap))
        if on_epoch is not None:
            on_epoch(epoch)
    return model


# -------------------------------------------------------------- stage 2

class FeatureCache:
    """Frozen-extractor features for a scene list, flattened per instance.

    Valid only while the trunks, embeddings and head stay frozen; built with
    ground-truth class embeddings (the training-time input) and eval-mode
    batchnorm, so every array is a constant of stage 2.
    """

    def __init__(self, model, scenes):
        self.scenes = scenes
        self.model = model
        feats, classes, boxes = [], [], []
        ent_offsets = []
        off = 0
        for scene in scenes:
            ent_offsets.append(off)
            for e in scene.entities:
                feats.append(e.feature)
                classes.append(e.class_id)
                boxes.append(e.bbox)
            off += len(scene.entities)
        self.ent_offset = np.asarray(ent_offsets, dtype=np.int64)
        self.ent_cls = np.asarray(classes, dtype=np.int64)
        self.boxes = np.asarray(boxes)
        feats = np.asarray(feats)

        subj, obj, preds, rel_offsets = [], [], [], []
        roff = 0
        for sid, scene in enumerate(scenes):
            rel_offsets.append(roff)
            base = self.ent_offset[sid]
            for r in scene.relations:
                subj.append(base + r.subject)
                obj.append(base + r.object)
                preds.append(r.predicate)
            roff += len(scene.relations)
        self.rel_offset = np.asarray(rel_offsets, dtype=np.int64)
        self.rel_sub = np.asarray(subj, dtype=np.int64)
        self.rel_obj = np.asarray(obj, dtype=np.int64)
        self.rel_pred = np.asarray(preds, dtype=np.int64)

        self.sem = model.semantic_features(feats)
        _, _, pair = model.encode_entities(feats, self.ent_cls, "predcls")
        self.pair_gt = pair
        if model.dims.use_appearance:
            self.app = pair[:, :model.dims.appearance_width]
        else:
            self.app = None
        self.f_so = model.predicate_features(
            pair[self.rel_sub], pair[self.rel_obj],
            self.boxes[self.rel_sub], self.boxes[self.rel_obj],
        )

    def entity_rows(self, batch):
        return np.asarray(
            [self.ent_offset[ix.scene_id] + ix.slot for ix in batch],
            dtype=np.int64,
        )

    def relation_rows(self, batch):
        return np.asarray(
            [self.rel_offset[ix.scene_id] + ix.slot for ix in batch],
            dtype=np.int64,
        )

    # --------------------------------------------------- cached inference

    def forward_results(self, task):
        """Per-scene ForwardResult list from the cached features and the
        model's current classifier matrices."""
        from .model import ForwardResult

        kern = backend.kernels
        ent_logits = kern.matmul(self.sem, self.model.w_ent.value)
        teach_logits = kern.matmul(self.sem, self.model.w_teacher.value)
        if task == "sgcls":
            ids = np.argmax(ent_logits, axis=1)
            embed = (self.model.class_embed.w.value[ids]
                     + self.model.class_embed.b.value)
            pair = (np.concatenate([self.app, embed], axis=1)
                    if self.app is not None else embed)
            f_so = self.model.predicate_features(
                pair[self.rel_sub], pair[self.rel_obj],
                self.boxes[self.rel_sub], self.boxes[self.rel_obj],
            )
        else:
            f_so = self.f_so
        pred_logits = kern.matmul(f_so, self.model.w_pred.value)
        ent_probs = N.softmax_temp(ent_logits, 1.0)
        teach_probs = N.softmax_temp(teach_logits, 1.0)
        pred_probs = N.softmax_temp(pred_logits, 1.0)
        out = []
        for sid, scene in enumerate(self.scenes):
            e0 = self.ent_offset[sid]
            e1 = e0 + len(scene.entities)
            r0 = self.rel_offset[sid]
            r1 = r0 + len(scene.relations)
            out.append(ForwardResult(
                entity_probs=ent_probs[e0:e1],
                teacher_probs=teach_probs[e0:e1],
                pairs=[(r.subject, r.object) for r in scene.relations],
                predicate_probs=pred_probs[r0:r1],
            ))
        return out


def validation_score(model, scenes, config, train_counts):
    """Validation metric (default SGCls mR@100) via one batched forward."""
    cache = FeatureCache(model, scenes)
    results = cache.forward_results(config.val_task)
    it = iter(results)
    report = E.evaluate(lambda s, p: next(it), scenes, config.val_task,
                        (config.val_k,), train_counts)
    return report.mean_recall[config.val_k]


def p_step(model, cache, plan, opt, config, log=None, epoch=None,
           out_dir=None, train_student=False, distill=False):
    """One predicate-balanced pass updating {W^p, W^t} (Algorithm step P).

    With train_student=True (ablations), the entity loss drives W^e instead
    of the teacher; distill=True additionally pulls the student toward the
    frozen teacher (swapped-teacher mode only).
    """
    sums = {"loss_pred": 0.0, "loss_ent": 0.0, "loss_kd": 0.0}
    cls = model.ent_cls if train_student else model.teacher_cls
    for step, batch in enumerate(plan.batches):
        rows = cache.relation_rows(batch)
        ent_rows = np.concatenate([cache.rel_sub[rows], cache.rel_obj[rows]])
        tape = N.Tape()
        pred_logits = model.pred_cls.forward(cache.f_so[rows], tape)
        pred_xent = N.SoftmaxCrossEntropy()
        loss_pred, _ = pred_xent.forward(pred_logits, cache.rel_pred[rows],
                                         tape)
        sem = cache.sem[ent_rows]
        ent_logits = cls.forward(sem, tape)
        ent_xent = N.SoftmaxCrossEntropy()
        loss_ent, _ = ent_xent.forward(ent_logits, cache.ent_cls[ent_rows],
                                       tape)
        loss_kd = 0.0
        kd = None
        if distill and train_student and config.alpha > 0:
            teacher_probs = N.softmax_temp(
                backend.kernels.matmul(sem, model.w_teacher.value),
                config.tau_s,
            )
            kd = N.SoftmaxKL()
            loss_kd, _ = kd.forward(ent_logits, teacher_probs, tape,
                                    tau=config.tau_s)
        model.zero_grad()
        d_ent = np.zeros_like(ent_logits)
        if kd is not None:
            d_ent += config.alpha * kd.backward(tape)
        d_ent += config.beta * ent_xent.backward(tape)
        cls.backward(d_ent, tape)
        model.pred_cls.backward(pred_xent.backward(tape), tape)
        opt.step()
        _ensure_finite(model, out_dir, "p-step epoch %s step %d"
                       % (epoch, step), loss_pred=loss_pred,
                       loss_ent=loss_ent, loss_kd=loss_kd)
        sums["loss_pred"] += loss_pred
        sums["loss_ent"] += loss_ent
        sums["loss_kd"] += loss_kd
        if log is not None:
            key = "loss_ent_stu" if train_student else "loss_ent_tea"
            log.add("p", epoch, step, lr=opt.lr, loss_pred=loss_pred,
                    loss_kd=loss_kd if kd is not None else None,
                    **{key: loss_ent})
    n = max(1, len(plan.batches))
    return {k: v / n for k, v in sums.items()}


def e_step(model, cache, plan, opt, config, log=None, epoch=None,
           out_dir=None, train_teacher=False, distill=True):
    """One entity-balanced pass updating {W^e} (Algorithm step E).

    Distillation pulls the student toward the frozen teacher at temperature
    tau_s. With train_teacher=True (swapped teacher mode), the pass instead
    gives the teacher plain balanced supervision and no KD.
    """
    sums = {"loss_ent": 0.0, "loss_kd": 0.0}
    cls = model.teacher_cls if train_teacher else model.ent_cls
    other = model.w_ent if train_teacher else model.w_teacher
    for step, batch in enumerate(plan.batches):
        rows = cache.entity_rows(batch)
        sem = cache.sem[rows]
        tape = N.Tape()
        logits = cls.forward(sem, tape)
        xent = N.SoftmaxCrossEntropy()
        loss_ent, _ = xent.forward(logits, cache.ent_cls[rows], tape)
        loss_kd = 0.0
        kd = None
        if distill and not train_teacher and config.alpha > 0:
            teacher_probs = N.softmax_temp(
                backend.kernels.matmul(sem, other.value), config.tau_s
            )
            kd = N.SoftmaxKL()
            loss_kd, _ = kd.forward(logits, teacher_probs, tape,
                                    tau=config.tau_s)
        model.zero_grad()
        d = np.zeros_like(logits)
        if kd is not None:
            d += config.alpha * kd.backward(tape)
        d += xent.backward(tape)
        cls.backward(d, tape)
        opt.step()
        _ensure_finite(model, out_dir, "e-step epoch %s step %d"
                       % (epoch, step), loss_ent=loss_ent, loss_kd=loss_kd)
        sums["loss_ent"] += loss_ent
        sums["loss_kd"] += loss_kd
        if log is not None:
            key = "loss_ent_tea" if train_teacher else "loss_ent_stu"
            log.add("e", epoch, step, lr=opt.lr,
                    loss_kd=loss_kd if kd is not None else None,
                    **{key: loss_ent})
    n = max(1, len(plan.batches))
    return {k: v / n for k, v in sums.items()}


def _snapshot_classifiers(model):
    return {
        "w_ent": model.w_ent.value.copy(),
        "w_teacher": model.w_teacher.value.copy(),
        "w_pred": model.w_pred.value.copy(),
    }


def _restore_classifiers(model, snap):
    model.w_ent.value[...] = snap["w_ent"]
    model.w_teacher.value[...] = snap["w_teacher"]
    model.w_pred.value[...] = snap["w_pred"]


def run_stage2(model, train_scenes, val_scenes, config, train_counts,
               log=None, out_dir=None):
    """Balanced classifier re-learning over the frozen stage-1 features.

    Alternates per strategy, scores validation after every alternation
    (and once at entry), early-stops on patience, and restores the best
    classifier checkpoint into the model.
    """
    model.w_teacher.value[...] = model.w_ent.value
    cache = FeatureCache(model, train_scenes)
    C, P = model.n_entity_classes, model.n_predicate_classes
    strategy = config.strategy
    swapped = config.teacher_mode == "estep" and strategy == "dt2-acbs"

    if strategy == "dt2-acbs":
        p_params = ([model.w_pred, model.w_ent] if swapped
                    else [model.w_pred, model.w_teacher])
        e_params = [model.w_teacher] if swapped else [model.w_ent]
    elif strategy == "dt2-predicate-cbs":
        p_params = [model.w_pred, model.w_ent]
        e_params = []
    elif strategy == "dt2-indep-cbs":
        p_params = [model.w_pred]
        e_params = [model.w_ent]
    else:
        raise N.InvalidParameterError("not a stage-2 strategy: %r" % strategy)
    opt_p = Adam(p_params, config)
    opt_e = Adam(e_params, config) if e_params else None

    best_mr = validation_score(model, val_scenes, config, train_counts)
    best_snap = _snapshot_classifiers(model)
    best_alt = -1
    if log is not None:
        log.add("stage2-entry", -1, val_mr=best_mr, best=1)
    stale = 0
    seed = derive(config.seed, "stage2")
    for alt in range(config.max_alternations):
        lr = lr_at(config, alt)
        snap = _group_snapshot(model)
        p_plan, e_plan = S.plan_acbs(
            train_scenes, C, P, alt, seed,
            entity_per_class=config.entity_per_class,
            predicate_per_class=config.predicate_per_class,
        )
        if strategy == "dt2-acbs":
            opt_p.lr = lr
            p_step(model, cache, p_plan, opt_p, config, log, alt, out_dir,
                   train_student=swapped, distill=swapped)
            opt_e.lr = lr
            e_step(model, cache, e_plan, opt_e, config, log, alt, out_dir,
                   train_teacher=swapped, distill=not swapped)
        elif strategy == "dt2-predicate-cbs":
            opt_p.lr = lr
            p_step(model, cache, p_plan, opt_p, config, log, alt, out_dir,
                   train_student=True)
        else:  # dt2-indep-cbs
            opt_p.lr = lr
            p_step(model, cache, p_plan, opt_p, config, log, alt, out_dir)
            opt_e.lr = lr
            e_step(model, cache, e_plan, opt_e, config, log, alt, out_dir,
                   distill=False)
        val_mr = validation_score(model, val_scenes, config, train_counts)
        improved = val_mr > best_mr
        if improved:
            best_mr = val_mr
            best_snap = _snapshot_classifiers(model)
            best_alt = alt
            stale = 0
        else:
            stale += 1
        if log is not None:
            log.add("stage2", alt, lr=lr, val_mr=val_mr,
                    best=int(improved), **_group_deltas(model, snap))
        if out_dir is not None:
            model.save(str(out_dir) + "/alt-%03d.ckpt" % alt,
                       extra={"alternation": alt, "val_mr": val_mr})
        if stale >= config.patience:
            break
    _restore_classifiers(model, best_snap)
    return best_mr, best_alt


def run(config, dims, n_entity_classes, n_predicate_classes,
        train_scenes, val_scenes, out_dir=None):
    """Train one strategy end to end; returns (model, log, best val mR)."""
    config.validate()
    model = Model(dims, n_entity_classes, n_predicate_classes, config.seed)
    log = TrainLog()
    train_counts = [0] * n_predicate_classes
    for scene in train_scenes:
        for r in scene.relations:
            train_counts[r.predicate] += 1

    if config.strategy in ("single-srs", "single-indep-cbs"):
        best = {"mr": -1.0, "state": None, "epoch": -1}

        def on_epoch(epoch):
            mr = validation_score(model, val_scenes, config, train_counts)
            improved = mr > best["mr"]
            if improved:
                best["mr"] = mr
                best["state"] = (
                    [p.value.copy() for p in model.parameters()],
                    model.head_bn.running_mean.copy(),
                    model.head_bn.running_var.copy(),
                )
                best["epoch"] = epoch
            log.add("val", epoch, val_mr=mr, best=int(improved))

        if config.strategy == "single-srs":
            stage1(model, train_scenes, config, log, on_epoch, out_dir)
        else:
            _run_single_indep(model, train_scenes, config, log, on_epoch,
                              out_dir)
        values, rmean, rvar = best["state"]
        for p, v in zip(model.parameters(), values):
            p.value[...] = v
        model.head_bn.running_mean[...] = rmean
        model.head_bn.running_var[...] = rvar
        best_mr = best["mr"]
    else:
        stage1(model, train_scenes, config, log, out_dir=out_dir)
        best_mr, _ = run_stage2(model, train_scenes, val_scenes, config,
                                train_counts, log, out_dir)

    if out_dir is not None:
        model.save(str(out_dir) + "/best.ckpt",
                   extra={"strategy": config.strategy, "val_mr": best_mr,
                          "config": config.to_dict()})
        log.to_csv(str(out_dir) + "/trainlog.csv")
    return model, log, best_mr

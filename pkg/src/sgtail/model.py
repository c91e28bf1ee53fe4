"""The two-branch relation network and its classifier matrices.

Entities pass through a semantic trunk (two dense+relu) whose output feeds
the entity classifier, its teacher twin, and an argmax/ground-truth one-hot
embedding; an appearance trunk of the same shape maps the raw feature
directly. Ordered pairs concatenate both entities' branch outputs with a
box embedding and run a dense -> batchnorm -> relu -> dense -> tanh head
into the predicate classifier. All gradients are handwritten via the
numerics layers; the argmax one-hot is a constant, so no gradient crosses
it.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as N
from .seeding import rng as seeded_rng

CHECKPOINT_MAGIC = b"SGT1"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelDims:
    backbone_width: int = 32
    semantic_width: int = 16
    appearance_width: int = 16
    bbox_embed_width: int = 8
    predicate_feat_width: int = 32
    use_appearance: bool = True

    def __post_init__(self):
        for name in ("backbone_width", "semantic_width", "appearance_width",
                     "bbox_embed_width", "predicate_feat_width"):
            if getattr(self, name) < 1:
                raise ValueError("%s must be positive" % name)

    @property
    def pair_width(self):
        if self.use_appearance:
            return self.appearance_width + self.semantic_width
        return self.semantic_width

    @property
    def joint_width(self):
        return 2 * self.pair_width + self.bbox_embed_width

    @property
    def head_hidden_width(self):
        return 2 * self.predicate_feat_width


def full_scale_dims():
    """Full-scale preset: 128-wide branches, 8-wide box embedding, so the
    joint pair vector is 520 wide and the predicate feature 128."""
    return ModelDims(backbone_width=2048, semantic_width=128,
                     appearance_width=128, bbox_embed_width=8,
                     predicate_feat_width=128)


@dataclass
class ForwardResult:
    """Per-scene inference output: probability tables plus pair bookkeeping."""
    entity_probs: np.ndarray     # (n_entities, C)
    teacher_probs: np.ndarray    # (n_entities, C)
    pairs: list                  # ordered (subject_slot, object_slot)
    predicate_probs: np.ndarray  # (n_pairs, P)


def _fan_in_uniform(rng, shape):
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Network parameters plus batched forward/backward passes."""

    def __init__(self, dims, n_entity_classes, n_predicate_classes, seed):
        self.dims = dims
        self.n_entity_classes = int(n_entity_classes)
        self.n_predicate_classes = int(n_predicate_classes)
        self.seed = int(seed)
        rng = seeded_rng(seed, "init")
        d = dims
        C, P = self.n_entity_classes, self.n_predicate_classes

        def lin(name, d_in, d_out, bias=True):
            w = N.Param(name + ".w", _fan_in_uniform(rng, (d_in, d_out)))
            b = N.Param(name + ".b", np.zeros(d_out)) if bias else None
            return N.Linear(w, b)

        self.sem1 = lin("sem1", d.backbone_width, d.semantic_width)
        self.sem2 = lin("sem2", d.semantic_width, d.semantic_width)
        self.w_ent = N.Param("w_ent", _fan_in_uniform(rng, (d.semantic_width, C)))
        self.ent_cls = N.Linear(self.w_ent)
        self.w_teacher = N.Param("w_teacher", self.w_ent.value.copy())
        self.teacher_cls = N.Linear(self.w_teacher)
        self.class_embed = lin("class_embed", C, d.semantic_width)
        if d.use_appearance:
            self.app1 = lin("app1", d.backbone_width, d.appearance_width)
            self.app2 = lin("app2", d.appearance_width, d.appearance_width)
        else:
            self.app1 = self.app2 = None
        self.bbox_embed = lin("bbox_embed", 8, d.bbox_embed_width)
        self.head1 = lin("head1", d.joint_width, d.head_hidden_width)
        self.head_bn = N.BatchNorm(
            N.Param("head_bn.gamma", np.ones(d.head_hidden_width)),
            N.Param("head_bn.beta", np.zeros(d.head_hidden_width)),
        )
        self.head2 = lin("head2", d.head_hidden_width, d.predicate_feat_width)
        self.w_pred = N.Param("w_pred", _fan_in_uniform(rng, (d.predicate_feat_width, P)))
        self.pred_cls = N.Linear(self.w_pred)
        self.relu = N.Relu()
        self.tanh = N.Tanh()

    # --------------------------------------------------------- parameters

    def param_groups(self):
        """Named parameter groups, the unit of freezing and of step isolation."""
        groups = {
            "semantic": [self.sem1.w, self.sem1.b, self.sem2.w, self.sem2.b],
            "appearance": (
                [self.app1.w, self.app1.b, self.app2.w, self.app2.b]
                if self.app1 is not None else []
            ),
            "embed": [self.class_embed.w, self.class_embed.b,
                      self.bbox_embed.w, self.bbox_embed.b],
            "head": [self.head1.w, self.head1.b,
                     self.head_bn.gamma, self.head_bn.beta,
                     self.head2.w, self.head2.b],
            "w_ent": [self.w_ent],
            "w_teacher": [self.w_teacher],
            "w_pred": [self.w_pred],
        }
        return groups

    def parameters(self):
        """All trainable parameters in a fixed, documented order."""
        groups = self.param_groups()
        out = []
        for name in ("semantic", "appearance", "embed", "head",
                     "w_ent", "w_teacher", "w_pred"):
            out.extend(groups[name])
        return out

    def parameter_count(self):
        return int(sum(p.value.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def group_hashes(self):
        """sha256 per parameter group; running stats count as head state."""
        hashes = {}
        for name, params in self.param_groups().items():
            h = hashlib.sha256()
            for p in params:
                h.update(p.value.tobytes())
            if name == "head":
                h.update(self.head_bn.running_mean.tobytes())
                h.update(self.head_bn.running_var.tobytes())
            hashes[name] = h.hexdigest()
        return hashes

    # ------------------------------------------------------------ forward

    def _check_backbone(self, feats):
        feats = N.as_matrix(feats, "entity features")
        if feats.shape[1] != self.dims.backbone_width:
            raise N.ShapeError(
                "feature width %d != backbone width %d"
                % (feats.shape[1], self.dims.backbone_width)
            )
        return feats

    def semantic_features(self, feats):
        """Semantic-trunk output rows (inference only; no tape).

        These feed both entity classifiers, so with the trunk frozen the
        classifier logits are just this matrix times W^e or W^t.
        """
        feats = self._check_backbone(feats)
        h = self.relu.forward(self.sem1.forward(feats))
        return self.relu.forward(self.sem2.forward(h))

    def encode_entities(self, feats, classes, mode, tape=None, train=False):
        """Batched entity encoding.

        Returns (entity logits, teacher logits, pair features). In predcls
        mode the one-hot fed to the class embedding is the ground truth; in
        sgcls mode it is the argmax of the entity logits. Either way it is a
        constant: no gradient flows through it.
        """
        if mode not in ("predcls", "sgcls"):
            raise ValueError("unknown mode %r" % mode)
        feats = self._check_backbone(feats)
        h = self.relu.forward(self.sem1.forward(feats, tape), tape)
        sem_pre = self.relu.forward(self.sem2.forward(h, tape), tape)
        ent_logits = self.ent_cls.forward(sem_pre, tape)
        teach_logits = self.teacher_cls.forward(sem_pre, tape)

        if mode == "predcls":
            ids = np.asarray(classes, dtype=np.int64)
        else:
            ids = np.argmax(ent_logits, axis=1)
        onehot = np.zeros((feats.shape[0], self.n_entity_classes))
        onehot[np.arange(feats.shape[0]), ids] = 1.0
        f_sem = self.class_embed.forward(onehot, tape)

        if self.dims.use_appearance:
            a = self.relu.forward(self.app1.forward(feats, tape), tape)
            f_app = self.relu.forward(self.app2.forward(a, tape), tape)
            pair_feat = np.concatenate([f_app, f_sem], axis=1)
        else:
            pair_feat = f_sem
        return ent_logits, teach_logits, pair_feat

    def encode_backward(self, d_ent_logits, d_teach_logits, d_pair, tape):
        """Mirror of encode_entities; accumulates grads, returns nothing."""
        A = self.dims.appearance_width
        if self.dims.use_appearance:
            d_app = d_pair[:, :A]
            d_sem_embed = d_pair[:, A:]
            d = self.relu.backward(d_app, tape)
            d = self.app2.backward(d, tape)
            d = self.relu.backward(d, tape)
            self.app1.backward(d, tape)
        else:
            d_sem_embed = d_pair
        self.class_embed.backward(d_sem_embed, tape)  # one-hot input grad dropped
        d_pre = self.teacher_cls.backward(d_teach_logits, tape)
        d_pre = d_pre + self.ent_cls.backward(d_ent_logits, tape)
        d = self.relu.backward(d_pre, tape)
        d = self.sem2.backward(d, tape)
        d = self.relu.backward(d, tape)
        self.sem1.backward(d, tape)

    def predicate_features(self, subj_feat, obj_feat, subj_boxes, obj_boxes,
                           tape=None, train=False):
        """Pre-classifier pair features f_so; predicate logits are
        f_so times W^p."""
        subj_feat = N.as_matrix(subj_feat, "subject features")
        obj_feat = N.as_matrix(obj_feat, "object features")
        if subj_feat.shape != obj_feat.shape or subj_feat.shape[1] != self.dims.pair_width:
            raise N.ShapeError("pair feature widths do not match the dims")
        boxes = np.concatenate(
            [np.asarray(subj_boxes, dtype=np.float64),
             np.asarray(obj_boxes, dtype=np.float64)], axis=1
        )
        if boxes.shape != (subj_feat.shape[0], 8):
            raise N.ShapeError("expected 4 coordinates per box")
        emb = self.bbox_embed.forward(boxes, tape)
        joint = np.concatenate([subj_feat, obj_feat, emb], axis=1)
        h = self.head1.forward(joint, tape)
        h = self.head_bn.forward(h, tape, train=train)
        h = self.relu.forward(h, tape)
        h = self.head2.forward(h, tape)
        return self.tanh.forward(h, tape)

    def classify_pairs(self, subj_feat, obj_feat, subj_boxes, obj_boxes,
                       tape=None, train=False):
        """Predicate logits for ordered pairs of encoded entities."""
        f_so = self.predicate_features(subj_feat, obj_feat, subj_boxes,
                                       obj_boxes, tape, train)
        return self.pred_cls.forward(f_so, tape)

    def classify_backward(self, d_logits, tape):
        """Mirror of classify_pairs; returns (d_subject, d_object) pair grads."""
        d = self.pred_cls.backward(d_logits, tape)
        d = self.tanh.backward(d, tape)
        d = self.head2.backward(d, tape)
        d = self.relu.backward(d, tape)
        d = self.head_bn.backward(d, tape)
        d_joint = self.head1.backward(d, tape)
        W = self.dims.pair_width
        d_emb = d_joint[:, 2 * W:]
        self.bbox_embed.backward(d_emb, tape)  # box coordinates are data
        return d_joint[:, :W], d_joint[:, W:2 * W]

    def forward_scene(self, scene, pairs, task, tape=None, train=False):
        """ForwardResult over the given ordered (subject, object) slot pairs."""
        feats = np.stack([e.feature for e in scene.entities])
        classes = np.array([e.class_id for e in scene.entities])
        ent_logits, teach_logits, pair_feat = self.encode_entities(
            feats, classes, task, tape, train
        )
        boxes = np.array([e.bbox for e in scene.entities])
        s_idx = np.array([s for s, _ in pairs], dtype=np.int64)
        o_idx = np.array([o for _, o in pairs], dtype=np.int64)
        pred_logits = self.classify_pairs(
            pair_feat[s_idx], pair_feat[o_idx], boxes[s_idx], boxes[o_idx],
            tape, train
        )
        return ForwardResult(
            entity_probs=N.softmax_temp(ent_logits, 1.0),
            teacher_probs=N.softmax_temp(teach_logits, 1.0),
            pairs=list(pairs),
            predicate_probs=N.softmax_temp(pred_logits, 1.0),
        )

    # -------------------------------------------------------- checkpoints

    def _state_arrays(self):
        arrays = [(p.name, p.value) for p in self.parameters()]
        arrays.append(("head_bn.running_mean", self.head_bn.running_mean))
        arrays.append(("head_bn.running_var", self.head_bn.running_var))
        return arrays

    def save(self, path, extra=None):
        """Single-file checkpoint: magic, JSON header, float64 LE blob."""
        arrays = self._state_arrays()
        blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for _, a in arrays)
        header = {
            "format_version": CHECKPOINT_VERSION,
            "dims": asdict(self.dims),
            "n_entity_classes": self.n_entity_classes,
            "n_predicate_classes": self.n_predicate_classes,
            "seed": self.seed,
            "order": [name for name, _ in arrays],
            "shapes": {name: list(a.shape) for name, a in arrays},
            "checksum": hashlib.sha256(blob).hexdigest(),
            "extra": extra or {},
        }
        payload = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
            fh.write(blob)

    @classmethod
    def load(cls, path):
        """Load a checkpoint; returns (model, extra-metadata dict)."""
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError("bad magic %r" % magic)
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(int(hlen)).decode("utf-8"))
            blob = fh.read()
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError("unsupported checkpoint version")
        if hashlib.sha256(blob).hexdigest() != header["checksum"]:
            raise CheckpointError("checksum mismatch")
        dims = ModelDims(**header["dims"])
        model = cls(dims, header["n_entity_classes"],
                    header["n_predicate_classes"], header["seed"])
        offset = 0
        arrays = dict(model._state_arrays())
        for name in header["order"]:
            shape = tuple(header["shapes"][name])
            if name not in arrays or arrays[name].shape != shape:
                raise CheckpointError("unexpected array %s %r" % (name, shape))
            size = int(np.prod(shape)) * 8
            data = np.frombuffer(blob[offset:offset + size], dtype="<f8")
            if data.size * 8 != size:
                raise CheckpointError("truncated blob at %s" % name)
            arrays[name][...] = data.reshape(shape)
            offset += size
        if offset != len(blob):
            raise CheckpointError("trailing bytes in checkpoint blob")
        return model, header["extra"]


def expected_parameter_count(dims, n_entity_classes, n_predicate_classes):
    """Closed-form trainable parameter count for the given dims."""
    d, C, P = dims, n_entity_classes, n_predicate_classes
    total = d.backbone_width * d.semantic_width + d.semantic_width
    total += d.semantic_width * d.semantic_width + d.semantic_width
    if d.use_appearance:
        total += d.backbone_width * d.appearance_width + d.appearance_width
        total += d.appearance_width * d.appearance_width + d.appearance_width
    total += C * d.semantic_width + d.semantic_width          # class embed
    total += 8 * d.bbox_embed_width + d.bbox_embed_width      # box embed
    total += d.joint_width * d.head_hidden_width + d.head_hidden_width
    total += 2 * d.head_hidden_width                          # bn gamma/beta
    total += d.head_hidden_width * d.predicate_feat_width + d.predicate_feat_width
    total += d.semantic_width * C                              # entity classifier
    total += d.semantic_width * C                              # teacher
    total += d.predicate_feat_width * P                        # predicate classifier
    return total

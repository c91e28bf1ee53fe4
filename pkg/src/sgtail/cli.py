"""Command-line surface: corpus generation, training, evaluation, reports.

Subcommands
    gen-data   synthesize a train/val/test corpus with manifests
    train      run one training strategy, writing checkpoints and a log
    eval       score a checkpoint (or the ground-truth oracle) on a split
    report     merge evaluation reports into a comparison table

Every command accepts ``--config FILE`` (JSON, same keys as the resolved
config it writes) and explicit flags override the file. Each run writes its
resolved config beside its outputs, so any command can be replayed exactly
with ``--config <out>/<command>-config.json``. Exit codes: 0 success,
2 usage or configuration error, 3 numerical abort. The only environment
variable is SGTAIL_LOG (debug/info/warning/error), which controls stderr
log verbosity and nothing else.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, asdict

import numpy as np

from . import datagen as D
from . import evaluation as E
from . import numerics as N
from . import trainer as T
from .model import Model, ModelDims, ForwardResult, CheckpointError
from .seeding import derive

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORT = 3

SPLITS = ("train", "val", "test")

log = logging.getLogger("sgtail.cli")


class UsageError(Exception):
    """Configuration or input problem; maps to exit code 2."""


# ------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    """Everything a training run needs, serializable to one JSON file.

    The master seed overrides the nested TrainConfig seed on resolve, so
    one value drives corpus sampling plans, init and alternation order.
    """

    corpus_dir: str = "corpus"
    out_dir: str = "run"
    seed: int = 0
    ks: tuple = (20, 50, 100)
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    dims: ModelDims = field(default_factory=ModelDims)

    def resolve(self):
        self.ks = tuple(int(k) for k in self.ks)
        if not self.ks or min(self.ks) < 1:
            raise UsageError("ks must be positive integers")
        self.train.seed = int(self.seed)
        self.train.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["ks"] = list(self.ks)
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        try:
            train = T.TrainConfig(**data.pop("train", {}))
            dims = ModelDims(**data.pop("dims", {}))
            return cls(train=train, dims=dims, **data)
        except TypeError as err:
            raise UsageError("bad config: %s" % err) from None


def _write_json(payload, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    if not os.path.exists(path):
        raise UsageError("config file not found: %s" % path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as err:
            raise UsageError("bad config %s: %s" % (path, err)) from None


def _merge(defaults, config_path, overrides):
    """Resolution order: built-in defaults < config file < explicit flags."""
    merged = dict(defaults)
    if config_path:
        merged.update(_read_json(config_path))
        log.info("config file: %s", config_path)
    merged.update(overrides)
    if overrides:
        log.info("flag overrides: %s", json.dumps(overrides, sort_keys=True))
    return merged


def _flag_overrides(args, names):
    """Flags the user actually passed (parser defaults are None)."""
    out = {}
    for name in names:
        val = getattr(args, name.replace("-", "_"))
        if val is not None:
            out[name.replace("-", "_")] = val
    return out


def _parse_ks(text):
    try:
        ks = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise argparse.ArgumentTypeError("K list must be comma-separated "
                                         "integers, e.g. 20,50,100")
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be >= 1")
    return list(ks)


def _require(path, what):
    if not os.path.exists(path):
        raise UsageError("%s not found: %s" % (what, path))
    return path


def _load_split(corpus_dir, split):
    scenes = D.read_corpus(_require(
        os.path.join(corpus_dir, split + ".jsonl"), split + " corpus"))
    manifest = D.read_manifest(_require(
        os.path.join(corpus_dir, split + ".manifest.json"),
        split + " manifest"))
    return scenes, manifest


# ----------------------------------------------------------- gen-data

GEN_DEFAULTS = {
    "entities": 20,
    "predicates": 15,
    "zipf_entity": 1.2,
    "zipf_predicate": 1.8,
    "scenes": 5000,
    "seed": 123,
    "out": "corpus",
}


def cmd_gen_data(args):
    cfg = _merge(GEN_DEFAULTS, args.config, _flag_overrides(
        args, ("entities", "predicates", "zipf_entity", "zipf_predicate",
               "scenes", "seed", "out")))
    unknown = set(cfg) - set(GEN_DEFAULTS)
    if unknown:
        raise UsageError("unknown gen-data keys: %s" % sorted(unknown))
    if cfg["scenes"] < 1:
        raise UsageError("scenes must be >= 1")
    catalog = D.ClassCatalog(cfg["entities"], cfg["predicates"],
                             cfg["zipf_entity"], cfg["zipf_predicate"])
    world = D.build_world(catalog, cfg["seed"])
    os.makedirs(cfg["out"], exist_ok=True)
    sizes = {"train": cfg["scenes"],
             "val": max(1, cfg["scenes"] // 10),
             "test": max(1, cfg["scenes"] // 10)}
    for split in SPLITS:
        scenes = D.make_corpus(world, sizes[split], derive(cfg["seed"], split))
        D.write_corpus(scenes, os.path.join(cfg["out"], split + ".jsonl"))
        manifest = D.build_manifest(scenes, catalog, cfg["seed"],
                                    world.feature_width, split=split)
        D.write_manifest(manifest, os.path.join(
            cfg["out"], split + ".manifest.json"))
        log.info("%s: %d scenes", split, sizes[split])
    _write_json(cfg, os.path.join(cfg["out"], "gen-config.json"))
    print("corpus written to %s (%d/%d/%d scenes)"
          % (cfg["out"], sizes["train"], sizes["val"], sizes["test"]))
    return EXIT_OK


# -------------------------------------------------------------- train

TRAIN_FLAG_MAP = {
    "strategy": "strategy", "alpha": "alpha", "beta": "beta",
    "tau_s": "tau_s", "lr": "lr", "stage1_epochs": "stage1_epochs",
    "max_alternations": "max_alternations", "patience": "patience",
    "entity_per_class": "entity_per_class",
    "predicate_per_class": "predicate_per_class",
    "val_task": "val_task", "val_k": "val_k",
    "teacher_mode": "teacher_mode",
}


def _experiment_from_args(args):
    base = ExperimentConfig().to_dict()
    top = _flag_overrides(args, ("corpus", "out", "seed", "k"))
    overrides = {}
    if "corpus" in top:
        overrides["corpus_dir"] = top["corpus"]
    if "out" in top:
        overrides["out_dir"] = top["out"]
    if "seed" in top:
        overrides["seed"] = top["seed"]
    if "k" in top:
        overrides["ks"] = top["k"]
    merged = _merge(base, args.config, overrides)
    train_over = _flag_overrides(args, tuple(TRAIN_FLAG_MAP))
    merged["train"] = {**merged.get("train", {}),
                       **{TRAIN_FLAG_MAP[k]: v for k, v in train_over.items()}}
    if args.no_appearance:
        merged["dims"] = {**merged.get("dims", {}), "use_appearance": False}
    return ExperimentConfig.from_dict(merged).resolve()


def cmd_train(args):
    cfg = _experiment_from_args(args)
    train_scenes, manifest = _load_split(cfg.corpus_dir, "train")
    val_scenes, _ = _load_split(cfg.corpus_dir, "val")
    if manifest["feature_width"] != cfg.dims.backbone_width:
        raise UsageError(
            "corpus feature width %d != model backbone width %d"
            % (manifest["feature_width"], cfg.dims.backbone_width))
    n_ent = manifest["config"]["entity_classes"]
    n_pred = manifest["config"]["predicate_classes"]
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_json(cfg.to_dict(), os.path.join(cfg.out_dir, "train-config.json"))
    model, _, best = T.run(cfg.train, cfg.dims, n_ent, n_pred,
                           train_scenes, val_scenes, out_dir=cfg.out_dir)
    print("%s: best val %s mR@%d = %r"
          % (cfg.train.strategy, cfg.train.val_task, cfg.train.val_k, best))
    return EXIT_OK


# --------------------------------------------------------------- eval

EVAL_DEFAULTS = {
    "checkpoint": None,
    "corpus": "corpus",
    "split": "test",
    "task": "sgcls",
    "ks": [20, 50, 100],
    "all_pairs": False,
    "oracle": False,
    "out": "eval",
}


def _oracle_results(scenes, n_ent, n_pred, all_pairs):
    """Ground-truth scorer: one-hot probabilities straight from labels."""
    out = []
    for scene in scenes:
        pairs = E.candidate_pairs(scene, all_pairs=all_pairs)
        ent = np.zeros((len(scene.entities), n_ent))
        for i, e in enumerate(scene.entities):
            ent[i, e.class_id] = 1.0
        lookup = {(r.subject, r.object): r.predicate for r in scene.relations}
        pred = np.full((len(pairs), n_pred), 1.0 / n_pred)
        for i, pair in enumerate(pairs):
            hit = lookup.get(tuple(pair))
            if hit is not None:
                pred[i] = 0.0
                pred[i, hit] = 1.0
        out.append(ForwardResult(entity_probs=ent, teacher_probs=ent,
                                 pairs=pairs, predicate_probs=pred))
    return out


def cmd_eval(args):
    cfg = _merge(EVAL_DEFAULTS, args.config, _flag_overrides(
        args, ("checkpoint", "corpus", "split", "task", "all_pairs",
               "oracle", "out")))
    flags = _flag_overrides(args, ("k",))
    if "k" in flags:
        cfg["ks"] = flags["k"]
    unknown = set(cfg) - set(EVAL_DEFAULTS)
    if unknown:
        raise UsageError("unknown eval keys: %s" % sorted(unknown))
    if cfg["split"] not in SPLITS:
        raise UsageError("split must be one of %s" % (SPLITS,))
    if cfg["task"] not in E.EVAL_TASKS:
        raise UsageError("task must be one of %s" % (E.EVAL_TASKS,))
    if not cfg["oracle"] and not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required unless --oracle is set")

    scenes, manifest = _load_split(cfg["corpus"], cfg["split"])
    _, train_manifest = _load_split(cfg["corpus"], "train")
    train_counts = train_manifest["predicate_counts"]
    n_ent = manifest["config"]["entity_classes"]
    n_pred = manifest["config"]["predicate_classes"]

    if cfg["oracle"]:
        results = iter(_oracle_results(scenes, n_ent, n_pred,
                                       cfg["all_pairs"]))
        extra = {"scorer": "oracle", "split": cfg["split"]}
        report = E.evaluate(lambda s, p: next(results), scenes, cfg["task"],
                            cfg["ks"], train_counts,
                            all_pairs=cfg["all_pairs"], extra=extra)
    else:
        model, meta = Model.load(_require(cfg["checkpoint"], "checkpoint"))
        if model.dims.backbone_width != manifest["feature_width"]:
            raise UsageError(
                "checkpoint backbone width %d != corpus feature width %d"
                % (model.dims.backbone_width, manifest["feature_width"]))
        if (model.n_entity_classes, model.n_predicate_classes) != (n_ent,
                                                                   n_pred):
            raise UsageError(
                "checkpoint classes (%d entities, %d predicates) do not "
                "match corpus (%d, %d)"
                % (model.n_entity_classes, model.n_predicate_classes,
                   n_ent, n_pred))
        extra = {"scorer": "model", "split": cfg["split"],
                 "checkpoint": cfg["checkpoint"],
                 "strategy": meta.get("strategy")}
        report = E.evaluate_model(model, scenes, cfg["task"], cfg["ks"],
                                  train_counts, all_pairs=cfg["all_pairs"],
                                  extra=extra)

    os.makedirs(cfg["out"], exist_ok=True)
    E.write_report_json(report, os.path.join(cfg["out"], "report.json"))
    E.write_report_csv(report, os.path.join(cfg["out"], "report.csv"))
    E.write_plot_csv(report, os.path.join(cfg["out"], "plot.csv"))
    _write_json(cfg, os.path.join(cfg["out"], "eval-config.json"))
    top = max(report.ks)
    print("%s %s: R@%d = %r, mR@%d = %r"
          % (cfg["task"], cfg["split"], top, report.recall[top],
             top, report.mean_recall[top]))
    return EXIT_OK


# ------------------------------------------------------------- report

REPORT_DEFAULTS = {"reports": [], "out": "tables"}

BUCKETS = ("head", "middle", "tail")


def _load_report(path):
    _require(path, "report")
    try:
        report = E.read_report_json(path)
    except (KeyError, ValueError, E.EvaluationError) as err:
        raise UsageError("report %s is missing required fields (%s); "
                         "re-run eval to regenerate it" % (path, err))
    for bucket in BUCKETS:
        for k in report.ks:
            if bucket not in report.bucket_recall.get(k, {}):
                raise UsageError("report %s lacks %s-bucket recall"
                                 % (path, bucket))
    return report


def cmd_report(args):
    cfg = _merge(REPORT_DEFAULTS, args.config,
                 _flag_overrides(args, ("out",)))
    if args.reports:
        cfg["reports"] = list(args.reports)
    if not cfg["reports"]:
        raise UsageError("need at least one report file")
    loaded = [(path, _load_report(path)) for path in cfg["reports"]]

    ks = loaded[0][1].ks
    for path, report in loaded[1:]:
        if report.ks != ks:
            raise UsageError(
                "incompatible K lists: %s has %s, %s has %s"
                % (cfg["reports"][0], list(ks), path, list(report.ks)))
    top = max(ks)

    def label(path, report):
        extra = report.extra or {}
        if extra.get("strategy"):
            return extra["strategy"]
        if extra.get("scorer") == "oracle":
            return "oracle"
        return os.path.splitext(os.path.basename(path))[0]

    rows = sorted(((label(p, r), r) for p, r in loaded),
                  key=lambda lr: (-lr[1].mean_recall[top], lr[0]))
    header = (["strategy"] + ["mR@%d" % k for k in ks]
              + ["%s@%d" % (b, top) for b in BUCKETS])
    os.makedirs(cfg["out"], exist_ok=True)

    def cell(value, fmt):
        # buckets with no scored classes carry None
        return "" if value is None else fmt % value

    csv_path = os.path.join(cfg["out"], "table.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for name, rep in rows:
            cells = [name]
            cells += [repr(rep.mean_recall[k]) for k in ks]
            cells += [cell(rep.bucket_recall[top][b], "%r") for b in BUCKETS]
            fh.write(",".join(cells) + "\n")

    md_path = os.path.join(cfg["out"], "table.md")
    with open(md_path, "w", encoding="utf-8") as fh:
        fh.write("| " + " | ".join(header) + " |\n")
        fh.write("|" + "|".join(["---"] + ["---:"] * (len(header) - 1))
                 + "|\n")
        for name, rep in rows:
            cells = [name]
            cells += ["%.4f" % rep.mean_recall[k] for k in ks]
            cells += [cell(rep.bucket_recall[top][b], "%.4f") or "-"
                      for b in BUCKETS]
            fh.write("| " + " | ".join(cells) + " |\n")

    _write_json(cfg, os.path.join(cfg["out"], "report-config.json"))
    print("wrote %s and %s (%d rows)" % (csv_path, md_path, len(rows)))
    return EXIT_OK


# --------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="sgtail",
        description="Long-tailed scene-graph training testbed.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="synthesize a corpus")
    gen.add_argument("--config", help="JSON config file (flags override)")
    gen.add_argument("--entities", type=int)
    gen.add_argument("--predicates", type=int)
    gen.add_argument("--zipf-entity", type=float)
    gen.add_argument("--zipf-predicate", type=float)
    gen.add_argument("--scenes", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out")
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train one strategy")
    tr.add_argument("--config", help="JSON config file (flags override)")
    tr.add_argument("--corpus", help="corpus directory from gen-data")
    tr.add_argument("--out", help="output directory")
    tr.add_argument("--seed", type=int, help="master seed")
    tr.add_argument("--k", type=_parse_ks, help="eval K list, e.g. 20,50,100")
    tr.add_argument("--strategy", choices=T.STRATEGIES)
    tr.add_argument("--alpha", type=float, help="distillation weight")
    tr.add_argument("--beta", type=float, help="teacher entity-loss weight")
    tr.add_argument("--tau-s", type=float, help="distillation temperature")
    tr.add_argument("--lr", type=float)
    tr.add_argument("--stage1-epochs", type=int)
    tr.add_argument("--max-alternations", type=int)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--entity-per-class", type=int)
    tr.add_argument("--predicate-per-class", type=int)
    tr.add_argument("--val-task", choices=E.EVAL_TASKS)
    tr.add_argument("--val-k", type=int)
    tr.add_argument("--teacher-mode", choices=T.TEACHER_MODES)
    tr.add_argument("--no-appearance", action="store_true",
                    help="drop the appearance branch from pair features")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--config", help="JSON config file (flags override)")
    ev.add_argument("--checkpoint")
    ev.add_argument("--corpus")
    ev.add_argument("--split", choices=SPLITS)
    ev.add_argument("--task", choices=E.EVAL_TASKS)
    ev.add_argument("--k", type=_parse_ks, help="K list, e.g. 20,50,100")
    ev.add_argument("--all-pairs", action="store_const", const=True,
                    default=None, help="rank every ordered pair")
    ev.add_argument("--oracle", action="store_const", const=True,
                    default=None, help="score ground truth instead of a model")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="merge eval reports into a table")
    rp.add_argument("--config", help="JSON config file (flags override)")
    rp.add_argument("reports", nargs="*", help="report.json files")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)

    return parser


def _configure_logging():
    level = os.environ.get("SGTAIL_LOG", "warning").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "WARNING"
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, N.InvalidParameterError, CheckpointError,
            D.GenerationError, D.CorpusFormatError,
            E.EvaluationError) as err:
        print("sgtail: error: %s" % err, file=sys.stderr)
        return EXIT_USAGE
    except T.TrainAbort as err:
        print("sgtail: numerical abort: %s" % err, file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())

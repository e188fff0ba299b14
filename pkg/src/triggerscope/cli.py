"""Command-line surface: train, infect, invert, analyze, unlearn, evaluate,
and the full forensic loop (run).

Every subcommand reads the same key-value config file (see
``pipeline.CONFIG_SCHEMA``), with repeatable ``--set key=value`` overrides.
Stages compose through files: checkpoints (``.ckpt``), a mental-image
manifest (exact float32 pixels, base64), and a hypotheses document that
carries the analyzer's verdict into the unlearner.

Exit codes: 0 success, 2 configuration/input error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import os
import sys

import numpy as np

from . import analysis as A
from . import data as D
from . import inversion as I
from . import metrics as MX
from . import models as M
from . import pipeline as P
from . import pnm
from . import training as TR
from . import unlearning as U
from .errors import ConfigError, ForensicsError, InputError, StageError

log = logging.getLogger(__name__)

_MANIFEST_VERSION = 1


def _encode_array(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii")}


def _decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"].encode("ascii"))
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(doc["shape"])


def _image_doc(im: I.MentalImage) -> dict:
    return {"label": int(im.label), "trial": int(im.trial),
            "loss": float(im.loss), "predicted": int(im.predicted),
            "pixels": _encode_array(im.pixels)}


def _image_from_doc(doc: dict) -> I.MentalImage:
    return I.MentalImage(_decode_array(doc["pixels"]), int(doc["label"]),
                         int(doc["trial"]), float(doc["loss"]),
                         int(doc["predicted"]))


def write_image_manifest(images: list, path) -> None:
    doc = {"version": _MANIFEST_VERSION, "images": [_image_doc(im) for im in images]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def read_image_manifest(path) -> list:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("version") != _MANIFEST_VERSION:
            raise InputError(f"{path}: unsupported manifest version {doc.get('version')}")
        return [_image_from_doc(d) for d in doc["images"]]
    except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: malformed image manifest: {exc}") from None


def write_hypotheses(report: A.InfectionReport, decision: str, path) -> None:
    doc = {
        "version": _MANIFEST_VERSION,
        "posterior": report.posterior,
        "evidence": report.evidence,
        "not_applicable": report.not_applicable,
        "decision": decision,
        "hypotheses": [
            {"origin": list(h.origin), "mask_size": h.mask.size,
             "loss": float(h.loss), "image": _image_doc(h.image)}
            for h in report.hypotheses
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def read_hypotheses(path, image_shape: tuple) -> tuple:
    """(hypotheses, decision) from an analyze-stage document."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("version") != _MANIFEST_VERSION:
            raise InputError(f"{path}: unsupported hypotheses version {doc.get('version')}")
        hyps = []
        for d in doc["hypotheses"]:
            image = _image_from_doc(d["image"])
            mask = A.Mask(tuple(d["origin"]), int(d["mask_size"]), tuple(image_shape))
            hyps.append(A.Hypothesis(image, mask, float(d["loss"])))
        return hyps, str(doc.get("decision", "n/a"))
    except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: malformed hypotheses document: {exc}") from None


def _splits(cfg: P.PipelineConfig):
    samples = P.load_samples(cfg)
    spec = D.SplitSpec(cfg["split.learn"], cfg["split.inference"],
                       cfg["split.auxiliary"],
                       normative_per_class=cfg["split.normative_per_class"],
                       unlearning_per_class=cfg["split.unlearning_per_class"])
    seeds = P._child_seeds(cfg["seed"])
    return D.split_dataset(samples, spec, np.random.default_rng(seeds["split"])), seeds


def _train_model(cfg: P.PipelineConfig, infect: bool):
    splits, seeds = _splits(cfg)
    arch = M.preset(cfg["model.arch"])
    learn_set = splits.learn
    if infect:
        trigger = P._build_trigger(cfg, tuple(arch.input_shape))
        learn_set = D.poison_dataset(learn_set, trigger, cfg["attack.rate"],
                                     np.random.default_rng(seeds["poison"]))
    classifier = M.build_classifier(arch, np.random.default_rng(seeds["init"]))
    tcfg = TR.TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
                          learning_rate=cfg["train.learning_rate"],
                          mode=cfg["train.mode"], seed=seeds["train"])
    adv = TR.AdvConfig(alpha=cfg["train.adv_alpha"], epsilon=cfg["train.adv_epsilon"],
                       t_max=cfg["train.adv_t_max"])
    TR.train(classifier, learn_set, tcfg, adv)
    return classifier, splits, seeds


def cmd_train(cfg: P.PipelineConfig, args) -> int:
    classifier, _, _ = _train_model(cfg, infect=False)
    M.save_checkpoint(classifier, args.out)
    print(f"saved clean-trained checkpoint to {args.out}")
    return 0


def cmd_infect(cfg: P.PipelineConfig, args) -> int:
    classifier, _, _ = _train_model(cfg, infect=True)
    M.save_checkpoint(classifier, args.out)
    print(f"saved poison-trained checkpoint to {args.out}")
    return 0


def cmd_invert(cfg: P.PipelineConfig, args) -> int:
    classifier = M.load_checkpoint(args.model)
    _, seeds = _splits(cfg)
    icfg = I.InversionConfig(images_per_class=cfg["invert.images_per_class"],
                             step_size=cfg["invert.step_size"],
                             total_iterations=cfg["invert.total_iterations"],
                             num_scales=cfg["invert.num_scales"])
    images = I.invert_all(classifier, icfg, np.random.default_rng(seeds["invert"]))
    os.makedirs(args.out, exist_ok=True)
    write_image_manifest(images, os.path.join(args.out, "images.json"))
    paths = pnm.dump_mental_images(images, args.out)
    print(f"wrote {len(images)} mental images ({len(paths)} files) to {args.out}")
    return 0


def cmd_analyze(cfg: P.PipelineConfig, args) -> int:
    classifier = M.load_checkpoint(args.model)
    images = read_image_manifest(os.path.join(args.images, "images.json"))
    splits, seeds = _splits(cfg)
    acfg = P._analysis_config(cfg)
    evidence_path = args.evidence or cfg["evidence.path"]
    if evidence_path and os.path.exists(evidence_path):
        evidence_model = A.load_evidence_model(evidence_path)
    else:
        arch = M.preset(cfg["model.arch"])
        evidence_model = A.build_evidence_model(
            splits.auxiliary, arch, seeds["evidence"],
            D.checkerboard_trigger(tuple(arch.input_shape)), acfg)
        if evidence_path:
            A.save_evidence_model(evidence_model, evidence_path)
    report = A.analyze(classifier, images, splits.normative, acfg, evidence_model)
    decision = "n/a" if report.not_applicable else P.decide(report.posterior,
                                                            acfg.decision_threshold)
    write_hypotheses(report, decision, args.out)
    post = "n/a" if report.posterior is None else f"{report.posterior:.6f}"
    print(f"posterior = {post}; decision = {decision}; "
          f"surviving hypotheses = {len(report.hypotheses)}")
    return 0


def cmd_unlearn(cfg: P.PipelineConfig, args) -> int:
    classifier = M.load_checkpoint(args.model)
    hyps, decision = read_hypotheses(args.hypotheses,
                                     tuple(classifier.config.input_shape))
    if decision != "unlearn" and not args.force:
        print(f"analysis decision was {decision!r}; not unlearning "
              f"(use --force to override)")
        M.save_checkpoint(classifier, args.out)
        return 0
    splits, seeds = _splits(cfg)
    ucfg = U.UnlearnConfig(learning_rate=cfg["unlearn.learning_rate"],
                           epochs=cfg["unlearn.epochs"],
                           batch_size=cfg["unlearn.batch_size"],
                           seed=seeds["unlearn"])
    U.unlearn(classifier, splits.unlearning, hyps, ucfg)
    M.save_checkpoint(classifier, args.out)
    print(f"saved unlearned checkpoint to {args.out}")
    return 0


def cmd_evaluate(cfg: P.PipelineConfig, args) -> int:
    classifier = M.load_checkpoint(args.model)
    splits, _ = _splits(cfg)
    acc = MX.accuracy(classifier, splits.inference)
    print(f"acc = {acc:.4f}")
    if cfg["attack.enabled"]:
        trigger = P._build_trigger(cfg, tuple(classifier.config.input_shape))
        asr = MX.attack_success_rate(classifier, splits.inference, trigger)
        print(f"asr = {asr:.4f}")
    if args.reference:
        reference = M.load_checkpoint(args.reference)
        agree = MX.agreement(reference, classifier, splits.inference)
        print(f"agreement = {agree:.4f}")
    return 0


def cmd_run(cfg: P.PipelineConfig, args) -> int:
    outdir = os.environ.get("TRIGGERSCOPE_OUT") or args.out
    profile = P.run_pipeline(cfg, outdir, dump=True if args.dump else None)
    post = "n/a" if profile.posterior is None else f"{profile.posterior:.6f}"
    print(f"posterior = {post}")
    print(f"decision = {profile.decision}")
    print(f"profile written to {os.path.join(outdir, 'profile.txt')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triggerscope",
        description="Backdoor forensics: invert triggers, detect infection, unlearn.")
    parser.add_argument("--config", default="", help="key-value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a clean classifier")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p = sub.add_parser("infect", help="train on a poisoned learn split")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p = sub.add_parser("invert", help="reverse-engineer mental images")
    p.add_argument("--model", required=True, help="checkpoint to invert")
    p.add_argument("--out", required=True, help="output directory")
    p = sub.add_parser("analyze", help="scan mental images and infer infection")
    p.add_argument("--model", required=True, help="checkpoint to analyze")
    p.add_argument("--images", required=True, help="invert-stage output directory")
    p.add_argument("--evidence", default="", help="evidence model file (loaded if "
                   "present, written after an in-run build)")
    p.add_argument("--out", required=True, help="hypotheses document output path")
    p = sub.add_parser("unlearn", help="remove a detected trigger")
    p.add_argument("--model", required=True, help="checkpoint to repair")
    p.add_argument("--hypotheses", required=True, help="analyze-stage output")
    p.add_argument("--force", action="store_true",
                   help="unlearn even when the decision was intact/n-a")
    p.add_argument("--out", required=True, help="repaired checkpoint path")
    p = sub.add_parser("evaluate", help="accuracy / attack success / agreement")
    p.add_argument("--model", required=True, help="checkpoint to evaluate")
    p.add_argument("--reference", default="", help="second checkpoint for agreement")
    p = sub.add_parser("run", help="full loop: train, detect, decide, unlearn")
    p.add_argument("--out", required=True,
                   help="output directory (TRIGGERSCOPE_OUT overrides)")
    p.add_argument("--dump", action="store_true",
                   help="also write every mental image")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "infect": cmd_infect,
    "invert": cmd_invert,
    "analyze": cmd_analyze,
    "unlearn": cmd_unlearn,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                            format="%(name)s: %(message)s")
    try:
        cfg = P.load_config(args.config, args.set)
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ForensicsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

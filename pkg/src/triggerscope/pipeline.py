"""End-to-end forensic loop: learner -> controller -> unlearner.

A pipeline run trains (or loads) a classifier, optionally infects its
training data, reverse-engineers mental images, scans them for trigger
hypotheses, computes the Bayesian infection posterior against a surrogate
evidence model, decides whether to unlearn, and emits a psychometric
profile: a flat key-value text document plus trigger/mental-image files.

The profile is byte-reproducible for a fixed master seed and config; the
emission timestamp lives in exactly one excluded field (``generated_at``).
All stage randomness derives from the master seed through a fixed draw
order, so branches taken later never shift earlier seeds.

Outputs are staged in a temporary sibling directory and renamed into place
only on success; a failed run leaves its partial outputs quarantined under
``<outdir>.failed`` instead of half-written results.
"""

from __future__ import annotations

import datetime as _dt
import logging
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import analysis as A
from . import data as D
from . import inversion as I
from . import metrics as MX
from . import models as M
from . import pnm
from . import training as TR
from . import unlearning as U
from .errors import ConfigError, ForensicsError, InputError, StageError

log = logging.getLogger(__name__)

PROFILE_VERSION = 1
CONFIG_VERSION = 1

# key -> (type, default). bool values parse from {true,false,1,0,yes,no}.
CONFIG_SCHEMA = {
    "version": (int, CONFIG_VERSION),
    "seed": (int, 0),
    "dataset.source": (str, "synthetic"),  # synthetic | idx
    "dataset.path": (str, ""),
    "dataset.labels": (str, ""),
    "dataset.seed": (int, 100),
    "dataset.size": (int, 4000),
    "split.learn": (int, 2000),
    "split.inference": (int, 1000),
    "split.auxiliary": (int, 1000),
    "split.normative_per_class": (int, 10),
    "split.unlearning_per_class": (int, 10),
    "model.arch": (str, "vgg-small"),
    "model.checkpoint": (str, ""),
    "train.mode": (str, "std"),
    "train.epochs": (int, 5),
    "train.batch_size": (int, 64),
    "train.learning_rate": (float, 0.05),
    "train.adv_alpha": (float, 0.02),
    "train.adv_epsilon": (float, 0.1),
    "train.adv_t_max": (int, 10),
    "attack.enabled": (bool, False),
    "attack.kind": (str, "square"),  # square | checkerboard
    "attack.size": (int, 4),
    "attack.origin_row": (int, -1),  # -1: flush with the bottom/right edge
    "attack.origin_col": (int, -1),
    "attack.value": (float, 1.0),
    "attack.target": (int, 0),
    "attack.rate": (float, 0.5),
    "invert.images_per_class": (int, 20),
    "invert.step_size": (float, 0.1),
    "invert.total_iterations": (int, 50),
    "invert.num_scales": (int, 4),
    "analysis.mask_size": (int, 12),
    "analysis.scan_stride": (int, 2),
    "analysis.top_k": (int, 20),
    "analysis.neighbor_radius": (int, 2),
    "analysis.perceptual_threshold": (float, 0.1),
    "analysis.homogeneous_threshold": (int, 1),
    "analysis.kde_bandwidth": (float, 0.5),
    "analysis.kde_bandwidth_mode": (str, "scaled"),
    "analysis.bandwidth_floor": (float, 0.02),
    "analysis.moving_average_window": (int, 5),
    "analysis.prior_infected": (float, 0.5),
    "analysis.decision_threshold": (float, 0.5),
    "analysis.evidence_best_only": (bool, False),
    "unlearn.learning_rate": (float, 0.01),
    "unlearn.epochs": (int, 20),
    "unlearn.batch_size": (int, 64),
    "evidence.path": (str, ""),
    "output.dump_mental_images": (bool, False),
}

_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _parse_value(key: str, text: str):
    kind, _ = CONFIG_SCHEMA[key]
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() not in _BOOL_WORDS:
                raise ValueError(text)
            return _BOOL_WORDS[text.lower()]
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class PipelineConfig:
    """Validated flat key-value configuration for one pipeline run."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
        for key, value in self.values.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            kind, _ = CONFIG_SCHEMA[key]
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
                raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
            merged[key] = value
        object.__setattr__(self, "values", merged)
        if self["version"] != CONFIG_VERSION:
            raise ConfigError(f"config version {self['version']} unsupported "
                              f"(this build reads version {CONFIG_VERSION})")
        if self["dataset.source"] not in ("synthetic", "idx"):
            raise ConfigError(f"dataset.source must be synthetic or idx, "
                              f"got {self['dataset.source']!r}")
        if self["dataset.source"] == "idx" and not self["dataset.path"]:
            raise ConfigError("dataset.source=idx requires dataset.path")
        if self["attack.kind"] not in ("square", "checkerboard"):
            raise ConfigError(f"attack.kind must be square or checkerboard, "
                              f"got {self['attack.kind']!r}")

    def __getitem__(self, key: str):
        return self.values[key]

    def to_text(self) -> str:
        """Canonical serialization: every key in schema order."""
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in CONFIG_SCHEMA)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PipelineConfig":
        return cls(dict(mapping))


def parse_config_text(text: str) -> dict:
    """key = value lines; blank lines and #-comments ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def load_config(path, overrides: list | None = None) -> PipelineConfig:
    """Config file plus repeatable key=value override strings."""
    values = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                values = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, value)
    return PipelineConfig.from_mapping(values)


@dataclass
class PsychometricProfile:
    """The emitted forensic report for one pipeline run."""

    posterior: float | None
    decision: str  # unlearn | intact | n/a
    evidence: float | None
    backdoor_class: int | None
    hypotheses: list  # selected Hypothesis objects (may be empty)
    pre: dict  # acc, asr (asr may be None)
    post: dict  # acc, asr, agreement
    config_text: str
    seed: int
    image_files: list = field(default_factory=list)  # relative paths


def decide(posterior: float | None, threshold: float) -> str:
    """unlearn iff the posterior is defined and reaches the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"decision threshold must be in [0,1], got {threshold}")
    if posterior is None:
        return "intact"
    return "unlearn" if posterior >= threshold else "intact"


def _child_seeds(master: int) -> dict:
    """Fixed-order stage seeds so optional stages never shift the others."""
    rng = np.random.default_rng(master)
    names = ("split", "poison", "init", "train", "evidence", "invert", "unlearn")
    return {name: int(rng.integers(2 ** 31)) for name in names}


def _build_trigger(cfg: PipelineConfig, image_shape: tuple) -> D.TriggerSpec:
    target = cfg["attack.target"]
    if cfg["attack.kind"] == "checkerboard":
        return D.checkerboard_trigger(image_shape, target)
    size = cfg["attack.size"]
    row, col = cfg["attack.origin_row"], cfg["attack.origin_col"]
    row = image_shape[1] - size if row < 0 else row
    col = image_shape[2] - size if col < 0 else col
    patch = np.full((image_shape[0], size, size), cfg["attack.value"], dtype=np.float32)
    return D.TriggerSpec(patch, (row, col), target, image_shape)


def _analysis_config(cfg: PipelineConfig) -> A.AnalysisConfig:
    return A.AnalysisConfig(
        mask_size=cfg["analysis.mask_size"],
        scan_stride=cfg["analysis.scan_stride"],
        top_k=cfg["analysis.top_k"],
        neighbor_radius=cfg["analysis.neighbor_radius"],
        perceptual_threshold=cfg["analysis.perceptual_threshold"],
        homogeneous_threshold=cfg["analysis.homogeneous_threshold"],
        kde_bandwidth=cfg["analysis.kde_bandwidth"],
        kde_bandwidth_mode=cfg["analysis.kde_bandwidth_mode"],
        bandwidth_floor=cfg["analysis.bandwidth_floor"],
        moving_average_window=cfg["analysis.moving_average_window"],
        prior_infected=cfg["analysis.prior_infected"],
        decision_threshold=cfg["analysis.decision_threshold"],
        evidence_best_only=cfg["analysis.evidence_best_only"],
    )


def _stage(tag: str):
    """Decorator-free stage guard: re-raise domain errors with the stage tag."""
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, (ForensicsError, OSError)):
                if isinstance(exc, StageError):
                    return False
                raise StageError(tag, str(exc)) from exc
            return False
    return _Guard()


def load_samples(cfg: PipelineConfig) -> list:
    if cfg["dataset.source"] == "synthetic":
        return D.synthesize_dataset(cfg["dataset.seed"], cfg["dataset.size"])
    labels = cfg["dataset.labels"] or None
    return D.load_dataset(cfg["dataset.path"], "idx", labels_path=labels,
                          seed=cfg["dataset.seed"], n=cfg["dataset.size"])


def _clone(classifier: M.Classifier) -> M.Classifier:
    params = {name: M.Tensor(t.data.copy(), requires_grad=True)
              for name, t in classifier.params.items()}
    return M.Classifier(classifier.config, params)


def run_pipeline(cfg: PipelineConfig, outdir, dump: bool | None = None) -> PsychometricProfile:
    """Execute the full loop and emit the profile into ``outdir``.

    ``dump`` overrides the config's mental-image dump flag when not None.
    """
    if os.path.exists(os.fspath(outdir)):
        raise StageError("emit", f"output directory {os.fspath(outdir)} already exists")
    dump = cfg["output.dump_mental_images"] if dump is None else dump
    seeds = _child_seeds(cfg["seed"])
    acfg = _analysis_config(cfg)

    with _stage("dataset"):
        samples = load_samples(cfg)
        spec = D.SplitSpec(cfg["split.learn"], cfg["split.inference"],
                           cfg["split.auxiliary"],
                           normative_per_class=cfg["split.normative_per_class"],
                           unlearning_per_class=cfg["split.unlearning_per_class"])
        splits = D.split_dataset(samples, spec, np.random.default_rng(seeds["split"]))

    arch = M.preset(cfg["model.arch"])
    trigger = None
    if cfg["attack.enabled"]:
        trigger = _build_trigger(cfg, tuple(arch.input_shape))

    with _stage("infect"):
        learn_set = splits.learn
        if trigger is not None:
            learn_set = D.poison_dataset(learn_set, trigger, cfg["attack.rate"],
                                         np.random.default_rng(seeds["poison"]))

    with _stage("train"):
        if cfg["model.checkpoint"]:
            classifier = M.load_checkpoint(cfg["model.checkpoint"])
        else:
            classifier = M.build_classifier(arch, np.random.default_rng(seeds["init"]))
            tcfg = TR.TrainConfig(epochs=cfg["train.epochs"],
                                  batch_size=cfg["train.batch_size"],
                                  learning_rate=cfg["train.learning_rate"],
                                  mode=cfg["train.mode"], seed=seeds["train"])
            adv = TR.AdvConfig(alpha=cfg["train.adv_alpha"],
                               epsilon=cfg["train.adv_epsilon"],
                               t_max=cfg["train.adv_t_max"])
            TR.train(classifier, learn_set, tcfg, adv)

    with _stage("evidence"):
        built_evidence = False
        if cfg["evidence.path"]:
            evidence_model = A.load_evidence_model(cfg["evidence.path"])
        else:
            evidence_model = A.build_evidence_model(
                splits.auxiliary, arch, seeds["evidence"],
                D.checkerboard_trigger(tuple(arch.input_shape)), acfg)
            built_evidence = True

    with _stage("invert"):
        icfg = I.InversionConfig(images_per_class=cfg["invert.images_per_class"],
                                 step_size=cfg["invert.step_size"],
                                 total_iterations=cfg["invert.total_iterations"],
                                 num_scales=cfg["invert.num_scales"])
        mental_images = I.invert_all(classifier, icfg,
                                     np.random.default_rng(seeds["invert"]))

    with _stage("analyze"):
        report = A.analyze(classifier, mental_images, splits.normative, acfg,
                           evidence_model)

    with _stage("decide"):
        decision = decide(report.posterior, acfg.decision_threshold)
        shown = "n/a" if report.not_applicable else decision
        backdoor_class = report.hypotheses[0].label if report.hypotheses else None

    with _stage("evaluate"):
        pre = {"acc": MX.accuracy(classifier, splits.inference), "asr": None}
        if trigger is not None:
            pre["asr"] = MX.attack_success_rate(classifier, splits.inference, trigger)

    repaired = classifier
    with _stage("unlearn"):
        if decision == "unlearn":
            repaired = _clone(classifier)
            ucfg = U.UnlearnConfig(learning_rate=cfg["unlearn.learning_rate"],
                                   epochs=cfg["unlearn.epochs"],
                                   batch_size=cfg["unlearn.batch_size"],
                                   seed=seeds["unlearn"])
            U.unlearn(repaired, splits.unlearning, report.hypotheses, ucfg)

    with _stage("evaluate"):
        post = {"acc": MX.accuracy(repaired, splits.inference), "asr": None,
                "agreement": 1.0 if repaired is classifier
                else MX.agreement(classifier, repaired, splits.inference)}
        if trigger is not None:
            post["asr"] = MX.attack_success_rate(repaired, splits.inference, trigger)

    profile = PsychometricProfile(
        posterior=report.posterior, decision=shown, evidence=report.evidence,
        backdoor_class=backdoor_class, hypotheses=list(report.hypotheses),
        pre=pre, post=post, config_text=cfg.to_text(), seed=cfg["seed"])

    with _stage("emit"):
        emit_run(profile, outdir, classifier=classifier, repaired=repaired,
                 mental_images=mental_images, dump=dump,
                 evidence_model=evidence_model if built_evidence else None,
                 trained=not cfg["model.checkpoint"])
    return profile


def emit_run(profile: PsychometricProfile, outdir, *, classifier=None,
             repaired=None, mental_images=None, dump=False,
             evidence_model=None, trained=False) -> None:
    """Stage every output file, then rename the directory into place."""
    outdir = os.fspath(outdir)
    if os.path.exists(outdir):
        raise StageError("emit", f"output directory {outdir} already exists")
    staging = f"{outdir}.tmp-{os.getpid()}"
    os.makedirs(staging)
    try:
        files = []
        for h in profile.hypotheses:
            name = os.path.join("triggers",
                                f"trigger_{h.label}_{h.trial}.{_ext(h.patch())}")
            path = os.path.join(staging, name)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            pnm.write_pnm(path, h.patch())
            files.append(name)
        if dump and mental_images:
            mdir = os.path.join(staging, "mental")
            os.makedirs(mdir, exist_ok=True)
            for p in pnm.dump_mental_images(mental_images, mdir):
                files.append(os.path.join("mental", os.path.basename(p)))
        profile.image_files = files
        if trained and classifier is not None:
            M.save_checkpoint(classifier, os.path.join(staging, "model.ckpt"))
        if repaired is not None and repaired is not classifier:
            M.save_checkpoint(repaired, os.path.join(staging, "model_unlearned.ckpt"))
        if evidence_model is not None:
            A.save_evidence_model(evidence_model, os.path.join(staging, "evidence.json"))
        with open(os.path.join(staging, "profile.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_profile(profile))
        os.rename(staging, outdir)
    except BaseException:
        quarantine = f"{outdir}.failed"
        shutil.rmtree(quarantine, ignore_errors=True)
        if os.path.exists(staging):
            os.rename(staging, quarantine)
            log.error("pipeline outputs quarantined in %s", quarantine)
        raise


def _ext(image: np.ndarray) -> str:
    return "ppm" if image.shape[0] == 3 else "pgm"


def _fmt_opt(value) -> str:
    return "n/a" if value is None else _format_value(value)


def format_profile(profile: PsychometricProfile) -> str:
    """Stable-order key-value document; ``generated_at`` is the single
    field excluded from reproducibility comparisons."""
    lines = [
        f"profile_version = {PROFILE_VERSION}",
        f"generated_at = {_dt.datetime.now(_dt.timezone.utc).isoformat()}",
        f"seed = {profile.seed}",
        f"decision = {profile.decision}",
        f"posterior = {_fmt_opt(profile.posterior)}",
        f"evidence = {_fmt_opt(profile.evidence)}",
        f"backdoor_class = {_fmt_opt(profile.backdoor_class)}",
        f"hypothesis_count = {len(profile.hypotheses)}",
    ]
    for i, h in enumerate(profile.hypotheses):
        lines.append(f"hypothesis.{i}.class = {h.label}")
        lines.append(f"hypothesis.{i}.trial = {h.trial}")
        lines.append(f"hypothesis.{i}.origin = {h.origin[0]},{h.origin[1]}")
        lines.append(f"hypothesis.{i}.loss = {repr(h.loss)}")
    for i, name in enumerate(profile.image_files):
        lines.append(f"image.{i} = {name}")
    lines.append(f"pre.acc = {_fmt_opt(profile.pre['acc'])}")
    lines.append(f"pre.asr = {_fmt_opt(profile.pre['asr'])}")
    lines.append(f"post.acc = {_fmt_opt(profile.post['acc'])}")
    lines.append(f"post.asr = {_fmt_opt(profile.post['asr'])}")
    lines.append(f"post.agreement = {_fmt_opt(profile.post['agreement'])}")
    for cfg_line in profile.config_text.splitlines():
        lines.append(f"config.{cfg_line}")
    return "\n".join(lines) + "\n"


def parse_profile(text: str) -> dict:
    """Inverse of format_profile at the key-value level (all values strings)."""
    out = {}
    for raw in text.splitlines():
        if not raw.strip():
            continue
        key, sep, value = raw.partition(" = ")
        if not sep:
            raise InputError(f"malformed profile line {raw!r}")
        out[key] = value
    return out


def profile_fingerprint(text: str) -> str:
    """The profile minus its timestamp line, for reproducibility checks."""
    return "\n".join(line for line in text.splitlines()
                     if not line.startswith("generated_at = "))

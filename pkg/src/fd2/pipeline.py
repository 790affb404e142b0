"""Stage orchestration: wires artifacts between stages and writes the run manifest."""
from __future__ import annotations

import logging
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import STAGES, emit
from .data import ToySpec, load_image_folder, toy_dataset
from .distill import DistilledSet, distill_dataset
from .errors import ConfigError, StateError
from .io import fnv1a64, fingerprint_file
from .metrics import distilled_metrics, distilled_signals, export_projection, format_projection
from .models import parameter_hash
from .pretrain import TeacherCheckpoint, head_accuracies, pretrain
from .softlabel import SoftLabelStore, evaluate, generate_soft_labels, train_student
from .theory import format_table, run_all

logger = logging.getLogger(__name__)

TEACHER_FILE = "teacher.fd2c"
DISTILLED_DIR = "distilled"
SOFTLABEL_FILE = "softlabels.fd2l"
EVAL_FILE = "eval.txt"
METRICS_FILE = "metrics.txt"
PROJECTION_FILE = "projection.txt"
THEORY_FILE = "theory.txt"
MANIFEST_FILE = "manifest.txt"

# stage -> (artifact it consumes, stage that produces it)
UPSTREAM = {
    "distill": [(TEACHER_FILE, "pretrain")],
    "softlabel": [(TEACHER_FILE, "pretrain"), (DISTILLED_DIR, "distill")],
    "eval": [(DISTILLED_DIR, "distill"), (SOFTLABEL_FILE, "softlabel")],
    "metrics": [(TEACHER_FILE, "pretrain"), (DISTILLED_DIR, "distill")],
}


def setup_determinism(seed, deterministic=True):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def toy_spec(config, seed=None):
    return ToySpec(num_classes=config.num_classes, train_per_class=config.toy_train_per_class,
                   val_per_class=config.toy_val_per_class, test_per_class=config.toy_test_per_class,
                   image_size=config.image_size, base_patterns=config.toy_base_patterns,
                   marks=config.toy_marks, noise=config.toy_noise,
                   seed=config.seed if seed is None else seed)


def load_split(config, split):
    """One split of the configured dataset (generated in memory for ``toy``)."""
    if config.dataset_kind == "toy":
        return toy_dataset(toy_spec(config), split)
    root = Path(config.dataset_path)
    if not (root / split).is_dir():
        raise ConfigError(f"dataset folder {root} has no '{split}' split directory")
    return load_image_folder(root / split, config.image_size)


def fingerprint_tree(root):
    """FNV-1a 64 over ``relpath NUL bytes NUL`` of every file under ``root``, in sorted order."""
    root = Path(root)
    h = None
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h = fnv1a64(f.relative_to(root).as_posix().encode() + b"\0", h)
        h = fnv1a64(f.read_bytes() + b"\0", h)
    return f"{h if h is not None else fnv1a64(b''):016x}"


def fingerprint_path(path):
    path = Path(path)
    return fingerprint_tree(path) if path.is_dir() else fingerprint_file(path)


@dataclass
class RunManifest:
    config_text: str
    seeds: dict
    artifacts: list = field(default_factory=list)  # (stage, relative path, fingerprint)
    timings: dict = field(default_factory=dict)

    def fingerprints(self):
        return [(s, p, f) for s, p, f in self.artifacts]

    def to_text(self):
        lines = ["# run manifest", "[config]", self.config_text.rstrip("\n"), "[seeds]"]
        lines += [f"{k} = {v}" for k, v in self.seeds.items()]
        lines.append("[artifacts]")
        lines += [f"{s} {p} {f}" for s, p, f in self.artifacts]
        lines.append("[wall_clock_seconds]")
        lines += [f"{s} {t:.3f}" for s, t in self.timings.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        section, cfg, seeds, arts, times = None, [], {}, [], {}
        for line in text.splitlines():
            if line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
            elif section == "config":
                cfg.append(line)
            elif section == "seeds":
                k, v = (x.strip() for x in line.split("=", 1))
                seeds[k] = int(v)
            elif section == "artifacts":
                arts.append(tuple(line.split()))
            elif section == "wall_clock_seconds":
                s, t = line.split()
                times[s] = float(t)
        return cls("\n".join(cfg) + "\n", seeds, arts, times)


def _require(out, stage):
    for artifact, producer in UPSTREAM.get(stage, []):
        if not (out / artifact).exists():
            raise StateError(f"stage '{stage}' needs {out / artifact}, which stage '{producer}' produces; "
                             f"run '{producer}' first (or include it in the stage list)")


def _read_eval(out):
    path = out / EVAL_FILE
    if not path.exists():
        return None
    for line in path.read_text().splitlines():
        if line.startswith("top1"):
            return float(line.split("=", 1)[1])
    return None


def run_stage(stage, config, out):
    """Execute one stage reading and writing artifacts under ``out``; return produced paths."""
    out = Path(out)
    _require(out, stage)
    if stage == "pretrain":
        train, val = load_split(config, "train"), load_split(config, "val")
        ckpt = pretrain(train, val, config)
        bb, cal = head_accuracies(ckpt.model, val)
        logger.info("teacher val top-1: backbone %.4f, cal %.4f", bb, cal)
        return [ckpt.save(out / TEACHER_FILE)]
    if stage == "distill":
        teacher = TeacherCheckpoint.load(out / TEACHER_FILE)
        distilled = distill_dataset(teacher, load_split(config, "train"), config)
        distilled.save(out / DISTILLED_DIR)
        return [out / DISTILLED_DIR]
    if stage == "softlabel":
        teacher = TeacherCheckpoint.load(out / TEACHER_FILE)
        distilled = DistilledSet.load(out / DISTILLED_DIR)
        store = generate_soft_labels(teacher, distilled, config.softlabel_mode, config.tau, config.aug_policy,
                                     config.seed, epochs=max(config.student_epochs, 1))
        return [store.save(out / SOFTLABEL_FILE)]
    if stage == "eval":
        distilled = DistilledSet.load(out / DISTILLED_DIR)
        store = SoftLabelStore.load(out / SOFTLABEL_FILE, config.tau, config.softlabel_mode,
                                    config.aug_policy, config.seed)
        student = train_student(distilled, store, config)
        top1 = evaluate(student, load_split(config, "test"))
        path = out / EVAL_FILE
        path.write_text(f"top1 = {top1:.6f}\nstudent_arch = {config.student_arch}\n"
                        f"student_hash = {parameter_hash(student)}\n")
        return [path]
    if stage == "metrics":
        teacher = TeacherCheckpoint.load(out / TEACHER_FILE)
        distilled = DistilledSet.load(out / DISTILLED_DIR)
        report = distilled_metrics(teacher, distilled, _read_eval(out))
        (out / METRICS_FILE).write_text(report.to_text())
        z, _, labels = distilled_signals(teacher, distilled)
        coords, degenerate = export_projection(z)
        text = format_projection(coords, labels.numpy())
        if degenerate:
            text = "# degenerate: features have zero variance\n" + text
        (out / PROJECTION_FILE).write_text(text)
        return [out / METRICS_FILE, out / PROJECTION_FILE]
    if stage == "verify-theory":
        results = run_all(seed=config.seed)
        path = out / THEORY_FILE
        path.write_text(format_table(results))
        failed = [r.statement for r in results if not r.passed]
        if failed:
            logger.error("theory checks failed: %s", ", ".join(failed))
        return [path]
    raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")


def run_pipeline(config, stages=STAGES):
    """Run ``stages`` (in canonical order) under ``config.out_dir`` and write the manifest."""
    stages = list(dict.fromkeys(stages))
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}; expected a subset of {STAGES}")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup_determinism(config.seed, config.deterministic)
    manifest_path = out / MANIFEST_FILE
    manifest = RunManifest(emit(config), {"seed": config.seed})
    if manifest_path.exists():
        # keep artifacts of earlier partial runs of the same directory
        prev = RunManifest.from_text(manifest_path.read_text())
        done = set(stages)
        manifest.artifacts = [a for a in prev.artifacts if a[0] not in done]
        manifest.timings = {s: t for s, t in prev.timings.items() if s not in done}
    for stage in (s for s in STAGES if s in stages):
        # reseed per stage so each stage's result does not depend on which stages ran before it
        setup_determinism(config.seed, config.deterministic)
        t0 = time.perf_counter()
        paths = run_stage(stage, config, out)
        manifest.timings[stage] = time.perf_counter() - t0
        for p in paths:
            manifest.artifacts.append((stage, Path(p).relative_to(out).as_posix(), fingerprint_path(p)))
        logger.info("stage %s done in %.1fs", stage, manifest.timings[stage])
    order = {s: i for i, s in enumerate(STAGES)}
    manifest.artifacts.sort(key=lambda a: (order[a[0]], a[1]))
    manifest.timings = dict(sorted(manifest.timings.items(), key=lambda kv: order[kv[0]]))
    manifest_path.write_text(manifest.to_text())
    return manifest

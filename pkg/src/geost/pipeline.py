"""Pipeline stages shared by the command line and the end-to-end runner.

Every stage writes the resolved config next to its outputs and stamps its
artifacts with the config hash.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .anomaly import FeatureStats, StudentResult, compute_feature_stats, score_cloud, train_student
from .autodiff import load_checkpoint, load_container, save_checkpoint, save_container
from .config import RunConfig
from .errors import FormatError, GeostError
from .evaluation import CategoryResult, harmonic_interpolate, pro_curve, summarize, write_report
from .nets import DescriptorNet, NetConfig
from .parallel import thread_map
from .pointcloud import (
    PointCloud,
    farthest_point_sample,
    generate_scene,
    load_cloud,
    load_scan,
    normalize_cloud,
    save_cloud,
    scaling_factor,
    synth_shape_bank,
)
from .pretrain import TEACHER, PretrainResult, init_store, pretrain_teacher, read_curve, write_curve
from .scores import load_scores, save_scores
from .synth import generate_benchmark

log = logging.getLogger(__name__)


class StageError(GeostError):
    """A pipeline stage failed; ``stage`` names it for the exit message."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _derived_seed(*parts) -> int:
    text = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:4], "little")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path, stage: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise StageError(stage, f"missing {path}") from None
    except json.JSONDecodeError as exc:
        raise StageError(stage, f"{path} is not valid JSON: {exc}") from None


# synth ---------------------------------------------------------------------

def run_synth(cfg: RunConfig, out: Path) -> dict:
    out = Path(out)
    cfg.write(out)
    return generate_benchmark(out, cfg.synth, cfg.seed, {"config_hash": cfg.hash})


# gen-scenes ----------------------------------------------------------------

def scene_seed(seed: int, split: str, index: int) -> int:
    return int(np.random.default_rng([seed, {"train": 0, "val": 1}[split], index]).integers(2**31))


def run_gen_scenes(cfg: RunConfig, out: Path, threads: int = 1) -> dict:
    """Synthetic pretraining scenes, stored unnormalized with the training-set scaling factor."""
    out = Path(out)
    cfg.write(out)
    bank = synth_shape_bank(cfg.seed, cfg["scene.points_per_model"])
    jobs = [("train", i) for i in range(cfg["scene.train"])] + [("val", j) for j in range(cfg["scene.val"])]

    def make(job):
        split, i = job
        return generate_scene(bank, cfg.scene(scene_seed(cfg.seed, split, i))).points

    clouds = thread_map(make, jobs, threads)
    entries = {"train": [], "val": []}
    for (split, i), pts in zip(jobs, clouds):
        rel = f"{split}/{i:04d}.geopc"
        (out / split).mkdir(parents=True, exist_ok=True)
        save_cloud(out / rel, pts, binary=True)
        entries[split].append(rel)
    train = [c for (split, _), c in zip(jobs, clouds) if split == "train"]
    s = scaling_factor(train, cfg.net.k)
    manifest = {"format": "geost-scenes v1", "config_hash": cfg.hash, "scale": s, "k": cfg.net.k, **entries}
    _write_json(out / "scenes.json", manifest)
    return manifest


# pretrain ------------------------------------------------------------------

def teacher_meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash, "random_teacher": bool(cfg["model.random_teacher"])}


def run_pretrain(cfg: RunConfig, scenes_dir: Path, out: Path, threads: int = 1, resume: bool = False) -> Path:
    """Train teacher and decoder; writes ``teacher.gst`` (best), ``last.gst`` and ``curve.csv``."""
    stage = "pretrain"
    scenes_dir, out = Path(scenes_dir), Path(out)
    manifest = _read_json(scenes_dir / "scenes.json", stage)
    if manifest.get("k") != cfg.net.k:
        raise StageError(stage, f"scenes were indexed with k={manifest.get('k')}, config has k={cfg.net.k}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    pcfg = cfg.pretrain
    if cfg["model.random_teacher"]:
        # Ablation: the teacher keeps its random initialization.
        store = init_store(pcfg)
        meta = dict(teacher_meta(cfg), kind="teacher", scale=manifest["scale"], net=pcfg.net.to_dict(),
                    pretrain=pcfg.to_dict(), best_epoch=0)
        save_checkpoint(out / "teacher.gst", store, meta)
        save_checkpoint(out / "last.gst", store, meta)
        write_curve(out / "curve.csv", [])
        return out / "teacher.gst"

    s = float(manifest["scale"])
    train = [normalize_cloud(load_cloud(scenes_dir / r).points, s) for r in manifest["train"]]
    val = [normalize_cloud(load_cloud(scenes_dir / r).points, s) for r in manifest["val"]]
    prior = None
    if resume and (out / "last.gst").exists():
        last, lmeta = load_checkpoint(out / "last.gst")
        best, bmeta = load_checkpoint(out / "teacher.gst")
        if lmeta.get("config_hash") != cfg.hash:
            raise StageError(stage, "cannot resume: last.gst was written under a different config")
        prior = PretrainResult(best, last, int(bmeta["best_epoch"]), read_curve(out / "curve.csv"), bmeta)
        log.info("resuming pretraining after epoch %d", len(prior.curve))

    def checkpoint_epoch(epoch, tr, va):
        log.info("pretrain %d/%d train %.5f val %.5f", epoch, pcfg.epochs, tr, va)

    result = pretrain_teacher(train, val, pcfg, s, threads=threads, resume=prior, on_epoch=checkpoint_epoch,
                              extra_meta=teacher_meta(cfg))
    save_checkpoint(out / "teacher.gst", result.best, result.meta)
    save_checkpoint(out / "last.gst", result.last, result.meta)
    write_curve(out / "curve.csv", result.curve)
    return out / "teacher.gst"


def load_teacher(path) -> Tuple[DescriptorNet, dict]:
    store, meta = load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise FormatError(f"{path} is not a teacher checkpoint")
    return DescriptorNet(NetConfig(**meta["net"]), store.subset(TEACHER)), meta


# train ---------------------------------------------------------------------

def sample_cloud(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Farthest point sampling to ``min(n, len(cloud))`` points."""
    sel = farthest_point_sample(cloud, min(n, len(cloud)), seed=seed)
    return cloud.subset(sel)


def _categories(manifest: dict, requested: Optional[Sequence[str]]) -> List[str]:
    present = sorted({e["category"] for e in manifest["scans"]})
    if requested:
        missing = [c for c in requested if c not in present]
        if missing:
            raise StageError("train", f"categories {missing} not in the data manifest")
        return list(requested)
    return present


def run_train(cfg: RunConfig, teacher_path: Path, data_dir: Path, out: Path, threads: int = 1,
              categories: Optional[Sequence[str]] = None) -> Dict[str, Path]:
    """One student per data category: ``<out>/<category>/{student.gst,stats.gst,curve.csv}``."""
    stage = "train"
    data_dir, out = Path(data_dir), Path(out)
    manifest = _read_json(data_dir / "manifest.json", stage)
    teacher, tmeta = load_teacher(teacher_path)
    if teacher.cfg != cfg.net:
        raise StageError(stage, f"teacher network {teacher.cfg} does not match the config's {cfg.net}")
    teacher_digest = file_sha256(teacher_path)
    scfg = cfg.student
    cfg.write(out)
    written = {}
    for cat in _categories(manifest, categories):
        entries = [e for e in manifest["scans"] if e["category"] == cat and e["split"] == "train"]
        if not entries:
            raise StageError(stage, f"category {cat!r} has no training scans")

        def load(e):
            path = data_dir / e["file"]
            return sample_cloud(load_scan(path).to_cloud(), scfg.n, _derived_seed(cfg.seed, file_sha256(path)))

        clouds = thread_map(load, entries, threads)
        s = scaling_factor(clouds, cfg.net.k)
        clouds = [normalize_cloud(c, s) for c in clouds]
        stats = compute_feature_stats(teacher, clouds)

        def on_epoch(epoch, tr, va):
            log.info("student[%s] %d/%d train %.5f val %.5f", cat, epoch, scfg.epochs, tr, va)

        result: StudentResult = train_student(teacher, stats, [c.points for c in clouds], scfg, threads, on_epoch)
        d = out / cat
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "kind": "student",
            "config_hash": cfg.hash,
            "category": cat,
            "scale": s,
            "net": cfg.net.to_dict(),
            "student": scfg.to_dict(),
            "best_epoch": result.best_epoch,
            "teacher_sha256": teacher_digest,
        }
        save_checkpoint(d / "student.gst", result.best, meta)
        save_container(d / "stats.gst", {"mu": stats.mu, "sigma": stats.sigma},
                       {"kind": "stats", "config_hash": cfg.hash, "category": cat, "teacher_sha256": teacher_digest})
        write_curve(d / "curve.csv", result.curve)
        written[cat] = d
    return written


def load_student(path, stats_path) -> Tuple[DescriptorNet, FeatureStats, dict]:
    store, meta = load_checkpoint(path)
    if meta.get("kind") != "student":
        raise FormatError(f"{path} is not a student checkpoint")
    arrays, smeta = load_container(stats_path)
    if smeta.get("kind") != "stats" or "mu" not in arrays or "sigma" not in arrays:
        raise FormatError(f"{stats_path} is not a feature-statistics file")
    if smeta.get("teacher_sha256") != meta.get("teacher_sha256"):
        raise FormatError("student and statistics were computed against different teachers")
    return DescriptorNet(NetConfig(**meta["net"]), store.params), FeatureStats(arrays["mu"], arrays["sigma"]), meta


# score ---------------------------------------------------------------------

def score_file(teacher: DescriptorNet, student: DescriptorNet, stats: FeatureStats, smeta: dict, src: Path,
               dst: Path, seed: int, category: Optional[str] = None) -> Path:
    """Score one ``.geoscan`` or ``.geopc`` file into a ``.geoscore`` file."""
    src = Path(src)
    digest = file_sha256(src)
    if src.suffix == ".geoscan":
        cloud = load_scan(src).to_cloud()
    else:
        c = load_cloud(src)
        cloud = PointCloud(c.points, np.arange(len(c)))
    cloud = sample_cloud(cloud, int(smeta["student"]["n"]), _derived_seed(seed, digest))
    cloud = normalize_cloud(cloud, float(smeta["scale"]))
    scores = score_cloud(teacher, student, stats, cloud.points)
    meta = {
        "config_hash": smeta["config_hash"],
        "source": src.name,
        "source_sha256": digest,
        "category": category or smeta.get("category", ""),
    }
    dst = Path(dst)
    dst.parent.mkdir(parents=True, exist_ok=True)
    save_scores(dst, cloud.origin, scores, meta)
    return dst


def run_score_dir(teacher_path, student_path, stats_path, data_dir: Path, out: Path, seed: int,
                  threads: int = 1) -> List[Path]:
    """Score every test scan of the student's category into ``<out>/<category>/``."""
    teacher, _ = load_teacher(teacher_path)
    student, stats, smeta = load_student(student_path, stats_path)
    if smeta["teacher_sha256"] != file_sha256(teacher_path):
        raise StageError("score", "student was trained against a different teacher checkpoint")
    data_dir, out = Path(data_dir), Path(out)
    manifest = _read_json(data_dir / "manifest.json", "score")
    cat = smeta["category"]
    entries = [e for e in manifest["scans"] if e["category"] == cat and e["split"] == "test"]
    if not entries:
        raise StageError("score", f"no test scans for category {cat!r}")
    cfg_src = Path(student_path).parent.parent / "config.resolved.txt"
    if cfg_src.exists():
        out.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(cfg_src, out / "config.resolved.txt")

    def job(e):
        dst = out / cat / (Path(e["file"]).stem + ".geoscore")
        return score_file(teacher, student, stats, smeta, data_dir / e["file"], dst, seed, cat)

    return thread_map(job, entries, threads)


# eval ----------------------------------------------------------------------

def collect(scores_dir: Path, data_dir: Path):
    """Match score files to test scans, verifying provenance; returns per-category (maps, scans) and the hash."""
    stage = "eval"
    scores_dir, data_dir = Path(scores_dir), Path(data_dir)
    manifest = _read_json(data_dir / "manifest.json", stage)
    grouped: Dict[str, Tuple[list, list]] = {}
    hashes = set()
    for e in manifest["scans"]:
        if e["split"] != "test":
            continue
        scan_path = data_dir / e["file"]
        score_path = scores_dir / e["category"] / (Path(e["file"]).stem + ".geoscore")
        if not score_path.exists():
            continue
        sf = load_scores(score_path)
        if sf.meta.get("source_sha256") != file_sha256(scan_path):
            raise StageError(stage, f"{score_path} was not computed from {scan_path}")
        hashes.add(sf.meta.get("config_hash", ""))
        scan = load_scan(scan_path)
        valid = scan.valid.ravel()
        if sf.indices.size and (sf.indices.min() < 0 or sf.indices.max() >= valid.size or not valid[sf.indices].all()):
            raise StageError(stage, f"{score_path} references pixels that are not valid in {scan_path}")
        amap = harmonic_interpolate(scan, sf.indices, sf.scores)
        maps, scans = grouped.setdefault(e["category"], ([], []))
        maps.append(amap)
        scans.append(scan)
    if not grouped:
        raise StageError(stage, f"no score files under {scores_dir} match test scans in {data_dir}")
    if len(hashes) != 1:
        raise StageError(stage, f"score files disagree on the config hash: {sorted(hashes)}")
    return grouped, hashes.pop()


def run_eval(scores_dir: Path, data_dir: Path, limits: Sequence[float], out_csv: Path):
    grouped, config_hash = collect(scores_dir, data_dir)
    results = {cat: CategoryResult(pro_curve(maps, scans), len(scans)) for cat, (maps, scans) in grouped.items()}
    out_csv = Path(out_csv)
    paths = write_report(out_csv.parent, results, limits, config_hash, out_csv.name)
    cfg_src = Path(scores_dir) / "config.resolved.txt"
    if cfg_src.exists() and cfg_src.resolve() != (out_csv.parent / "config.resolved.txt").resolve():
        shutil.copyfile(cfg_src, out_csv.parent / "config.resolved.txt")
    return summarize(results, limits), paths


# e2e -----------------------------------------------------------------------

def run_e2e(cfg: RunConfig, out: Path, threads: int = 1):
    """synth, gen-scenes, pretrain, train, score and eval under one output directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    stages = [
        ("synth", lambda: run_synth(cfg, out / "data")),
        ("gen-scenes", lambda: run_gen_scenes(cfg, out / "scenes", threads)),
        ("pretrain", lambda: run_pretrain(cfg, out / "scenes", out / "teacher", threads)),
        ("train", lambda: run_train(cfg, out / "teacher" / "teacher.gst", out / "data", out / "students", threads)),
    ]
    for name, fn in stages:
        _staged(name, fn)
    students = sorted(p for p in (out / "students").iterdir() if p.is_dir())

    def score_all():
        for d in students:
            run_score_dir(out / "teacher" / "teacher.gst", d / "student.gst", d / "stats.gst", out / "data",
                          out / "scores", cfg.seed, threads)

    _staged("score", score_all)
    return _staged("eval", lambda: run_eval(out / "scores", out / "data", cfg.limits, out / "report.csv"))


def _staged(name, fn):
    log.info("stage %s", name)
    try:
        return fn()
    except StageError:
        raise
    except (GeostError, ValueError, OSError, RuntimeError, KeyError) as exc:
        raise StageError(name, str(exc)) from exc

"""End-to-end orchestration: dataset build, training, distillation, eval.

All commands are deterministic in (config, seed): model init, shuffling,
and scene generation each draw from their own seed streams, teacher
outputs are cached with gradients disabled, and every output directory
gets a manifest.json listing produced files with sha256 hashes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import distill as dl
from .autodiff import AdamW, Tensor
from .bev import foreground_view_masks, write_pgm
from .config import ConfigError, RunConfig
from .geometry import CameraRig, surround_rig
from .metrics import (DepthEvalResult, DetEvalResult, eval_depth, eval_detection,
                      eval_range_banded)
from .models import DetectionNet, check_teacher_student, detect_decode
from .synthworld import (Sample, generate_scene, load_scene_dir, make_sample,
                         save_scene_dir)

LOSS_CSV_HEADER = ["step", "L_task", "L_soft", "L_bev", "L_cd", "L_fd", "total"]


@dataclass
class Switches:
    """Which distillation terms are active, and how the BEV mask is built."""

    soft: bool = False
    depth: bool = False
    bev: bool = False
    foreground_mask: bool = True
    view_mask: bool = True

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Switches":
        return cls(cfg.soft, cfg.depth, cfg.bev, cfg.foreground_mask, cfg.view_mask)

    @classmethod
    def none(cls) -> "Switches":
        return cls(False, False, False, True, True)

    def any_distill(self) -> bool:
        return self.soft or self.depth or self.bev


# -- dataset -------------------------------------------------------------------


def build_rig(cfg: RunConfig) -> CameraRig:
    return surround_rig(n_cameras=cfg.cameras, hfov_deg=cfg.fov_deg,
                        image_height=cfg.image_height, image_width=cfg.image_width,
                        camera_height=cfg.camera_height, camera_radius=cfg.camera_radius,
                        lidar_height=cfg.lidar_height)


def scene_name(index: int) -> str:
    return f"{index:05d}"


def cmd_gen_data(cfg: RunConfig) -> Path:
    """Write train + val scene directories and the dataset manifest."""
    root = Path(cfg.dataset_dir)
    scenes_dir = root / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    rig = build_rig(cfg)
    scan = cfg.scan()
    grid = cfg.grid()
    entries = []
    total = cfg.train_scenes + cfg.val_scenes
    for i in range(total):
        split = "train" if i < cfg.train_scenes else "val"
        scene = generate_scene(seed=int(np.random.default_rng([cfg.seed, i]).integers(2 ** 31)),
                               n_boxes=cfg.n_boxes, class_count=cfg.class_count,
                               extent=grid, rig=rig, scan=scan,
                               max_center_range=cfg.max_center_range)
        sample = make_sample(scene, cfg.feature_size(), grid, cfg.class_count,
                             sigma_gain=cfg.heatmap_sigma_gain)
        save_scene_dir(scenes_dir / scene_name(i), scene, sample, split)
        entries.append({"index": i, "split": split, "path": f"scenes/{scene_name(i)}"})
    manifest = {"scene_count": total, "train": cfg.train_scenes, "val": cfg.val_scenes,
                "seed": cfg.seed, "scenes": entries}
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root


def load_split(cfg: RunConfig, split: str) -> list[Sample]:
    """Load every sample of a dataset split (depth/heatmap GT recomputed)."""
    root = Path(cfg.dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"dataset manifest not found: {manifest_path} (run gen-data first)")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    samples = []
    for entry in manifest["scenes"]:
        if entry["split"] != split:
            continue
        sample, _ = load_scene_dir(root / entry["path"], cfg.feature_size(), cfg.grid(),
                                   cfg.class_count, sigma_gain=cfg.heatmap_sigma_gain)
        samples.append(sample)
    if not samples:
        raise ValueError(f"dataset split '{split}' is empty")
    return samples


def dataset_rig(cfg: RunConfig) -> CameraRig:
    """Rig stored with the dataset (scene 0); falls back to the config rig."""
    root = Path(cfg.dataset_dir)
    calib = root / "scenes" / scene_name(0) / "calib.json"
    if calib.exists():
        from .geometry import load_calibration
        return load_calibration(calib)
    return build_rig(cfg)


# -- masks and teacher cache ------------------------------------------------------


def sample_masks(cfg: RunConfig, sample: Sample, rig: CameraRig) -> dict:
    """Foreground/view masks for one sample's point cloud.

    Returns occupancy, the smoothed foreground mask, and the per-camera
    view masks as plain arrays.
    """
    occ, smoothed, views = foreground_view_masks(
        sample.cloud, rig, cfg.grid(), sigma=cfg.mask_sigma, z_range=cfg.z_range())
    return {"occupancy": occ.values, "foreground": smoothed.values,
            "views": np.stack([v.values for v in views])}


def distill_masks(cfg: RunConfig, masks: dict, switches: Switches) -> np.ndarray:
    """BEV-loss masks per the ablation switches, shape (K or 1, rows, cols).

    view+foreground: per-camera masks; foreground only: the single smoothed
    mask; neither: an all-ones mask (plain unmasked feature matching).
    """
    if switches.foreground_mask and switches.view_mask:
        return masks["views"]
    if switches.foreground_mask:
        return masks["foreground"][None]
    return np.ones_like(masks["foreground"])[None]


@dataclass
class TeacherCache:
    """Detached teacher outputs for every training sample."""

    bev: list
    depth_logits: list
    fine_depth: list
    heatmap: list


def build_teacher_cache(teacher: DetectionNet, samples: list[Sample]) -> TeacherCache:
    cache = TeacherCache([], [], [], [])
    with ad.no_grad():
        for s in samples:
            out = teacher.forward(s.images)
            cache.bev.append(out.bev.data)
            cache.depth_logits.append(out.depth_logits.data)
            cache.fine_depth.append(out.fine_depth.data)
            cache.heatmap.append(out.heatmap.data)
    return cache


# -- training ----------------------------------------------------------------------


def build_net(cfg: RunConfig, role: str, rig: CameraRig, seed: int) -> DetectionNet:
    return DetectionNet(cfg.model_spec(role), rig, cfg.frustum(), cfg.grid(), seed=seed)


def _batched(indices: np.ndarray, batch: int):
    for i in range(0, len(indices), batch):
        yield indices[i:i + batch]


def task_loss(cfg: RunConfig, out, heat_gt: np.ndarray, depth_gt: np.ndarray
              ) -> tuple[Tensor, dict]:
    """Detection + depth supervision: focal + SIL + depth-bin BCE."""
    parts = {}
    focal = dl.center_focal_loss(out.heatmap, heat_gt, cfg.focal_alpha, cfg.focal_beta)
    total = focal
    parts["focal"] = focal.item()
    valid = depth_gt > 0
    if valid.any():
        sil = dl.scale_invariant_depth_loss(out.fine_depth, depth_gt)
        anchor = dl.log_depth_scale_anchor(out.fine_depth, depth_gt)
        bce = dl.coarse_depth_bce(out.depth_prob, depth_gt, cfg.frustum().depth_centers)
        total = total + cfg.sil_weight * (sil + cfg.scale_anchor_weight * anchor) \
            + cfg.coarse_weight * bce
        parts["sil"] = sil.item()
        parts["coarse_bce"] = bce.item()
    else:
        parts["sil"] = 0.0
        parts["coarse_bce"] = 0.0
    return total, parts


def train_student_like(cfg: RunConfig, role: str, samples: list[Sample],
                       run_seed: int, switches: Switches,
                       teacher: DetectionNet | None = None,
                       loss_csv: Path | None = None,
                       init_state: dict | None = None,
                       teacher_cache: TeacherCache | None = None) -> DetectionNet:
    """Train one network; with distillation switches on, a teacher is required.

    The RNG streams (init, shuffling) depend only on (run_seed, role), so
    a distillation run with every switch off reproduces plain task
    training bit for bit.  ``teacher_cache`` lets callers reuse the
    (deterministic) teacher forward passes across runs.
    """
    rig = dataset_rig(cfg)
    net = build_net(cfg, role, rig, seed=run_seed)
    if init_state is not None:
        net.load_state(init_state)
    if role == "teacher":
        epochs, lr, wd, batch = (cfg.teacher_epochs, cfg.teacher_lr,
                                 cfg.teacher_weight_decay, cfg.teacher_batch)
    else:
        epochs, lr, wd, batch = (cfg.student_epochs, cfg.student_lr,
                                 cfg.student_weight_decay, cfg.student_batch)
    if switches.any_distill():
        if teacher is None:
            raise ConfigError("distillation switches enabled but no teacher checkpoint given")
        check_teacher_student(teacher.spec, net.spec)
        cache = teacher_cache if teacher_cache is not None else build_teacher_cache(teacher, samples)
    else:
        cache = None
    masks = None
    if switches.bev:
        masks = [distill_masks(cfg, sample_masks(cfg, s, rig), switches) for s in samples]
    weights = cfg.loss_weights()
    opt = AdamW(net.parameters(), lr=lr, weight_decay=wd)
    shuffle_rng = np.random.default_rng([run_seed, 0x5AFF])

    rows = []
    step = 0
    heat_gt_all = np.stack([s.heatmap_gt for s in samples])
    depth_gt_all = np.stack([s.depth_gt for s in samples])
    images_all = np.stack([s.images for s in samples])
    for _ in range(epochs):
        order = shuffle_rng.permutation(len(samples))
        for chunk in _batched(order, batch):
            b = len(chunk)
            k = rig.n_cameras
            hf, wf = cfg.feature_size()
            out = net.forward_batch(images_all[chunk])
            heat_gt = heat_gt_all[chunk]
            depth_gt = depth_gt_all[chunk].reshape(b * k, hf, wf)
            total, parts = task_loss(cfg, out, heat_gt, depth_gt)
            report = dl.LossReport(task=total.item(), focal=parts["focal"],
                                   sil=parts["sil"], coarse_bce=parts["coarse_bce"])
            if switches.soft:
                soft = dl.soft_label_loss(out.heatmap, np.stack([cache.heatmap[i] for i in chunk]),
                                          distance=cfg.soft_label_distance)
                total = total + cfg.soft_weight * soft
                report.soft = soft.item()
            if switches.depth:
                t_logits = np.concatenate([cache.depth_logits[i] for i in chunk])
                cd = dl.coarse_depth_loss(out.depth_logits, t_logits, weights.temperature)
                fd = dl.fine_depth_loss(out.fine_depth,
                                        np.concatenate([cache.fine_depth[i] for i in chunk]))
                depth_term = dl.depth_distill_loss(cd, fd, weights.alpha)
                total = total + weights.gamma * depth_term
                report.coarse = cd.item()
                report.fine = fd.item()
                report.depth = depth_term.item()
            if switches.bev:
                bev_t = np.stack([cache.bev[i] for i in chunk])
                m = np.stack([masks[i] for i in chunk])
                bev_loss = dl.bev_distill_loss(bev_t, out.bev, m)
                total = total + weights.beta * bev_loss
                report.bev = bev_loss.item()
            report.total = total.item()
            opt.zero_grad()
            total.backward()
            opt.step()
            rows.append([step, report.task, report.soft, report.bev,
                         report.coarse, report.fine, report.total])
            step += 1
    if loss_csv is not None:
        _write_csv(loss_csv, LOSS_CSV_HEADER, rows)
    return net


def _write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])


def cmd_train_teacher(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = load_split(cfg, "train")
    net = train_student_like(cfg, "teacher", samples, run_seed=cfg.seed,
                             switches=Switches.none(),
                             loss_csv=out_dir / "teacher_loss.csv")
    ckpt = out_dir / "teacher.ckpt"
    ad.save_checkpoint(ckpt, net.state_dict())
    return ckpt


def cmd_train_student(cfg: RunConfig, out_dir: Path, tag: str = "student") -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = load_split(cfg, "train")
    net = train_student_like(cfg, "student", samples, run_seed=cfg.seed,
                             switches=Switches.none(),
                             loss_csv=out_dir / f"{tag}_loss.csv")
    ckpt = out_dir / f"{tag}.ckpt"
    ad.save_checkpoint(ckpt, net.state_dict())
    return ckpt


def load_net(cfg: RunConfig, ckpt: Path, role: str | None = None) -> DetectionNet:
    """Build a net and load a checkpoint; role is inferred from shapes if omitted."""
    state = ad.load_checkpoint(ckpt)
    rig = dataset_rig(cfg)
    roles = [role] if role else ["student", "teacher"]
    last_error = None
    for r in roles:
        net = build_net(cfg, r, rig, seed=0)
        try:
            net.load_state(state)
            return net
        except ad.CheckpointError as e:
            last_error = e
    raise ad.CheckpointError(f"{ckpt}: checkpoint matches no model role: {last_error}")


def cmd_distill(cfg: RunConfig, teacher_ckpt: Path, out_dir: Path,
                tag: str = "distilled", init_ckpt: Path | None = None,
                switches: Switches | None = None, run_seed: int | None = None,
                teacher_cache: TeacherCache | None = None,
                samples: list[Sample] | None = None) -> Path:
    """Distill a student from a trained teacher per the config switches."""
    out_dir.mkdir(parents=True, exist_ok=True)
    switches = Switches.from_config(cfg) if switches is None else switches
    if samples is None:
        samples = load_split(cfg, "train")
    teacher = load_net(cfg, teacher_ckpt, role="teacher")
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    init_state = ad.load_checkpoint(init_ckpt) if init_ckpt is not None else None
    net = train_student_like(cfg, "student", samples,
                             run_seed=cfg.seed if run_seed is None else run_seed,
                             switches=switches, teacher=teacher,
                             loss_csv=out_dir / f"{tag}_loss.csv",
                             init_state=init_state, teacher_cache=teacher_cache)
    after = teacher.state_dict()
    for name, arr in before.items():
        if not np.array_equal(arr, after[name]):
            raise ad.TrainingError(f"teacher parameter '{name}' changed during distillation")
    ckpt = out_dir / f"{tag}.ckpt"
    ad.save_checkpoint(ckpt, net.state_dict())
    return ckpt


# -- evaluation ----------------------------------------------------------------------


@dataclass
class EvalReport:
    depth_mean: DepthEvalResult
    depth_per_camera: list
    detection: DetEvalResult
    banded_map: dict

    def rows(self) -> list:
        rows = [["metric", "value"]]
        for name, value in self.depth_mean.as_dict().items():
            rows.append([f"depth_{name}", value])
        for k, res in enumerate(self.depth_per_camera):
            rows.append([f"depth_abs_rel_cam{k}", res.abs_rel])
        rows.append(["mAP", self.detection.mean_ap])
        rows.append(["ATE", self.detection.translation_error])
        rows.append(["composite", self.detection.composite])
        for cls in sorted(self.detection.class_ap):
            rows.append([f"AP_class{cls}", self.detection.class_ap[cls]])
        for band in sorted(self.banded_map):
            value = self.banded_map[band]
            rows.append([f"mAP_0_{int(band)}m", "absent" if value is None else value])
        return rows


def evaluate_net(cfg: RunConfig, net: DetectionNet, samples: list[Sample]) -> EvalReport:
    """Depth metrics (averaged over cameras) and detection metrics on a split."""
    k = net.rig.n_cameras
    preds_depth = [[] for _ in range(k)]
    gts_depth = [[] for _ in range(k)]
    det_preds = []
    det_gts = []
    with ad.no_grad():
        for i, s in enumerate(samples):
            out = net.forward(s.images)
            fine = out.fine_depth.data
            for cam in range(k):
                preds_depth[cam].append(fine[cam].reshape(-1))
                gts_depth[cam].append(s.depth_gt[cam].reshape(-1))
            for det in detect_decode(out.heatmap.data, net.grid,
                                     threshold=cfg.score_threshold,
                                     max_dets=cfg.max_detections):
                det_preds.append((i, det.class_id, det.x, det.y, det.score))
            for box in s.boxes:
                det_gts.append((i, box.class_id, box.center[0], box.center[1]))
    per_cam = [eval_depth(np.concatenate(preds_depth[cam]), np.concatenate(gts_depth[cam]))
               for cam in range(k)]
    mean = DepthEvalResult(*[float(np.mean([getattr(r, f) for r in per_cam]))
                             for f in ("abs_rel", "sq_rel", "rmse", "rmse_log",
                                       "a1", "a2", "a3")])
    detection = eval_detection(det_preds, det_gts)
    banded = eval_range_banded(det_preds, det_gts)
    return EvalReport(mean, per_cam, detection, banded)


def cmd_eval(cfg: RunConfig, ckpt: Path, split: str, out_dir: Path,
             role: str | None = None) -> EvalReport:
    """Evaluate a checkpoint on a split; writes metrics CSV and mask/depth dumps."""
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = load_split(cfg, split)
    net = load_net(cfg, ckpt, role=role)
    report = evaluate_net(cfg, net, samples)
    _write_csv(out_dir / "metrics.csv", report.rows()[0], report.rows()[1:])
    viz = out_dir / "viz"
    viz.mkdir(exist_ok=True)
    rig = dataset_rig(cfg)
    first = samples[0]
    masks = sample_masks(cfg, first, rig)
    write_pgm(viz / "mask_occupancy.pgm", masks["occupancy"])
    write_pgm(viz / "mask_foreground.pgm", masks["foreground"])
    for cam in range(masks["views"].shape[0]):
        write_pgm(viz / f"mask_view{cam}.pgm", masks["views"][cam])
    with ad.no_grad():
        out = net.forward(first.images)
    for cam in range(rig.n_cameras):
        write_pgm(viz / f"depth_cam{cam}.pgm", out.fine_depth.data[cam])
    _print_table(report)
    return report


def _print_table(report: EvalReport) -> None:
    rows = report.rows()
    width = max(len(str(r[0])) for r in rows)
    for name, value in rows[1:]:
        if isinstance(value, float):
            print(f"{name:<{width}}  {value:.4f}")
        else:
            print(f"{name:<{width}}  {value}")


# -- ablation ---------------------------------------------------------------------

ABLATION_ROWS = [
    ("base", Switches(False, False, False)),
    ("soft", Switches(True, False, False)),
    ("soft+depth", Switches(True, True, False)),
    ("soft+depth+bev", Switches(True, True, True)),
    ("depth+bev", Switches(False, True, True)),
]


def cmd_ablate(cfg: RunConfig, teacher_ckpt: Path, out_dir: Path) -> list[dict]:
    """Train and evaluate the five ablation variants with a shared seed."""
    out_dir.mkdir(parents=True, exist_ok=True)
    val = load_split(cfg, "val")
    results = []
    for tag, switches in ABLATION_ROWS:
        safe = tag.replace("+", "_")
        ckpt = cmd_distill(cfg, teacher_ckpt, out_dir, tag=safe, switches=switches)
        net = load_net(cfg, ckpt, role="student")
        report = evaluate_net(cfg, net, val)
        results.append({
            "variant": tag,
            "soft": switches.soft, "depth": switches.depth, "bev": switches.bev,
            "composite": report.detection.composite,
            "mAP": report.detection.mean_ap,
            "ATE": report.detection.translation_error,
            "abs_rel": report.depth_mean.abs_rel,
        })
    header = ["variant", "soft", "depth", "bev", "composite", "mAP", "ATE", "abs_rel"]
    _write_csv(out_dir / "ablation.csv", header,
               [[r[h] for h in header] for r in results])
    width = max(len(r["variant"]) for r in results)
    print(f"{'variant':<{width}}  soft depth bev  composite  mAP     ATE    abs_rel")
    for r in results:
        flags = "    ".join("x" if r[f] else "-" for f in ("soft", "depth", "bev"))
        print(f"{r['variant']:<{width}}  {flags:<14}  {r['composite']:.4f}   "
              f"{r['mAP']:.4f}  {r['ATE']:.3f}  {r['abs_rel']:.4f}")
    return results


# -- manifests -------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path) -> Path:
    """List every file under out_dir (except the manifest) with its hash."""
    out_dir = Path(out_dir)
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(out_dir))] = sha256_file(p)
    manifest = {"generated_unix": int(time.time()), "files": files}
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path

"""Experiment procedures: the iterative NBV loop, metrics, the weight sweep,
both ablations, and deterministic suite execution with a worker pool.

Every random draw derives from explicit integer seeds, so records are
bit-identical across reruns and across worker counts.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from dataclasses import dataclass

import numpy as np

from .alignment import align_target, mpvpe, perturb_initial_mesh, visible_parts
from .config import RunConfig
from .elevation import build_elevation_map, traversable_cells
from .geometry import TARGET_LABEL, Pose, PointCloud
from .humanoid import LabeledMesh
from .scene import (Observation, Scene, SceneGenerationError, generate_scene,
                    keypoint_visibility_batch, oracle_keypoint_visibility,
                    oracle_detection, place_base, render_observation)
from .scoring import (OccupancyGrid, Weights, evaluate_candidates, integrate_observation,
                      pred_gain, predicted_novelty, score_from_counts, volumetric_gain)
from .viewpoints import (CandidateView, aim_pitch, camera_from_base, default_mount,
                         sample_candidates_elevation, sample_candidates_shell)

GEN_BAND = (0.35, 0.78)
SNR_SENTINEL = 1e6


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts."""
    ss = np.random.SeedSequence(list(int(p) for p in parts))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class IterationRecord:
    iteration: int
    cam: Pose
    success: bool
    area: float
    r_vis: float
    mpvpe_m: float | None
    flags: tuple[str, ...]


@dataclass
class TrialRecord:
    family: str
    scene_seed: int
    method: str
    trial_seed: int
    iterations: list[IterationRecord]
    flags: tuple[str, ...] = ()


def compute_metrics(obs: Observation, scene: Scene, detected: bool) -> tuple[float, float]:
    """Normalized target area and keypoint-visibility ratio; zeros on failure."""
    if not detected:
        return 0.0, 0.0
    area = float(obs.gt_mask.mean())
    n_vis, n_kp = oracle_keypoint_visibility(scene, obs.cam, obs.K)
    return area, n_vis / n_kp


def _estimate(scene: Scene, obs: Observation, cfg: RunConfig, seed: int):
    """Perturb the true mesh, align it to the observation; world-frame result."""
    perturbed_w = perturb_initial_mesh(scene.target, obs.cam, seed,
                                       cfg.depth_sigma, cfg.lateral_sigma, cfg.rot_sigma)
    parts = visible_parts(scene, obs.cam, obs.K, cfg.part_frac_threshold,
                          cfg.label_flip_prob, seed)
    mesh_cam = perturbed_w.transformed(obs.cam.inverse())
    res = align_target(obs, mesh_cam, parts, cfg.boundary_noise, seed,
                       cfg.icp_config(), cfg.center_on_centroid)
    aligned_w = res.aligned.transformed(obs.cam)
    return aligned_w, mpvpe(aligned_w, scene.target), res.flags


def _predicted_cloud(scene: Scene, trial_seed: int, cfg: RunConfig) -> PointCloud:
    """Oracle stand-in for a learned shape completer: subsampled true vertices."""
    rng = np.random.default_rng([5, trial_seed])
    verts = scene.target.vertices
    n = max(1, int(round(len(verts) * cfg.pred_subsample)))
    idx = rng.choice(len(verts), size=n, replace=False)
    pts = verts[idx] + rng.normal(0.0, cfg.pred_jitter, size=(n, 3))
    return PointCloud(pts)


def _grid_for(scene: Scene, cfg: RunConfig) -> OccupancyGrid:
    lo = np.array([scene.terrain.origin[0], scene.terrain.origin[1],
                   float(scene.terrain.heights.min()) - 0.2])
    hi = np.array([scene.terrain.extent[0], scene.terrain.extent[1],
                   float(scene.terrain.heights.max()) + 3.0])
    return OccupancyGrid.covering(lo, hi, cfg.voxel)


def _inside_any_box(scene: Scene, point: np.ndarray, margin: float = 0.0) -> bool:
    return any(bool(b.contains(point[None, :], margin)[0]) for b in scene.occluders)


def run_trial(scene: Scene, method: str, cfg: RunConfig, trial_seed: int,
              weights: Weights | None = None) -> TrialRecord:
    """Iterative observe -> estimate -> sample -> score -> move loop.

    Iteration 0 is the spawn view. Metrics are recorded on each newly
    acquired view; on detection failure the method keeps planning from the
    last valid target hypothesis.
    """
    w = weights or cfg.weight_obj()
    K = cfg.intrinsics()
    mount = default_mount()
    evalcfg = cfg.evaluator_config()

    cam = scene.spawn_camera(mount)
    base = scene.spawn
    grid = _grid_for(scene, cfg) if method == "volumetric" else None
    predicted = _predicted_cloud(scene, trial_seed, cfg) if method == "pred" else None
    acc_target: list[np.ndarray] = []
    hyp: LabeledMesh | None = None
    records: list[IterationRecord] = []

    def take(it: int, flags: tuple[str, ...]):
        nonlocal hyp, grid
        obs = render_observation(scene, cam, K, cfg.stride, cfg.max_range)
        detected = oracle_detection(scene, obs, cfg.tau_area, cfg.tau_kp)
        area, r_vis = compute_metrics(obs, scene, detected)
        mp_val = None
        if detected:
            hyp, mp_val, est_flags = _estimate(scene, obs, cfg, derive_seed(trial_seed, 7, it))
            flags = flags + est_flags
            tgt = obs.cloud.points[obs.cloud.labels == TARGET_LABEL]
            if len(tgt):
                acc_target.append(obs.cam.apply(tgt))
        else:
            flags = flags + ("detection_failed",)
            if hyp is not None:
                flags = flags + ("kept_last_hypothesis",)
        if grid is not None:
            grid = integrate_observation(grid, obs)
        records.append(IterationRecord(it, cam, detected, area, r_vis, mp_val, flags))
        return obs

    obs = take(0, ())
    cloud_w = obs.cloud.transformed(cam)

    for it in range(1, cfg.iterations + 1):
        flags: tuple[str, ...] = ()
        cand_seed = derive_seed(trial_seed, 11, it)
        if hyp is not None:
            centroid = hyp.centroid()
        else:
            centroid = cam.translation + cam.rotation[:, 2] * 3.0
            flags += ("no_hypothesis",)

        cands: list[CandidateView] | None = None
        if method == "shell_oa":
            cands = sample_candidates_shell(centroid, per_shell=cfg.shell_per_shell,
                                            seed=cand_seed)
        else:
            try:
                emap = build_elevation_map(scene, base, cam)
                trav = traversable_cells(emap, cfg.h_step, float(base.translation[2]))
                cands = sample_candidates_elevation(trav, centroid, cfg.m_candidates,
                                                    cfg.pitch_samples, cand_seed, mount,
                                                    scene.occluders)
            except ValueError:
                flags += ("candidate_generation_failed",)

        if cands is None:
            records.append(IterationRecord(it, cam, False, 0.0, 0.0, None, flags))
            continue

        if hyp is None:
            pos = np.stack([c.cam.translation for c in cands])
            best = cands[int(np.argmin(np.linalg.norm(pos - cam.translation, axis=1)))]
        else:
            if method in ("oa_nbv", "shell_oa"):
                scored = evaluate_candidates(cands, hyp, cloud_w, K, w, evalcfg)
                totals = np.array([s.s_total for s in scored])
            elif method == "volumetric":
                totals = np.array([volumetric_gain(c, grid, K, cfg.ray_budget)
                                   for c in cands], dtype=np.float64)
            elif method == "pred":
                observed_tgt = (PointCloud(np.vstack(acc_target)) if acc_target
                                else PointCloud(np.empty((0, 3))))
                novelty = predicted_novelty(predicted, observed_tgt, cfg.pred_min_dist)
                totals = np.array([pred_gain(c, predicted, cloud_w, K, evalcfg,
                                             cfg.pred_min_dist, novelty)
                                   for c in cands], dtype=np.float64)
            else:
                raise ValueError(f"unknown method {method!r}")
            best = cands[int(np.argmax(totals))]

        if method == "shell_oa":
            # execute by projecting the floating viewpoint onto the ground
            x, y = float(best.cam.translation[0]), float(best.cam.translation[1])
            infeasible = _inside_any_box(scene, best.cam.translation)
            infeasible |= any(b.footprint_distance_xy((x, y)) == 0.0 for b in scene.occluders)
            if not infeasible and scene.terrain.in_region(np.array(x), np.array(y)):
                yaw = float(np.arctan2(centroid[1] - y, centroid[0] - x))
                nbase = place_base(scene, x, y, yaw)
                cam0 = camera_from_base(nbase, 0.0, mount)
                alpha = aim_pitch(cam0.translation, centroid)
                ncam = camera_from_base(nbase, alpha, mount)
                if _inside_any_box(scene, ncam.translation):
                    infeasible = True
                else:
                    base, cam = nbase, ncam
            else:
                infeasible = True
            if infeasible:
                flags += ("selected_inside_obstacle",)
                records.append(IterationRecord(it, cam, False, 0.0, 0.0, None, flags))
                continue
        else:
            base, cam = best.base, best.cam

        obs = take(it, flags)
        cloud_w = obs.cloud.transformed(cam)

    return TrialRecord(scene.family, scene.seed, method, trial_seed, records)


# ---------------------------------------------------------------------------
# suites

def _run_task(args) -> list[TrialRecord]:
    family, seed, methods, cfg = args
    try:
        scene = generate_scene(family, seed, occlusion_band=GEN_BAND)
    except SceneGenerationError:
        return [TrialRecord(family, seed, m, seed, [], ("scene_generation_failed",))
                for m in methods]
    return [run_trial(scene, m, cfg, trial_seed=seed) for m in methods]


def run_suite(cfg: RunConfig, families=None, methods=None, scene_seeds=None,
              workers: int | None = None) -> list[TrialRecord]:
    """Run trials for every (family, scene seed, method), deterministically.

    Methods share the scene and candidate seeds, so score functions are the
    only difference between them.
    """
    families = families or (["indoor", "outdoor"] if cfg.family == "both" else [cfg.family])
    methods = tuple(methods or cfg.methods)
    if scene_seeds is None:
        scene_seeds = [cfg.seed + i for i in range(cfg.scenes)]
    tasks = [(fam, s, methods, cfg) for fam in families for s in scene_seeds]
    n_workers = workers if workers is not None else (cfg.workers or os.cpu_count() or 1)
    if n_workers <= 1 or len(tasks) <= 1:
        results = [_run_task(t) for t in tasks]
    else:
        with mp.get_context("fork").Pool(n_workers) as pool:
            results = pool.map(_run_task, tasks, chunksize=1)
    return [rec for group in results for rec in group]


def aggregate(records: list[TrialRecord]) -> list[dict]:
    """Per (family, method): success rate and metric means per iteration,
    plus the peak over iterations 1..max ('peak' rows)."""
    groups: dict[tuple[str, str], list[TrialRecord]] = {}
    for r in records:
        if r.iterations:
            groups.setdefault((r.family, r.method), []).append(r)
    rows = []
    for (family, method) in sorted(groups):
        recs = groups[(family, method)]
        horizon = max(len(r.iterations) for r in recs)
        per_iter = []
        for it in range(horizon):
            entries = [r.iterations[it] for r in recs if len(r.iterations) > it]
            n = len(entries)
            row = {
                "family": family, "method": method, "iteration": it, "n": n,
                "success_rate": float(np.mean([e.success for e in entries])),
                "mean_area": float(np.mean([e.area for e in entries])),
                "mean_r_vis": float(np.mean([e.r_vis for e in entries])),
            }
            per_iter.append(row)
            rows.append(row)
        later = per_iter[1:] or per_iter
        rows.append({
            "family": family, "method": method, "iteration": "peak", "n": per_iter[0]["n"],
            "success_rate": max(r["success_rate"] for r in later),
            "mean_area": max(r["mean_area"] for r in later),
            "mean_r_vis": max(r["mean_r_vis"] for r in later),
        })
    return rows


# ---------------------------------------------------------------------------
# weight sweep

@dataclass
class SweepCell:
    w_o: float
    w_a: float
    w_v: float
    snr: float
    mean_rvis: float
    std_rvis: float
    trials: int
    zero_std: bool = False


def _sweep_trial(args):
    family, scene_seed, trial_idx, cfg = args
    try:
        scene = generate_scene(family, scene_seed, occlusion_band=GEN_BAND)
    except SceneGenerationError:
        return None
    K = cfg.intrinsics()
    mount = default_mount()
    rng = np.random.default_rng([13, trial_idx])
    centroid_gt = scene.target.centroid()

    base = None
    for _ in range(8):
        bearing = rng.uniform(-np.pi, np.pi)
        dist = rng.uniform(2.5, 4.5)
        x, y = centroid_gt[:2] + dist * np.array([np.cos(bearing), np.sin(bearing)])
        if not scene.terrain.in_region(np.array(x), np.array(y)):
            continue
        if any(b.footprint_distance_xy((x, y)) < 0.35 for b in scene.occluders):
            continue
        yaw = float(np.arctan2(centroid_gt[1] - y, centroid_gt[0] - x))
        base = place_base(scene, float(x), float(y), yaw)
        break
    if base is None:
        return None
    cam0 = camera_from_base(base, 0.0, mount)
    cam = camera_from_base(base, aim_pitch(cam0.translation, centroid_gt), mount)

    obs = render_observation(scene, cam, K, cfg.stride, cfg.max_range)
    if not oracle_detection(scene, obs, cfg.tau_area, cfg.tau_kp):
        return None
    hyp, _, _ = _estimate(scene, obs, cfg, derive_seed(17, trial_idx))
    cloud_w = obs.cloud.transformed(cam)
    try:
        emap = build_elevation_map(scene, base, cam)
        trav = traversable_cells(emap, cfg.h_step, float(base.translation[2]))
        cands = sample_candidates_elevation(trav, hyp.centroid(), cfg.m_candidates,
                                            cfg.pitch_samples, derive_seed(19, trial_idx),
                                            mount, scene.occluders)
    except ValueError:
        return None

    scored = evaluate_candidates(cands, hyp, cloud_w, K, Weights.default(),
                                 cfg.evaluator_config())
    n_in = np.array([s.n_in for s in scored])
    n_occ = np.array([s.n_occ for s in scored])
    r_vis = keypoint_visibility_batch(scene, [c.cam for c in cands], K) / 17.0
    return n_in, n_occ, hyp.n_vertices, r_vis


def weight_sweep(cfg: RunConfig, families=None, trials: int | None = None,
                 workers: int | None = None):
    """Grid sweep over (w_o, w_a): per trial the candidate counts and oracle
    keypoint visibility are computed once, then every weight cell replays its
    own argmax. Returns (cells, argmax_cell, n_trials_used)."""
    families = families or (["indoor", "outdoor"] if cfg.family == "both" else [cfg.family])
    trials = trials if trials is not None else cfg.sweep_trials
    steps = int(round(1.0 / cfg.grid_step))
    cells = [(i, j) for i in range(steps + 1) for j in range(steps + 1 - i)]

    max_attempts = 3 * trials
    tasks = []
    for a in range(max_attempts):
        family = families[a % len(families)]
        tasks.append((family, 100_000 + a, a, cfg))

    n_workers = workers if workers is not None else (cfg.workers or os.cpu_count() or 1)
    achieved: dict[tuple[int, int], list[float]] = {c: [] for c in cells}
    used = 0
    K_pixels = cfg.intrinsics().n_pixels

    def consume(res) -> bool:
        nonlocal used
        if res is None:
            return False
        n_in, n_occ, n_m, r_vis = res
        valid = n_in > 0
        if not valid.any():
            return False
        for (i, j) in cells:
            w_o, w_a = i * cfg.grid_step, j * cfg.grid_step
            w = Weights(1.0 - w_o - w_a, w_a, w_o)
            _, _, _, totals = score_from_counts(n_in, n_occ, n_m, K_pixels, w)
            totals = np.where(valid, totals, -np.inf)
            achieved[(i, j)].append(float(r_vis[int(np.argmax(totals))]))
        used += 1
        return True

    if n_workers <= 1:
        for t in tasks:
            if used >= trials:
                break
            consume(_sweep_trial(t))
    else:
        with mp.get_context("fork").Pool(n_workers) as pool:
            for res in pool.imap(_sweep_trial, tasks, chunksize=1):
                if used >= trials:
                    break
                consume(res)

    out = []
    for (i, j) in cells:
        w_o, w_a = i * cfg.grid_step, j * cfg.grid_step
        w_v = 1.0 - w_o - w_a
        vals = np.array(achieved[(i, j)])
        mean = float(vals.mean()) if len(vals) else 0.0
        std = float(vals.std()) if len(vals) else 0.0
        zero = std == 0.0
        snr = SNR_SENTINEL if zero else mean / std
        out.append(SweepCell(round(w_o, 10), round(w_a, 10), round(w_v, 10),
                             snr, mean, std, len(vals), zero))
    ranked = [c for c in out if not c.zero_std] or out
    best = max(ranked, key=lambda c: (c.snr, c.w_o, c.w_a))
    return out, best, used


# ---------------------------------------------------------------------------
# ablations

def _alignment_task(args):
    family, seed, cfg = args
    try:
        scene = generate_scene(family, seed, occlusion_band=GEN_BAND)
    except SceneGenerationError:
        return {"seed": seed, "mpvpe_part": "", "mpvpe_full": "",
                "flags_part": "scene_generation_failed", "flags_full": ""}
    K = cfg.intrinsics()
    cam = scene.spawn_camera()
    obs = render_observation(scene, cam, K, cfg.stride, cfg.max_range)
    pseed = derive_seed(seed, 29)
    perturbed_w = perturb_initial_mesh(scene.target, cam, pseed,
                                       cfg.depth_sigma, cfg.lateral_sigma, cfg.rot_sigma)
    parts = visible_parts(scene, cam, K, cfg.part_frac_threshold,
                          cfg.label_flip_prob, pseed)
    mesh_cam = perturbed_w.transformed(cam.inverse())
    row = {"seed": seed}
    for tag, use_parts in (("part", parts), ("full", frozenset())):
        res = align_target(obs, mesh_cam, use_parts, cfg.boundary_noise, pseed,
                           cfg.icp_config(), cfg.center_on_centroid)
        aligned_w = res.aligned.transformed(cam)
        row[f"mpvpe_{tag}"] = mpvpe(aligned_w, scene.target)
        row[f"flags_{tag}"] = ";".join(res.flags)
    return row


def ablation_alignment(cfg: RunConfig, family: str = "outdoor",
                       n_seeds: int | None = None, workers: int | None = None) -> list[dict]:
    """Part-submesh vs full-mesh registration on occluded scenes, same
    perturbation per seed; per-seed error pairs."""
    n_seeds = n_seeds if n_seeds is not None else cfg.ablate_seeds
    tasks = [(family, 200_000 + s, cfg) for s in range(n_seeds)]
    n_workers = workers if workers is not None else (cfg.workers or os.cpu_count() or 1)
    if n_workers <= 1:
        return [_alignment_task(t) for t in tasks]
    with mp.get_context("fork").Pool(n_workers) as pool:
        return pool.map(_alignment_task, tasks, chunksize=1)


def _viewpoint_task(args):
    setting, seed, cfg = args
    family = "outdoor" if setting == "cluttered" else "indoor"
    try:
        scene = generate_scene(family, seed, occlusion_band=GEN_BAND)
    except SceneGenerationError:
        return []
    rows = []
    for sampler in ("elevation", "shell"):
        method = "oa_nbv" if sampler == "elevation" else "shell_oa"
        rec = run_trial(scene, method, cfg, trial_seed=seed)
        step = rec.iterations[1] if len(rec.iterations) > 1 else None
        inside = step is not None and "selected_inside_obstacle" in step.flags
        # verify geometrically, not just by flag
        if step is not None and _inside_any_box(scene, step.cam.translation):
            inside = True
        success = bool(step.success) if step is not None else False
        lost_los = (not success) and (not inside)
        rows.append({"setting": setting, "scene_seed": seed, "sampler": sampler,
                     "success": success, "inside_obstacle": inside,
                     "lost_los": lost_los})
    return rows


def ablation_viewpoint_gen(cfg: RunConfig, n_trials: int | None = None,
                           workers: int | None = None) -> list[dict]:
    """One NBV step per scene with each sampler, identical evaluator; records
    success plus the two shell failure classes."""
    n_trials = n_trials if n_trials is not None else cfg.ablate_trials
    cfg_one = cfg
    if cfg.iterations != 1:
        from dataclasses import replace
        cfg_one = replace(cfg, iterations=1)
    tasks = [("cluttered", 300_000 + s, cfg_one) for s in range(n_trials)]
    tasks += [("open", 310_000 + s, cfg_one) for s in range(n_trials)]
    n_workers = workers if workers is not None else (cfg.workers or os.cpu_count() or 1)
    if n_workers <= 1:
        groups = [_viewpoint_task(t) for t in tasks]
    else:
        with mp.get_context("fork").Pool(n_workers) as pool:
            groups = pool.map(_viewpoint_task, tasks, chunksize=1)
    return [row for g in groups for row in g]

"""File formats: ASCII PLY point clouds, OBJ meshes with a part-label sidecar,
CSV exports for maps/candidates/scores/records, and run manifests.

All writers are deterministic: floats are serialized with repr (shortest
round-trip), no timestamps.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .elevation import ElevationMap
from .geometry import PointCloud
from .humanoid import LabeledMesh
from .scene import Observation, Scene


def _f(x) -> str:
    return repr(float(x))


def write_ply(path: str, cloud: PointCloud) -> None:
    """ASCII PLY: x y z [nx ny nz] [label]."""
    has_n = cloud.normals is not None
    has_l = cloud.labels is not None
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        if has_n:
            fh.write("property double nx\nproperty double ny\nproperty double nz\n")
        if has_l:
            fh.write("property uchar label\n")
        fh.write("end_header\n")
        for i in range(len(cloud)):
            parts = [_f(v) for v in cloud.points[i]]
            if has_n:
                parts += [_f(v) for v in cloud.normals[i]]
            if has_l:
                parts.append(str(int(cloud.labels[i])))
            fh.write(" ".join(parts) + "\n")


def read_ply(path: str) -> PointCloud:
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        props: list[str] = []
        n_vertex = 0
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: unexpected end of header")
            line = line.strip()
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        rows = [fh.readline().split() for _ in range(n_vertex)]
    data = np.array(rows, dtype=np.float64) if rows else np.empty((0, len(props)))
    cols = {p: i for i, p in enumerate(props)}
    pts = data[:, [cols["x"], cols["y"], cols["z"]]]
    normals = None
    if "nx" in cols:
        normals = data[:, [cols["nx"], cols["ny"], cols["nz"]]]
    labels = data[:, cols["label"]].astype(np.uint8) if "label" in cols else None
    return PointCloud(pts, labels, normals)


def write_obj(path: str, mesh: LabeledMesh, labels_path: str | None = None) -> None:
    """OBJ mesh plus a sidecar with one integer part label per vertex line."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {_f(v[0])} {_f(v[1])} {_f(v[2])}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    labels_path = labels_path or path + ".labels"
    with open(labels_path, "w") as fh:
        for p in mesh.part_of:
            fh.write(f"{int(p)}\n")


def write_pgm_mask(path: str, mask: np.ndarray) -> None:
    """Binary mask as plain-text PGM (target pixels = 255)."""
    h, w = mask.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in mask:
            fh.write(" ".join("255" if v else "0" for v in row) + "\n")


def write_elevation_csv(heights_path: str, valid_path: str, emap: ElevationMap) -> None:
    n = emap.n
    with open(heights_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for i in range(n):
            wr.writerow([_f(emap.heights[i, j]) if emap.valid[i, j] else ""
                         for j in range(n)])
    with open(valid_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for i in range(n):
            wr.writerow([int(v) for v in emap.valid[i]])


def write_candidates_csv(path: str, cands) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["pos_idx", "pitch_idx", "base_x", "base_y", "base_z", "base_yaw",
                     "alpha"] + [f"cam_{i}{j}" for i in range(4) for j in range(4)])
        for c in cands:
            if c.base is not None:
                bt = c.base.translation
                byaw = float(np.arctan2(c.base.rotation[1, 0], c.base.rotation[0, 0]))
                base_cols = [_f(bt[0]), _f(bt[1]), _f(bt[2]), _f(byaw)]
            else:
                base_cols = ["", "", "", ""]
            m = c.cam.matrix().ravel()
            wr.writerow([c.id[0], c.id[1]] + base_cols + [_f(c.pitch_alpha)]
                        + [_f(v) for v in m])


def write_scores_csv(path: str, scored) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["pos_idx", "pitch_idx", "n_in", "n_occ", "s_v", "s_a", "s_o", "s_total"])
        for s in scored:
            wr.writerow([s.candidate.id[0], s.candidate.id[1], s.n_in, s.n_occ,
                         _f(s.s_v), _f(s.s_a), _f(s.s_o), _f(s.s_total)])


def write_trials_csv(path: str, records) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["family", "scene_seed", "method", "trial_seed", "iteration",
                     "success", "area", "r_vis", "mpvpe", "flags"]
                    + [f"cam_{i}{j}" for i in range(3) for j in range(4)])
        for r in records:
            if not r.iterations:
                wr.writerow([r.family, r.scene_seed, r.method, r.trial_seed, "", "", "",
                             "", "", ";".join(r.flags)] + [""] * 12)
                continue
            for e in r.iterations:
                m = e.cam.matrix()[:3, :].ravel()
                wr.writerow([r.family, r.scene_seed, r.method, r.trial_seed, e.iteration,
                             int(e.success), _f(e.area), _f(e.r_vis),
                             "" if e.mpvpe_m is None else _f(e.mpvpe_m),
                             ";".join(e.flags)] + [_f(v) for v in m])


def write_aggregate_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["family", "method", "iteration", "n", "success_rate",
                     "mean_area", "mean_r_vis"])
        for r in rows:
            wr.writerow([r["family"], r["method"], r["iteration"], r["n"],
                         _f(r["success_rate"]), _f(r["mean_area"]), _f(r["mean_r_vis"])])


def write_sweep_csvs(grid_path: str, cells_path: str, cells, grid_step: float) -> None:
    """Plot-ready SNR grid (rows w_a, cols w_o) plus the long-form cell table."""
    steps = int(round(1.0 / grid_step))
    by_key = {(round(c.w_o, 10), round(c.w_a, 10)): c for c in cells}
    with open(grid_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["w_a\\w_o"] + [_f(i * grid_step) for i in range(steps + 1)])
        for j in range(steps + 1):
            row = [_f(j * grid_step)]
            for i in range(steps + 1):
                c = by_key.get((round(i * grid_step, 10), round(j * grid_step, 10)))
                row.append(_f(c.snr) if c is not None else "")
            wr.writerow(row)
    with open(cells_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["w_o", "w_a", "w_v", "trials", "mean_rvis", "std_rvis", "snr",
                     "zero_std"])
        for c in cells:
            wr.writerow([_f(c.w_o), _f(c.w_a), _f(c.w_v), c.trials, _f(c.mean_rvis),
                         _f(c.std_rvis), _f(c.snr), int(c.zero_std)])


def write_dict_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(columns)
        for r in rows:
            out = []
            for c in columns:
                v = r.get(c, "")
                if isinstance(v, bool):
                    v = int(v)
                elif isinstance(v, float):
                    v = _f(v)
                out.append(v)
            wr.writerow(out)


def write_manifest(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_scene_json(path: str, scene: Scene) -> None:
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_scene_json(path: str) -> Scene:
    with open(path) as fh:
        return Scene.from_dict(json.load(fh))


def export_observation(out_dir: str, stem: str, obs: Observation) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_ply(os.path.join(out_dir, f"{stem}.ply"), obs.cloud)
    write_pgm_mask(os.path.join(out_dir, f"{stem}_mask.pgm"), obs.gt_mask)

"""Occlusion-aware next-best-view planning for a humanoid target.

Synthetic cluttered scenes, elevation-map-constrained viewpoint sampling, a
target-centric visibility/area/occlusion evaluator, part-aware point-to-plane
ICP alignment, and a seeded experiment harness with baselines.
"""

from .alignment import (AlignmentResult, DegenerateRegistrationError, IcpConfig,
                        align_target, extract_part_submesh, lift_mask, mpvpe,
                        perturb_initial_mesh, point_to_plane_icp, visible_parts)
from .config import METHODS, ConfigError, RunConfig
from .elevation import (ElevationMap, TraversableSet, build_elevation_map,
                        traversable_cells)
from .experiments import (IterationRecord, SweepCell, TrialRecord, ablation_alignment,
                          ablation_viewpoint_gen, aggregate, compute_metrics, run_suite,
                          run_trial, weight_sweep)
from .geometry import (CameraIntrinsics, DepthImage, Pose, PointCloud, PointIndex,
                       compose, estimate_normals, invert, look_at, nearest_neighbor,
                       project, render_depth, unproject)
from .humanoid import (KEYPOINT_NAMES, JointAngles, LabeledMesh, PartLabel,
                       make_humanoid)
from .scene import (Box, Observation, Scene, SceneGenerationError, Terrain,
                    generate_scene, oracle_detection, oracle_keypoint_visibility,
                    oracle_segmentation, render_observation)
from .scoring import (EvaluatorConfig, OccupancyGrid, ScoredCandidate, Weights,
                      evaluate_candidates, evaluate_viewpoint, integrate_observation,
                      pred_gain, score_from_counts, select_best, volumetric_gain)
from .viewpoints import (CandidateView, camera_from_base, default_mount,
                         sample_candidates_elevation, sample_candidates_shell)

__version__ = "0.1.0"

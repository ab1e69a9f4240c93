"""Training-free 3D vehicle pose and shape labeling from masks + LiDAR."""

__version__ = "0.1.0"

from .geometry import Camera, Pose, Ray, project_point, ray_through_pixel  # noqa: F401
from .sdf import CarParams, SdfGrid, make_car_sdf, mesh_to_sdf, sample  # noqa: F401
from .prior import ShapePrior, build_prior, decode, encode, load_prior, save_prior  # noqa: F401
from .render import Mask, OcclusionMap, RenderConfig, hard_silhouette, occlusion_maps, soft_silhouette  # noqa: F401
from .scene import FrustumCloud, GroundPlane, Scene, fit_ground_ransac, frustum_points, load_scene  # noqa: F401
from .energy import EnergyWeights, RayHitSet, e_ground, e_mask, e_pc, total_energy  # noqa: F401
from .fit import FitConfig, FitResult, confidence, export_occupancy, extract_box, fit_scene, init_instance  # noqa: F401
from .synth import LidarModel, SynthConfig, corrupt_mask, gen_scene, simulate_lidar  # noqa: F401
from .metrics import EvalReport, ap_r40, evaluate, iou_3d, iou_bev, orientation_error, run_harness  # noqa: F401

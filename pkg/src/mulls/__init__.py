"""LiDAR SLAM built on multi-metric linear least-squares ICP."""
from .core import PointCloud, Pose, from_tangent, to_tangent
from .config import RunConfig, load_config
from .features import FeatureClass, FeatureCloud, FeatureFrame, extract_features
from .registration import RegistrationResult, mulls_icp
from .pipeline import SlamResult, run_odometry, run_slam

__version__ = "0.1.0"

__all__ = [
    "PointCloud", "Pose", "from_tangent", "to_tangent", "RunConfig", "load_config",
    "FeatureClass", "FeatureCloud", "FeatureFrame", "extract_features",
    "RegistrationResult", "mulls_icp", "SlamResult", "run_odometry", "run_slam",
]

"""geopose: camera pose regression with geometric loss functions.

Building blocks: quaternion/pose algebra and pinhole projection (geom),
pose regression losses with analytic gradients (losses), a small
fully-connected regressor with the 7-D pose head (model), synthetic
structure-from-motion scenes (scene), pose-label file I/O (data),
ADAM training with the two-step schedule and beta sweeps (train),
and localization metrics (metrics).
"""

from .backend import HAS_NUMBA, USE_NUMBA, backend_name
from .data import Dataset, PoseRecord, apply_frame_centering, load_pose_file, save_pose_file
from .errors import ConfigError, DataError, GeoposeError, NumericsError
from .geom import (
    Bounds,
    CameraIntrinsics,
    Pose,
    Quaternion,
    angular_error_deg,
    canonicalize,
    normalize,
    project,
    project_grad,
    quat_to_rotmat,
)
from .losses import (
    HomoscedasticParams,
    LossResult,
    Norm,
    beta_loss,
    homoscedastic_loss,
    norm_eval,
    position_loss,
    quaternion_loss,
    reprojection_loss,
)
from .metrics import MetricReport, emit_csv, evaluate
from .model import RegressorConfig, RegressorState, backward, forward, init
from .scene import (
    Sample,
    Scene,
    center_frame,
    generate_scene,
    room_scene,
    sample_poses,
    street_scene,
    visible_subset,
)
from .training import (
    BetaLossSpec,
    HomoscedasticLossSpec,
    ReprojectionLossSpec,
    TrainConfig,
    TrainReport,
    adam_step,
    beta_sweep,
    train,
    two_step_train,
)

__version__ = "0.1.0"

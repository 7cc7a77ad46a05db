"""Hand mesh recovery toolkit: parametric hand model, camera, losses, regressor, fitter and evaluation."""

from .camera import CameraIntrinsics, CameraState
from .errors import HandReconError
from .hand_model import HandModelAsset, HandState, pose_hand

__all__ = ["CameraIntrinsics", "CameraState", "HandModelAsset", "HandReconError", "HandState", "pose_hand"]
__version__ = "0.1.0"

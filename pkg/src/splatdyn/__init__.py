"""Material perception and MLS-MPM dynamics for 3D Gaussian splat clouds."""
import warnings

__version__ = "0.1.0"

warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB")

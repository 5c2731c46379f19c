"""Parallel-beam SPECT projector with an exact adjoint, EM reconstruction and
unrolled CNN-regularized EM training."""

__version__ = "0.1.0"

from .backend import BACKEND
from .core import (DegenerateInputError, DomainError, FormatError, ParameterError, ProjectionViews,
                   PsfStack, ShapeError, SizeMismatchError, SpectError, TrainingError,
                   UndefinedMetricError, UsageError, ValidationError, Volume, read_psf, read_views,
                   read_volume, uniform_angles, write_psf, write_views, write_volume)
from .attenuation import accumulate_attenuation
from .neural import AdamWHyper, NetworkWeights, OptimState, adamw_step, regularizer_backward, regularizer_forward
from .projector import SystemModel, back_project, forward_project, to_explicit_matrix
from .psf import convolve_slice, convolve_slice_adjoint, gaussian_psf
from .recon import PoissonProblem, mlem, osem, regularized_em_update
from .rotation import rotate_plane, rotate_plane_adjoint
from .simulate import PhantomSpec, Ellipsoid, VoiMask, make_phantom, mae, nrmse, simulate_measurements
from .training import TrainConfig, e2e_gradient, sequential_train, train, truncated_gradient, unrolled_forward

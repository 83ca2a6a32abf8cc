"""Wave-packet parametrix construction and dispersive-estimate experiments
for Schrodinger operators with rough (Lipschitz/C^2) coefficients."""

from .coeffield import (CoefficientField, HalfField, assemble_operator, double_metric,
                        flat_field, load_preset, perturbed_field, regularize,
                        rescale_to_unit, restrict_to_half)
from .grids import GridFunction, random_band_limited
from .hamflow import FlowPoint, integrate_flow, jacobian_bounds_report, rescaling_check
from .lpdecomp import band_pass, band_project, cell_partition, dyadic_band, lp_partition
from .oracle import (ModeFamily, SpectralDecomposition, disk_gallery_mode, flat_propagator,
                     loss_exponent_fit, mixed_norm, sobolev_norm, spectral_decomposition,
                     sphere_highest_weight, strichartz_quotient)
from .parametrix import (action_phase, dispersive_scan, evolve_duhamel, evolve_homogeneous,
                         kernel_cell, kernel_total, xz_bound_check)
from .records import ExperimentRecord, emit_report
from .wavepacket import (PhaseSpaceFunction, PhaseSpaceGrid, WindowFunction,
                         apply_generator, conjugation_residual, make_window, phase_grid,
                         wp_adjoint, wp_forward, wp_forward_at)

__version__ = "0.1.0"

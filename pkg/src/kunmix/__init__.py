"""Nonlinear hyperspectral unmixing with kernel k-means band selection.

The pipeline: generate (or load) endmember spectra and mixed scenes, pick a
band subset by clustering the endmember-matrix rows in a kernel feature
space, unmix per pixel with either fully constrained least squares or the
kernel-based linear/nonlinear split model, and score abundance RMSE and
relative execution time.
"""

from .bandselect import (
    Clustering,
    global_kernel_kmeans,
    kernel_kmeans,
    point_to_centroid_sq,
    select_bands,
    select_bands_random,
)
from .errors import (
    DegenerateConfigurationError,
    DegeneratePixelError,
    InvalidSelectionError,
    ParseError,
)
from .evaluate import (
    ExperimentConfig,
    MethodSpec,
    ResultTable,
    SceneSpec,
    random_selection_study,
    relative_execution_time,
    rmse,
    run_experiment,
    table1_config,
    table2_config,
)
from .kernels import KernelSpec, gram_matrix, kernel_eval
from .model import (
    BandSelection,
    EndmemberMatrix,
    Scene,
    UnmixResult,
    load_endmembers_csv,
    load_scene,
    restrict_bands,
    restrict_scene,
    save_endmembers_csv,
    save_scene,
    validate_simplex,
)
from .qp import QpProblem, QpSolution, kkt_residual, solve_qp
from .synth import (
    MixingModel,
    NoiseSpec,
    add_noise,
    band_schedule,
    generate_scene,
    generate_synthetic_endmembers,
    mix,
    sample_abundances,
)
from .unmix import (
    PixelSolution,
    SkHypeConfig,
    fcls_unmix_pixel,
    skhype_u_update,
    skhype_unmix_pixel,
    unmix_scene,
)

__version__ = "0.1.0"

"""Quadratic Hawkes price models and their rough-volatility scaling limits."""

from .diagnostics import (
    DiagnosticsReport,
    HolderEstimator,
    WeakZumbach,
    convergence_ladder,
    holder_estimate,
    ks_distance,
    weak_zumbach,
)
from .exceptions import (
    AccuracyLossError,
    ConfigurationError,
    DivergenceError,
    DomainError,
    ExplosionError,
    InsufficientDataError,
    QHLError,
    StabilityError,
    UndefinedExponentError,
    UnsupportedKernelError,
    ValidationError,
)
from .kernels import (
    Exponential,
    MittagLeffler,
    NearlyUnstable,
    PowerLawTail,
    PurelyQuadratic,
    Scaled,
    ScaledKernelPair,
    Stable,
    Zero,
    eval_kernel,
    integrated_ml,
    kernel_from_dict,
    kernel_norms,
    ml_density,
    normalize_l2,
    scaled_eval,
)
from .mittag_leffler import mittag_leffler
from .qhawkes import (
    EventStream,
    QHawkesParams,
    QuadraticHawkes,
    compensator,
    intensity_at,
    simulate,
    time_change_residuals,
)
from .scaling import RescaledPath, Rescaler, UnstableSchedule, make_schedule, rescale_stable, rescale_unstable
from .volterra import (
    MacroPath,
    NUModel,
    PQModel,
    RoughHestonRef,
    SQModel,
    forward_decomposition_exp,
    simulate_limit,
    simulate_nu,
    simulate_pq,
    simulate_rough_heston,
    simulate_sq,
)

__version__ = "0.1.0"

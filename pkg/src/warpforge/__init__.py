"""warpforge: TPS/FFD warping, mixture-of-experts fusion and two-view stitching."""
from .errors import (ContractViolation, DivergenceError, InputError, NoModelError, NumericalError,
                     PointAtInfinityError, SchemaError, SingularSystemError, UndefinedMetricError)
from .imaging import FlowField, warp_with_flow
from .homography import Correspondences, FourPtOffsets, ransac_fit, solve_dlt
from .tps_ffd import ControlGrid, TpsSolution, bench_tps, ffd_upsample, tps_fit
from .objective import LossBreakdown, LossConfig, StitchObjective
from .evaluation import MetricReport, metric_report
from .stitcher import StitchConfig, generate_synthetic_pair, ingest_matches, stitch

__version__ = "0.1.0"

"""Online-adaptive confidence probes with calibrated early stopping for reasoning trajectories."""

from .calibration import (
    CalibrationResult, ThresholdGrid, ThresholdRecord, binom_tail_pvalue, calibrate, calibrate_paths,
    conformal_quantile, empirical_risk, fixed_sequence_select,
)
from .data import Trajectory, pad_embeddings
from .errors import ContractError, FormatError, NumericError, TrainingDiverged
from .probe import (
    FastState, ProbeConfig, SlowWeights, Variant, advance, init_slow_weights, inner_grad, inner_loss,
    inner_update, score,
)
from .runtime import (
    EvalReport, LossMode, RiskSpec, RunOutcome, SweepRow, TraceRecord, compute_paths, dump_trajectory_trace,
    evaluate_paths, evaluate_set, risk_savings_sweep, run_with_stopping, savings_from_stops,
)
from .synth import Shift, SynthConfig, TransitionLaw, generate_dataset, generate_one, reference_config, with_ood_shift
from .trainer import (
    InnerPolicy, LabelMode, Mode, TrainConfig, build_labels, outer_gradients, train, train_static,
    unroll_outer_loss,
)

__version__ = "0.1.0"

"""Image-free multi-character recognition from single-pixel measurements.

Grayscale modulation patterns are learned jointly with a CRNN
recognizer whose first fully connected layer is the pattern bank;
scenes are acquired as K inner products and decoded to character
strings by CTC without ever reconstructing an image.
"""

from .ctc import (
    Alphabet,
    LabelSequence,
    collapse_path,
    ctc_grad,
    ctc_grad_logits,
    ctc_loss,
    ctc_loss_batch,
    decode_greedy,
)
from .errors import (
    ConfigError,
    DegenerateSignalError,
    FeasibilityError,
    GeometryError,
    InputError,
    ModeError,
    NumericError,
    OracleScopeError,
    ProtocolError,
    RenderingError,
    SpocrError,
    TrainingAbort,
)
from .evaluation import (
    DESK_PROFILE,
    PAPER_PROFILE,
    ExperimentProfile,
    SweepConfig,
    evaluate_checkpoint,
    exact_match_accuracy,
    measure_latency,
    per_position_accuracy,
    run_sweep,
)
from .model import CRNN, ConvStage, ModelConfig, PosteriorGrid, default_conv_spec
from .sensing import (
    CLEAN,
    MeasurementVector,
    PatternSet,
    Scene,
    add_noise,
    measure,
    measure_signed,
    project_weights,
    quantize_for_dmd,
    read_measurement_csv,
    read_pattern_file,
    write_measurement_csv,
    write_pattern_file,
)
from .training import (
    Checkpoint,
    LabeledDataset,
    TrainConfig,
    checkpoint_hash,
    load_checkpoint,
    project_stage,
    save_checkpoint,
    train_full,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"

__all__ = [
    "Alphabet",
    "CLEAN",
    "CRNN",
    "Checkpoint",
    "ConfigError",
    "ConvStage",
    "DESK_PROFILE",
    "DegenerateSignalError",
    "ExperimentProfile",
    "FeasibilityError",
    "GeometryError",
    "InputError",
    "LabelSequence",
    "LabeledDataset",
    "MeasurementVector",
    "ModeError",
    "ModelConfig",
    "NumericError",
    "OracleScopeError",
    "PAPER_PROFILE",
    "PatternSet",
    "PosteriorGrid",
    "ProtocolError",
    "RenderingError",
    "Scene",
    "SpocrError",
    "SweepConfig",
    "TrainConfig",
    "TrainingAbort",
    "add_noise",
    "checkpoint_hash",
    "collapse_path",
    "ctc_grad",
    "ctc_grad_logits",
    "ctc_loss",
    "ctc_loss_batch",
    "decode_greedy",
    "default_conv_spec",
    "evaluate_checkpoint",
    "exact_match_accuracy",
    "load_checkpoint",
    "measure",
    "measure_latency",
    "measure_signed",
    "per_position_accuracy",
    "project_stage",
    "project_weights",
    "quantize_for_dmd",
    "read_measurement_csv",
    "read_pattern_file",
    "run_sweep",
    "save_checkpoint",
    "train_full",
    "train_stage1",
    "train_stage2",
    "write_measurement_csv",
    "write_pattern_file",
]

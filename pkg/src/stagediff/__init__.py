"""Stage-wise diffusion for long-term multivariate time-series generation."""

from .dataio import (
    ColumnSchema,
    NormStats,
    RawSeries,
    StageView,
    WindowSet,
    denormalize,
    fit_normalize,
    load_csv,
    make_windows,
    split_stages,
)
from .errors import ConfigError, DataError, NumericsError, StageDiffError
from .model import (
    Checkpoint,
    StageDiffConfig,
    StageDiffDenoiser,
    TrainTrace,
    build_variant,
    generate,
    load_checkpoint,
    make_schedule,
    save_checkpoint,
    train,
)
from .schedule import (
    NoiseSchedule,
    NoisyWindow,
    StepEmbedding,
    build_schedule,
    forward_noise,
    posterior_mean_data,
    posterior_mean_noise,
    posterior_variance,
    sample,
    step_embedding,
    training_loss,
)

__version__ = "0.1.0"

"""Mini pixel batch gradient descent: a small numpy autodiff stack, the adaptive
critical-entry loss, baseline losses, a synthetic spike benchmark and numerical
checks of the descent and convergence inequalities on quadratic problems."""

from .autodiff import Node, backward, const, leaf
from .errors import (
    ConfigError, DivergenceError, FormatError, MPGDError, NonFiniteError, ShapeError,
    TheoryAssertionError,
)
from .losses import CriticalSet, LossSpec, amse, compute_loss, ias_sample
from .metrics import MetricReport, evaluate
from .models import Model, ModelConfig, init_model
from .synthbench import Dataset, SpikeTaskConfig, gen_scalar_task, gen_spike_task
from .trainer import RunRecord, TrainConfig, train

__version__ = "0.1.0"

"""Few-shot one-class classification with a meta-learned Deep Sets model."""

from .forest import ForestConfig, RandomForest, fit_forest, self_label
from .metrics import Scorecard, aggregate, confusion, score
from .model import DeepSetsNet, ModelConfig, PairedInstance, Prediction, build, forward
from .synthetic import GeneratorConfig, ShiftDescriptor, generate_shifted_task, generate_task, make_benchmark
from .tasks import DataError, EvalTask, Task, TaskSplit, load_tasks, make_meta_instances, normalize_task
from .training import FineTuneConfig, TrainConfig, fine_tune, meta_train, predict_task

__version__ = "0.1.0"

"""Multi-task teacher/student knowledge distillation with a gradient-reversal task discriminator."""

from .autodiff import Tensor, gradcheck
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, DatasetSpec, epoch_iterator, generate_dataset, load_dataset, save_dataset
from .evaluation import evaluate
from .losses import LossWeights, TaskWeightState
from .metrics import MetricsReport, ccc_metric, macro_f1
from .model import ModelConfig, MultiTaskModel, init_model
from .training import TrainConfig, TrainReport, Trainer, train_student, train_teacher

__version__ = "0.1.0"

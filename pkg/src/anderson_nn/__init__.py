"""Small dense and convolutional MNIST classifiers trained by mini-batch SGD with
restarted Anderson-type acceleration."""

from .anderson import (AlphaSolution, SnapshotBuffer, combine_snapshots, compute_residual,
                       restarted_anderson_train, rom_update, solve_alpha_coupled, solve_alpha_diagonal)
from .harness import ExperimentSpec, RunReport, emit_report, run_experiment, table_suite
from .mnist_io import Dataset, build_dataset, load_mnist
from .optimizer import TrainConfig, kaczmarz_step, sgd_epoch, subspace_beta_step

__version__ = "0.1.0"

"""Window-level sEMG gesture classification with a from-scratch 1d-CNN."""
from .dataio import SessionRecording, SessionSplit, SourceId, WindowSet, load_session, split, window, zscore_fit_apply
from .estimator import CNNClassifier
from .simulation import GestureProtocol, SourceVariabilityModel, export_dataset, synth_session
from .stats import AccuracyStats, aggregate, wilcoxon_paired
from .training import LearningCurve, TrainConfig, train

__version__ = "0.1.0"

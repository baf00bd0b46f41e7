"""Source-free unsupervised domain adaptation for EEG emotion recognition."""

from .adapt import AdaptationState, DlarConfig, LclConfig
from .metrics import EvalReport, evaluate
from .model import EmotionNet, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, run_ablations, run_pipeline
from .pretrain import PretrainConfig
from .tta import PcTta, TtaConfig

__version__ = "0.1.0"

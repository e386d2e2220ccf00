"""Joint panel captioning and caption-conditioned panel detection for compound figures."""
from .datagen import DatasetRecord, SyntheticFigureSpec, generate_figure, in_memory_split, load_split, make_dataset
from .detection import BoxN, Detection, PanelAnnotation, compute_map, detection_loss, giou, hungarian_match, iou
from .eval_protocol import EvalPair, FigureEvalRecord, align_occurrences, evaluate_captions
from .fusion import FusionInputs, GatedFusion
from .pipeline import ModelConfig, PanelCapModel, evaluate_model, infer
from .rewards import RewardWeights, combined_reward, reward_bert, reward_clip
from .structured_io import LabeledCaption, StructuredOutput, parse_structured, serialize_structured
from .training import StageConfig, run_stage, scst_loss

__version__ = "0.1.0"

"""Domain-expert LoRA training, guideline-conditioned group-relative RL and TIES merging on a toy policy."""

from .checkpoint_store import FORMAT_VERSION, Manifest, read_archive, write_archive
from .clinicsim import DOMAINS, PARADIGMS, StratifiedDataset, export_jsonl, generate, import_jsonl
from .dsa import SftConfig, train_all_experts, train_domain_expert
from .evalkit import EvalReport, emit_report, evaluate, run_ablation
from .gba import GbaConfig, build_guideline_prompt, group_advantages, reward, train_gba
from .lora import LoraAdapter
from .merge import MergeConfig, TaskVector, extract_task_vector, merge_models, reconstruct, ties_merge
from .pipeline import PipelineConfig, run_pipeline
from .tensor_core import NamedTensorMap, SeededRng
from .toy_policy import PolicyConfig, ToyTransformer, attach_lora

__version__ = "0.1.0"

__all__ = [
    "DOMAINS", "PARADIGMS", "FORMAT_VERSION", "__version__",
    "NamedTensorMap", "SeededRng", "Manifest", "read_archive", "write_archive",
    "StratifiedDataset", "generate", "export_jsonl", "import_jsonl",
    "PolicyConfig", "ToyTransformer", "LoraAdapter", "attach_lora",
    "SftConfig", "train_domain_expert", "train_all_experts",
    "GbaConfig", "build_guideline_prompt", "reward", "group_advantages", "train_gba",
    "MergeConfig", "TaskVector", "extract_task_vector", "ties_merge", "reconstruct", "merge_models",
    "EvalReport", "evaluate", "run_ablation", "emit_report",
    "PipelineConfig", "run_pipeline",
]

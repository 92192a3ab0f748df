"""Speaker adaptation of a 4-bit quantised model with mixtures of LoRA experts."""

from .adapters import (LoraModule, PruneReport, Router, RoutingStats, SamlLayer, collect_routing_stats,
                       detect_collapse, init_experts_from_loras, lora_forward, prune_layer, route, saml_forward,
                       saml_forward_reference)
from .errors import (CheckpointError, ConfigError, NumericError, SamlError, ShapeError, SpeakerOverlapError,
                     StageOrderError, ValidationError)
from .model import (ModelConfig, TinyTransformer, build_model, count_params, forward, load_checkpoint,
                    quantize_base, save_checkpoint)
from .numerics import Parameter, SeededRng, Tensor, backward, finite_difference_check, no_grad
from .pipeline import (CorpusConfig, PipelineConfig, SyntheticCorpus, TrainConfig, evaluate, export_embeddings,
                       generate_corpus, prune_model, run_pipeline, stage1, stage2_pretrain, stage3_adapt,
                       sweep_experts)
from .quantization import (QuantizedTensor, build_nf4_codebook, dequantize, measure, quantize_blockwise,
                           quantize_uniform4)

__all__ = [name for name in dir() if not name.startswith("_")]

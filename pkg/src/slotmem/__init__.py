"""Sparse slot-memory sequence model and associative-recall harness.

The decoder factorizes a softmax over ``part_dim ** order`` memory slots
into ``order`` small softmaxes and finds the exact top-K without
materializing the product. Relative-mode heads shift addresses cyclically
by token position. The memory is a power-decay moving average over slots
with a mass normalizer, trained with hand-written reverse-mode gradients
(smoothed-surrogate derivative for the decay term). The harness trains and
scores models on multi-query associative recall, records slot access
traces, and replays them through an LRU cache simulator.
"""

from .autodiff import Param, Tape, grad_check
from .baselines import (
    BaselineSpec,
    dense_slot_reference,
    full_attention_forward,
    linear_attention_forward,
    state_size,
)
from .cachesim import CacheSimConfig, CacheStats, simulate_cache
from .config import OptimConfig, RunConfig, TaskConfig, load_config
from .decoder import (
    BeamCounters,
    DecoderConfig,
    SparseAddress,
    beam_search_topk,
    complexity_budget,
    decode_address,
    dense_product_softmax,
    dense_topk,
)
from .errors import ConfigError, NumericError, SlotMemError, TraceFormatError
from .memory import MemoryState, memory_step
from .model import Model, ModelConfig
from .mqar import MqarConfig, MqarInstance, SETTINGS7, generate_mqar, mqar_accuracy
from .positional import apply_positional, cyclic_shift, shift_indices
from .segments import build_segments, events_from_steps, run_segments
from .traces import TraceEvent, heatmap, load_trace, save_trace

__version__ = "0.1.0"

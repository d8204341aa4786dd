"""Task-token protocol, expert routing, LoRA-MoE reference math, and dataset
tooling for unified multi-modal task orchestration."""

from .tokens import (
    GroundingSegment,
    InvalidRegion,
    InvalidSegment,
    MalformedToken,
    ParsedMessage,
    Region,
    StreamParser,
    TaskKind,
    TaskSegment,
    TextSegment,
    Violation,
    parse,
    parse_region,
    serialize,
    validate,
)
from .routing import (
    MissingArtifact,
    RoutingPlan,
    SessionContext,
    SessionMismatch,
    TaskInvocation,
    ValidationFailed,
    route,
    update_session,
)
from .registry import (
    DuplicateKind,
    ExecutionResult,
    ExpertDescriptor,
    ExpertRegistry,
    NoExpertRegistered,
    default_registry,
    dispatch,
    mock_execute,
)
from .loramoe import (
    FfnBlock,
    GateWeights,
    LoRAMoELayer,
    LoraExpert,
    NonFiniteGradient,
    ShapeMismatch,
    dense_equivalent,
    expert_delta,
    ffn_block_forward,
    gate,
    grad_check,
    loramoe_forward,
)
from .dataset import (
    AnnotatedSample,
    Caption,
    ConversationRecord,
    FilterReport,
    build_multiturn,
    convert_sample,
    dataset_stats,
    filter_records,
    region_iou,
)
from .orchestrator import RunReport, Transcript, run_transcript

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

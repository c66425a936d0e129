"""Graph-of-thought workflow engine: a JSON workflow DSL, a static validator
and a deterministic executor for LLM prompt graphs."""

from .backends import (
    GenerationSettings,
    MockBackend,
    MockScript,
    OpenAICompatBackend,
    RecordingBackend,
    ReplayBackend,
    record_and_wrap,
)
from .dsl import (
    Condition,
    FlowNode,
    WorkflowSpec,
    expand_path_variables,
    load_parameter_file,
    parse_workflow,
    serialize_workflow,
)
from .engine import RunConfig, evaluate_condition, execute_node, replay_trace, run_workflow
from .graph import build_graph, export_dot, topological_order, validate_graph
from .store import RunTrace, load_trace, save_trace
from .template import ParameterScope, extract_placeholders, render_template, resolve

__version__ = "0.1.0"

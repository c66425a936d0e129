import json
import random
import threading
import time

import pytest

from gotflow.backends import GenerationSettings, MockBackend, MockScript, ReplayBackend
from gotflow.dsl import Condition, ForwardPath, parse_workflow
from gotflow.engine import (
    RunConfig,
    RunState,
    bind_outputs,
    evaluate_condition,
    execute_node,
    normalize_answer,
    replay_trace,
    run_workflow,
    select_forward_paths,
)
from gotflow.errors import BindingError, EvalError, PathError, RunError, WorkflowInvalid
from gotflow.graph import build_graph, topological_order
from gotflow.store import CASSETTE_FILE, TRACE_FILE, load_trace, step_lines

from generators import PromptEchoBackend, dump, random_dag_document, respects_edges, simulate_executed, write_template

QUAL = ["qualitative_analysis_1", "qualitative_analysis_2"]
QUANT = ["data_trend_miner", "quantitative_analysis"]


def mock(answer: str) -> MockBackend:
    return MockBackend(MockScript.from_mapping({"determine_data_feature": answer, "*": "analysis text"}))


def node_files(run_dir):
    return sorted(p.name for p in run_dir.iterdir() if p.name.endswith("_output.txt"))


def test_ads_yes_branch(ads_spec, ads_config, ads_dir):
    trace = run_workflow(ads_spec, mock("yes"), ads_config)
    assert trace.executed() == ["data_reader", "determine_data_feature", "data_trend_miner", "quantitative_analysis"]
    assert sorted(trace.skipped) == QUAL
    run_dir = ads_dir / "output" / trace.run_id
    assert node_files(run_dir) == ["quantitative_analysis_output.txt"]
    assert (run_dir / "quantitative_analysis_output.txt").read_text() == "analysis text"
    assert trace.outcome == "succeeded"
    decision = trace.steps[1].decision
    assert decision.condition_value is True and decision.next_nodes == ("data_trend_miner",)


def test_ads_no_branch(ads_spec, ads_config, ads_dir):
    trace = run_workflow(ads_spec, mock("no"), ads_config)
    assert trace.executed() == ["data_reader", "determine_data_feature"] + QUAL
    assert sorted(trace.skipped) == sorted(QUANT)
    assert node_files(ads_dir / "output" / trace.run_id) == [f"{q}_output.txt" for q in QUAL]
    assert {trace.status[n] for n in QUANT} == {"skipped"}


def test_decision_prompt_is_rendered_from_upstream(ads_spec, ads_config):
    backend = MockBackend(MockScript.from_mapping({"data_reader": "FIGURES", "determine_data_feature": "Yes.", "*": "x"}))
    trace = run_workflow(ads_spec, backend, ads_config)
    prompt = trace.steps[1].rendered_prompt
    assert "\n****\nFIGURES\n****\n" in prompt and "#{" not in prompt
    assert trace.variables()["is_quantitative_data"] == "Yes."
    assert trace.executed()[2] == "data_trend_miner"


def test_single_terminal_node(tmp_path):
    template = write_template(tmp_path)
    doc = {"output_dir_path": "o", "flow_items": [{"id": "only", "type": "executor", "input_parameters": [
        {"name": "t", "type": "prompt_template", "file_path": template}, {"name": "task", "type": "literal", "value": "1"}]}]}
    trace = run_workflow(parse_workflow(dump(doc)), MockBackend(MockScript((), "r")), RunConfig(output_dir=tmp_path / "o", env={}))
    assert len(trace.steps) == 1 and trace.skipped == [] and trace.status == {"only": "done"}
    assert trace.steps[0].rendered_prompt == "Task 1\n" and trace.steps[0].bindings == ()


def test_validation_errors_block_run(ads_spec, ads_config, tmp_path):
    doc = json.loads(open(ads_config.env["GF_ROOT"] + "/data/workflows/Ads/workflow.json").read())
    doc["flow_items"][0]["next_nodes"] = ["nope"]
    with pytest.raises(WorkflowInvalid):
        run_workflow(parse_workflow(json.dumps(doc)), mock("yes"), RunConfig(output_dir=tmp_path / "o", env=ads_config.env))
    assert not (tmp_path / "o").exists()


def test_missing_path_variable(ads_spec, tmp_path):
    with pytest.raises(PathError) as info:
        run_workflow(ads_spec, mock("yes"), RunConfig(env={}))
    assert info.value.variable == "GF_ROOT"


# --------------------------------------------------------------------------- node level


def _state(spec, tmp_path, variables=None, params=()):
    state = RunState(spec, tmp_path / "run", params)
    for k, v in (variables or {}).items():
        state.write_variable(k, v)
    return state


def test_execute_data_reader(ads_spec, ads_config, tmp_path):
    from gotflow.engine import prepare_run

    _, _, params, prompts = prepare_run(ads_spec, ads_config)
    state = RunState(ads_spec, tmp_path / "run", params, prompts)
    result = execute_node(ads_spec.node("data_reader"), state, MockBackend(MockScript((), "R")))
    assert state.variable_store == {"data_reader_output": "R"}
    assert result.response == "R" and result.decision is None
    assert "Large Advertising Company" in result.rendered_prompt


def test_execute_requires_consumed_variables(ads_spec, ads_config, tmp_path):
    from gotflow.engine import prepare_run
    from gotflow.errors import RenderError

    _, _, params, prompts = prepare_run(ads_spec, ads_config)
    state = RunState(ads_spec, tmp_path / "run", params, prompts)
    with pytest.raises(RenderError):
        execute_node(ads_spec.node("data_trend_miner"), state, MockBackend(MockScript((), "R")))


def test_node_without_outputs(tmp_path):
    template = write_template(tmp_path)
    doc = {"output_dir_path": "o", "flow_items": [{"id": "n", "type": "executor", "input_parameters": [
        {"name": "t", "type": "prompt_template", "file_path": template}, {"name": "task", "type": "literal", "value": "v"}]}]}
    spec = parse_workflow(dump(doc))
    state = _state(spec, tmp_path)
    result = execute_node(spec.nodes[0], state, MockBackend(MockScript((), "r")))
    assert result.bindings == () and state.variable_store == {}


def test_variable_and_file_binding_match_bytes(tmp_path):
    template = write_template(tmp_path)
    doc = {"output_dir_path": "o", "flow_items": [{"id": "n", "type": "executor",
        "input_parameters": [{"name": "t", "type": "prompt_template", "file_path": template}, {"name": "task", "type": "literal", "value": "v"}],
        "output": [{"type": "variable", "name": "v"}, {"type": "file", "name": "n.txt"}]}]}
    response = "multi\r\nline ✓\n"
    trace = run_workflow(parse_workflow(dump(doc)), MockBackend(MockScript((), response)), RunConfig(output_dir=tmp_path / "o", env={}))
    data = (tmp_path / "o" / trace.run_id / "n.txt").read_bytes()
    step = trace.steps[0]
    assert data == step.response.encode("utf-8")
    assert trace.variables() == {"v": response}
    assert [b.kind for b in step.bindings] == ["variable", "file"]


def test_self_binding(ads_spec, tmp_path):
    state = _state(ads_spec, tmp_path)
    bindings = bind_outputs(ads_spec.node("determine_data_feature"), "yes", state)
    assert state.variable_store == {"is_quantitative_data": "yes"}
    assert bindings[0].self_bound


def test_file_binding_written(ads_spec, tmp_path):
    state = _state(ads_spec, tmp_path)
    bind_outputs(ads_spec.node("quantitative_analysis"), "Q", state)
    assert (tmp_path / "run" / "quantitative_analysis_output.txt").read_bytes() == b"Q"


def test_empty_response_bindings(ads_spec, tmp_path):
    state = _state(ads_spec, tmp_path)
    bind_outputs(ads_spec.node("quantitative_analysis"), "", state)
    bind_outputs(ads_spec.node("data_reader"), "", state)
    assert (tmp_path / "run" / "quantitative_analysis_output.txt").read_bytes() == b""
    assert state.variable_store == {"data_reader_output": ""}


def test_single_assignment_enforced(ads_spec, tmp_path):
    state = _state(ads_spec, tmp_path, {"data_reader_output": "first"})
    with pytest.raises(BindingError):
        bind_outputs(ads_spec.node("data_reader"), "second", state)


# --------------------------------------------------------------------------- conditions


EQ_YES = Condition.leaf("is_quantitative_data", "equal", "yes")


def test_condition_yes():
    assert evaluate_condition(EQ_YES, {"is_quantitative_data": "yes"}) is True


def test_condition_empty_reflexive():
    assert evaluate_condition(Condition.leaf("x", "equal", ""), {"x": ""}) is True


def test_condition_missing_variable():
    with pytest.raises(EvalError) as info:
        evaluate_condition(EQ_YES, {})
    assert info.value.variable == "is_quantitative_data"


@pytest.mark.parametrize(
    "raw, norm",
    [("yes", "yes"), ("Yes.", "yes"), ("  YES ", "yes"), ("yes..", "yes."), ("\tNo.\n", "no"), (".", ""), ("Straße", "strasse")],
)
def test_normalize(raw, norm):
    assert normalize_answer(raw) == norm


def test_composed_short_circuit():
    # the second child reads a missing variable; short-circuit must avoid it
    missing = Condition.leaf("absent", "equal", "x")
    store = {"a": "yes"}
    assert evaluate_condition(Condition.compose("any", [Condition.leaf("a", "equal", "yes"), missing]), store) is True
    assert evaluate_condition(Condition.compose("all", [Condition.leaf("a", "equal", "no"), missing]), store) is False
    with pytest.raises(EvalError):
        evaluate_condition(Condition.compose("all", [Condition.leaf("a", "equal", "yes"), missing]), store)


def test_select_forward_paths():
    paths = (ForwardPath(True, ("data_trend_miner",)), ForwardPath(False, ("qualitative_analysis_1", "qualitative_analysis_2")))
    assert select_forward_paths(True, paths) == ["data_trend_miner"]
    assert select_forward_paths(False, paths) == ["qualitative_analysis_1", "qualitative_analysis_2"]
    assert select_forward_paths(True, (ForwardPath(True, ()), ForwardPath(False, ("x",)))) == []


# --------------------------------------------------------------------------- scheduling


def _diamond(template, *, rejoin_from_both=True):
    def ex(nid, nxt, outputs=()):
        return {"id": nid, "type": "executor", "input_parameters": [
            {"name": "t", "type": "prompt_template", "file_path": template}, {"name": "task", "type": "literal", "value": nid}],
            "output": list(outputs), "next_nodes": nxt}

    return {"output_dir_path": "o", "flow_items": [
        {"id": "d", "type": "decision_maker", "input_parameters": [{"name": "t", "type": "prompt_template", "file_path": template},
            {"name": "task", "type": "literal", "value": "d"}],
         "condition": {"is_composed": False, "data_source": {"type": "output_variable", "name": "ans"}, "operator": "equal", "operand": "yes"},
         "forward_paths": [{"condition_result": True, "next_nodes": ["a"]}, {"condition_result": False, "next_nodes": ["b"]}]},
        ex("a", ["join"]), ex("b", ["join"] if rejoin_from_both else []), ex("join", ["after"]), ex("after", []),
    ]}


@pytest.mark.parametrize("answer, ran, skipped", [("yes", ["d", "a", "join", "after"], ["b"]), ("no", ["d", "b", "join", "after"], ["a"])])
def test_rejoin_runs_once(tmp_path, answer, ran, skipped):
    spec = parse_workflow(dump(_diamond(write_template(tmp_path))))
    trace = run_workflow(spec, MockBackend(MockScript.from_mapping({"d": answer, "*": "ok"})), RunConfig(output_dir=tmp_path / "o", env={}))
    assert trace.executed() == ran and trace.skipped == skipped


def test_skip_propagates_through_untaken_branch(tmp_path):
    spec = parse_workflow(dump(_diamond(write_template(tmp_path), rejoin_from_both=False)))
    trace = run_workflow(spec, MockBackend(MockScript.from_mapping({"d": "no", "*": "ok"})), RunConfig(output_dir=tmp_path / "o", env={}))
    assert trace.executed() == ["d", "b"]
    assert trace.skipped == ["a", "join", "after"]


def test_failure_is_fail_fast(tmp_path):
    template = write_template(tmp_path)
    doc = _chain(template, 4)
    backend = MockBackend(MockScript.from_mapping({"s0": "ok", "s1": "ok"}))  # s2 has no rule
    with pytest.raises(RunError) as info:
        run_workflow(parse_workflow(dump(doc)), backend, RunConfig(output_dir=tmp_path / "o", env={}))
    err = info.value
    assert err.node_id == "s2"
    assert err.trace.executed() == ["s0", "s1"]
    assert err.trace.status == {"s0": "done", "s1": "done", "s2": "failed", "s3": "pending"}
    on_disk = load_trace(tmp_path / "o" / err.trace.run_id / TRACE_FILE)
    assert on_disk.outcome == "failed" and "s2" in on_disk.error


def _chain(template, n):
    return {"output_dir_path": "o", "flow_items": [
        {"id": f"s{i}", "type": "executor", "input_parameters": [{"name": "t", "type": "prompt_template", "file_path": template},
            {"name": "task", "type": "literal", "value": str(i)}], "next_nodes": [f"s{i + 1}"] if i < n - 1 else []}
        for i in range(n)]}


def test_in_flight_siblings_finish_on_failure(tmp_path):
    template = write_template(tmp_path)
    doc = {"output_dir_path": "o", "flow_items": [
        {"id": nid, "type": "executor", "input_parameters": [{"name": "t", "type": "prompt_template", "file_path": template},
            {"name": "task", "type": "literal", "value": nid}], "next_nodes": nxt}
        for nid, nxt in [("bad", []), ("slow", ["after"]), ("after", [])]]}

    class Backend:
        def complete(self, prompt, settings, *, node_id=None):
            if node_id == "bad":
                raise RuntimeError("boom")
            time.sleep(0.05)
            return "ok"

    with pytest.raises(RunError) as info:
        run_workflow(parse_workflow(dump(doc)), Backend(), RunConfig(output_dir=tmp_path / "o", env={}, max_concurrency=2))
    assert info.value.trace.status == {"bad": "failed", "slow": "done", "after": "pending"}


def test_concurrency_actually_overlaps(tmp_path):
    template = write_template(tmp_path)
    doc = {"output_dir_path": "o", "flow_items": [
        {"id": nid, "type": "executor", "input_parameters": [{"name": "t", "type": "prompt_template", "file_path": template},
            {"name": "task", "type": "literal", "value": nid}]} for nid in ("a", "b", "c")]}
    barrier = threading.Barrier(3, timeout=5)

    class Backend:
        def complete(self, prompt, settings, *, node_id=None):
            barrier.wait()  # deadlocks (and times out) unless all three run at once
            return node_id

    trace = run_workflow(parse_workflow(dump(doc)), Backend(), RunConfig(output_dir=tmp_path / "o", env={}, max_concurrency=3))
    assert sorted(trace.executed()) == ["a", "b", "c"]


def test_cyclic_island_blocks_run(tmp_path):
    template = write_template(tmp_path)
    doc = _chain(template, 2)
    doc["flow_items"] += [dict(doc["flow_items"][0], id="x", next_nodes=["y"]), dict(doc["flow_items"][0], id="y", next_nodes=["x"])]
    spec = parse_workflow(dump(doc))
    with pytest.raises(WorkflowInvalid):  # the island is a cycle
        run_workflow(spec, MockBackend(MockScript((), "ok")), RunConfig(output_dir=tmp_path / "o", env={}))


@pytest.mark.parametrize("seed", range(40))
def test_random_dag_invariants(tmp_path, seed):
    rng = random.Random(seed)
    template = write_template(tmp_path)
    doc, script = random_dag_document(rng, rng.randint(2, 20), template)
    spec = parse_workflow(dump(doc))
    graph = build_graph(spec)
    trace = run_workflow(spec, PromptEchoBackend(script), RunConfig(output_dir=tmp_path / "o", env={}))
    executed = trace.executed()
    assert set(executed) == simulate_executed(doc, script)
    # completeness: every node resolved, nothing failed
    assert set(trace.status.values()) <= {"done", "skipped"}
    assert set(executed) | set(trace.skipped) == set(spec.node_ids)
    assert not set(executed) & set(trace.skipped)
    # single assignment
    names = [b.name for s in trace.steps for b in s.bindings if b.kind == "variable"]
    assert len(names) == len(set(names))
    # order soundness and sequential order equals the topological order
    edges = [(e.source, e.target) for e in graph.edges]
    assert respects_edges(executed, edges)
    topo = topological_order(graph)
    assert executed == [n for n in topo if n in set(executed)]
    # exclusivity: a node runs only if some incoming edge was taken
    taken = set()
    for s in trace.steps:
        for e in graph.successors(s.node_id):
            if s.decision is None or e.kind == ("on_true" if s.decision.condition_value else "on_false"):
                taken.add((e.source, e.target))
    for nid in spec.node_ids:
        incoming = [(e.source, e.target) for e in graph.predecessors(nid)]
        if incoming:
            assert (nid in executed) == any(i in taken for i in incoming)
        else:
            assert nid in executed


def test_determinism_two_runs(ads_spec, ads_config, ads_dir):
    a = run_workflow(ads_spec, mock("no"), ads_config)
    b = run_workflow(ads_spec, mock("no"), ads_config)
    assert step_lines(a) == step_lines(b)
    for name in ["qualitative_analysis_1_output.txt", "qualitative_analysis_2_output.txt"]:
        assert (ads_dir / "output" / a.run_id / name).read_bytes() == (ads_dir / "output" / b.run_id / name).read_bytes()


@pytest.mark.parametrize("seed", range(10))
def test_parallel_matches_sequential(tmp_path, seed):
    rng = random.Random(seed)
    template = write_template(tmp_path)
    doc, script = random_dag_document(rng, 16, template)
    spec = parse_workflow(dump(doc))
    seq = run_workflow(spec, PromptEchoBackend(script), RunConfig(output_dir=tmp_path / "s", env={}))
    par = run_workflow(spec, PromptEchoBackend(script), RunConfig(output_dir=tmp_path / "p", env={}, max_concurrency=4))
    assert seq.variables() == par.variables()
    assert seq.status == par.status
    assert sorted(step_lines(seq).splitlines()) == sorted(step_lines(par).splitlines())


def test_backend_seam_accepts_any_object(ads_spec, ads_config):
    class Plain:
        def __init__(self):
            self.prompts = []

        def complete(self, prompt, settings, *, node_id=None):
            self.prompts.append((node_id, settings))
            return "no" if node_id == "determine_data_feature" else "z"

    backend = Plain()
    settings = GenerationSettings(model="local", temperature=0.7)
    ads_config.settings = settings
    trace = run_workflow(ads_spec, backend, ads_config)
    assert len(backend.prompts) == 4 and all(s == settings for _, s in backend.prompts)
    assert trace.config["settings"]["model"] == "local"


def test_replay_reproduces_trace(ads_spec, ads_config, ads_dir):
    first = run_workflow(ads_spec, mock("yes"), ads_config)
    run_dir = ads_dir / "output" / first.run_id
    replayed = run_workflow(ads_spec, ReplayBackend.from_file(run_dir / CASSETTE_FILE), ads_config)
    assert step_lines(replayed) == step_lines(first)
    report = replay_trace(run_dir / TRACE_FILE)
    assert report.identical, report.differences
    assert (run_dir.parent / report.replayed.run_id / CASSETTE_FILE).read_bytes() == (run_dir / CASSETTE_FILE).read_bytes()


def test_replay_detects_tampered_output(ads_spec, ads_config, ads_dir):
    first = run_workflow(ads_spec, mock("yes"), ads_config)
    run_dir = ads_dir / "output" / first.run_id
    (run_dir / "quantitative_analysis_output.txt").write_text("edited")
    report = replay_trace(run_dir / TRACE_FILE)
    assert not report.identical
    assert any("quantitative_analysis_output.txt" in d for d in report.differences)


def test_replay_detects_template_edit(ads_spec, ads_config, ads_dir):
    first = run_workflow(ads_spec, mock("yes"), ads_config)
    (ads_dir / "prompts" / "sum_trend_miner.txt").write_text("changed #{data_reader_output}")
    report = replay_trace(ads_dir / "output" / first.run_id / TRACE_FILE)
    assert not report.identical
    assert any("replay failed" in d for d in report.differences)

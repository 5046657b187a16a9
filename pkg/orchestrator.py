# orchestrator.py
import time
from pathlib import Path
from typing import Any, Dict, List, TypedDict

from langgraph.graph import END, StateGraph

import mixlab
from mixlab import stages
from utils.config import RunConfig
from utils.logging_utils import get_logger
from utils.reporting import RunManifest

logger = get_logger(__name__)

ROUTES = {
    "simulate": "Simulate",
    "reduce-check": "ReduceCheck",
    "mixing": "Mixing",
    "certify": "Certify",
    "pushforward-check": "Pushforward",
}


# -------- State --------
class RunState(TypedDict, total=False):
    config: RunConfig
    route: str
    reports: List[Dict[str, Any]]
    elapsed: Dict[str, float]
    manifest: RunManifest
    manifest_path: str


# -------- Nodes --------
def router_node(state: RunState) -> Dict[str, Any]:
    """Pick the pipeline for the configured command; MUST return a dict update."""
    return {"route": state["config"].command}


def _stage_node(command: str):
    """Wrap a stage runner: time it and append its report."""
    runner = stages.STAGES[command]

    def node(state: RunState) -> Dict[str, Any]:
        t0 = time.perf_counter()
        report = runner(state["config"])
        dt = time.perf_counter() - t0
        logger.info("stage %s finished in %.2fs; verdicts %s", command, dt, report["verdicts"])
        return {
            "reports": state.get("reports", []) + [report],
            "elapsed": {**state.get("elapsed", {}), command: dt},
        }

    return node


def manifest_node(state: RunState) -> Dict[str, Any]:
    config = state["config"]
    root = Path(config.output_dir)
    manifest = RunManifest(config=config.model_dump(mode="json"), version=mixlab.__version__,
                           elapsed=state.get("elapsed", {}))
    for report in state.get("reports", []):
        manifest.verdicts.update(report["verdicts"])
        manifest.fits.update(report["fits"])
        manifest.notes.update(report["notes"])
        for path in report["files"]:
            manifest.add_file(path, root)
    path = manifest.write(root / "manifest.json")
    return {"manifest": manifest, "manifest_path": str(path)}


# -------- Build Graph --------
def build_graph():
    g = StateGraph(RunState)

    g.add_node("Router", router_node)
    for command, node_name in ROUTES.items():
        g.add_node(node_name, _stage_node(command))
    g.add_node("Manifest", manifest_node)

    g.set_entry_point("Router")

    # From Router -> the stage for the command
    g.add_conditional_edges("Router", lambda s: s["route"], dict(ROUTES))

    # Every stage ends in the manifest
    for node_name in ROUTES.values():
        g.add_edge(node_name, "Manifest")

    g.add_edge("Manifest", END)

    return g.compile()


# -------- Public API --------
def run_flow(config: RunConfig) -> RunState:
    app = build_graph()
    # Start with minimal state; Router will set route.
    state: RunState = {
        "config": config,
        "reports": [],
        "elapsed": {},
    }
    return app.invoke(state)

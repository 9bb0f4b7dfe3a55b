"""Designer/Supervisor collaboration loops over a pluggable chat client.

The Designer turns a free-form prompt into a scaffold cell; the Supervisor
scores candidates (scaffolds or generated structures) and feeds back either a
refined prompt or refined property targets. All tests run against the
deterministic mock client; a live HTTP client ships behind the same interface.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .evolution import EvolutionConfig, build_target, evolve
from .gaussian import LatentState
from .lattice import (
    Lattice,
    LatticeError,
    PROPERTY_NAMES,
    UnitCell,
    lattice_to_dict,
    parse_scaffold_text,
    scaffold_text,
    validate_cell,
)
from .model import DisentangledVAE, predict_properties


class AgentError(RuntimeError):
    pass


class MockTranscriptError(AgentError):
    pass


DESIGNER_TEMPLATE = """You are a metamaterial design assistant. Given a design \
intent, locate a simple, well-known truss lattice structure from the literature \
whose character matches the intent, and emit it as a unit-cell scaffold.

Reply with EXACTLY this plain-text format and nothing else:
Node number: <N>
coordinates:
(<x>, <y>, <z>)   one line per node, fractional coordinates in [0, 1]
Edges:
(<i>, <j>)        one line per strut, zero-based node indices
"""

SUPERVISOR_SCAFFOLD_TEMPLATE = """You are a metamaterial design supervisor. \
Judge how well the scaffold below matches the design intent, taking the \
predicted mechanical properties into account.

Reply with strict JSON only: {"score": <number in [0,1]>, "improved_prompt": "<refined design prompt>"}
"""

SUPERVISOR_STRUCTURE_TEMPLATE = """You are a metamaterial design supervisor. \
Judge how well the generated structure below matches the design intent, taking \
the predicted mechanical properties into account.

Reply with strict JSON only: {"score": <number in [0,1]>, "improved_properties": {"young": <f>, "shear": <f>, "poisson": <f>}}
"""

FORMAT_REMINDER = "Your previous reply could not be parsed ({error}). Reply again using exactly the required format."


class ChatClient(Protocol):
    def send(self, system: str, user: str) -> str: ...


class MockChatClient:
    """Replays a scripted transcript: a list of {expect_substring?, reply} entries
    consumed in order. Deterministic by construction."""

    def __init__(self, transcript: list[dict]):
        self.transcript = list(transcript)
        self.cursor = 0

    @classmethod
    def from_jsonl(cls, path: str) -> "MockChatClient":
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        return cls(entries)

    def send(self, system: str, user: str) -> str:
        if self.cursor >= len(self.transcript):
            raise MockTranscriptError("mock transcript exhausted")
        entry = self.transcript[self.cursor]
        expect = entry.get("expect_substring")
        if expect is not None and expect not in user and expect not in system:
            raise MockTranscriptError(
                f"transcript entry {self.cursor}: expected substring {expect!r} not found"
            )
        self.cursor += 1
        return entry["reply"]


class HttpChatClient:
    """OpenAI-style chat endpoint configured via CHAT_ENDPOINT / CHAT_MODEL /
    CHAT_API_KEY environment variables."""

    def __init__(self, timeout: float = 60.0, retries: int = 2):
        self.endpoint = os.environ.get("CHAT_ENDPOINT")
        self.model = os.environ.get("CHAT_MODEL")
        self.api_key = os.environ.get("CHAT_API_KEY")
        if not (self.endpoint and self.model):
            raise AgentError("CHAT_ENDPOINT and CHAT_MODEL must be set for the live client")
        self.timeout = timeout
        self.retries = retries

    def send(self, system: str, user: str) -> str:
        import httpx

        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        for _ in range(self.retries + 1):
            try:
                resp = httpx.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - retry any transport failure
                last = exc
        raise AgentError(f"chat endpoint failed after {self.retries + 1} attempts: {last}")


@dataclass(frozen=True)
class EvaluationResponse:
    score: float
    improved_prompt: str | None = None
    improved_properties: np.ndarray | None = None


@dataclass(frozen=True)
class LoopConfig:
    tau_ds: float = 0.7
    tau_gs: float = 0.7
    max_iters: int = 3
    knn_k: int = 1
    seed: int = 0
    operator: str = "mix"

    def __post_init__(self):
        if not (0.0 <= self.tau_ds <= 1.0 and 0.0 <= self.tau_gs <= 1.0):
            raise AgentError("thresholds must be in [0, 1]")
        if self.max_iters < 1:
            raise AgentError("max_iters must be >= 1")


def designer_step(prompt: str, client: ChatClient, retries: int = 2) -> UnitCell:
    """Ask the Designer for a scaffold and parse it; re-ask with a format
    reminder on parse failure."""
    if not prompt.strip():
        raise AgentError("empty prompt")
    message = prompt
    last_error = None
    for _ in range(retries + 1):
        reply = client.send(DESIGNER_TEMPLATE, message)
        try:
            return parse_scaffold_text(reply)
        except LatticeError as exc:
            last_error = exc
            message = f"{prompt}\n\n{FORMAT_REMINDER.format(error=exc)}"
    raise AgentError(f"designer reply unparseable after {retries + 1} attempts: {last_error}")


def _parse_json_reply(reply: str) -> dict:
    match = re.search(r"\{.*\}", reply, flags=re.DOTALL)
    if not match:
        raise AgentError("no JSON object in reply")
    try:
        obj = json.loads(match.group(0))
    except json.JSONDecodeError as exc:
        raise AgentError(f"malformed JSON: {exc}") from exc
    if "score" not in obj:
        raise AgentError("reply JSON missing 'score'")
    return obj


def _check_score(score: float) -> float:
    score = float(score)
    if not 0.0 <= score <= 1.0:
        raise AgentError(f"score {score} outside [0, 1]")
    return score


def _supervisor_eval(
    template: str, body: str, prompt: str, y_pred: np.ndarray, client: ChatClient,
    properties_reply: bool, retries: int,
) -> EvaluationResponse:
    y_text = ", ".join(f"{k}={v:.6g}" for k, v in zip(PROPERTY_NAMES, y_pred))
    user = (
        f"Design intent: {prompt}\n\nCandidate:\n{body}\n\nPredicted properties: {y_text}"
    )
    last_error = None
    message = user
    for _ in range(retries + 1):
        reply = client.send(template, message)
        try:
            obj = _parse_json_reply(reply)
        except AgentError as exc:
            last_error = exc
            message = f"{user}\n\n{FORMAT_REMINDER.format(error=exc)}"
            continue
        score = _check_score(obj["score"])
        if properties_reply:
            props = None
            if obj.get("improved_properties") is not None:
                p = obj["improved_properties"]
                props = np.array([float(p[k]) for k in PROPERTY_NAMES])
            return EvaluationResponse(score=score, improved_properties=props)
        return EvaluationResponse(score=score, improved_prompt=obj.get("improved_prompt"))
    raise AgentError(f"supervisor reply unparseable after {retries + 1} attempts: {last_error}")


def supervisor_eval_scaffold(
    scaffold: UnitCell, prompt: str, y_pred: np.ndarray, client: ChatClient, retries: int = 2
) -> EvaluationResponse:
    return _supervisor_eval(
        SUPERVISOR_SCAFFOLD_TEMPLATE, scaffold_text(scaffold), prompt, y_pred, client,
        properties_reply=False, retries=retries,
    )


def supervisor_eval_structure(
    lat: Lattice, prompt: str, y_pred: np.ndarray, client: ChatClient, retries: int = 2
) -> EvaluationResponse:
    body = json.dumps(lattice_to_dict(lat), sort_keys=True)
    return _supervisor_eval(
        SUPERVISOR_STRUCTURE_TEMPLATE, body, prompt, y_pred, client,
        properties_reply=True, retries=retries,
    )


def nearest_index(y_target: np.ndarray, dataset: list[Lattice]) -> int:
    """Nearest labelled structure under Euclidean distance on max-min-normalized
    properties; ties break toward the lowest index."""
    labelled = [(i, lat.properties) for i, lat in enumerate(dataset) if lat.properties is not None]
    if not labelled:
        raise AgentError("dataset has no labelled structures")
    ys = np.stack([y for _, y in labelled])
    lo, hi = ys.min(axis=0), ys.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    norm = (ys - lo) / span
    target = (np.asarray(y_target, dtype=float) - lo) / span
    dists = np.linalg.norm(norm - target, axis=1)
    return labelled[int(np.argmin(dists))][0]


def knn_init(
    y_target: np.ndarray, dataset: list[Lattice], model: DisentangledVAE, k: int = 1
) -> LatentState:
    """Property-conditioned initialization: encode the nearest dataset structure."""
    if k != 1:
        raise AgentError("only k=1 initialization is supported")
    return model.encode(dataset[nearest_index(y_target, dataset)])


@dataclass
class DesignResult:
    lattice: Lattice | None
    score: float
    below_threshold: bool
    trace: dict


def run_design_loop(
    prompt: str,
    dataset: list[Lattice],
    model: DisentangledVAE,
    client: ChatClient,
    loop: LoopConfig | None = None,
    evolution: EvolutionConfig | None = None,
) -> DesignResult:
    """Scaffold refinement (Designer/Supervisor) followed by generation refinement
    (Generator/Supervisor with 1-NN re-initialization). Returns the best
    candidate with a full, JSON-serializable trace."""
    loop = loop or LoopConfig()
    evolution = evolution or EvolutionConfig()
    trace: dict = {"prompt": prompt, "design_phase": [], "generation_phase": []}

    # --- C_D/S: scaffold refinement -------------------------------------------
    vp = prompt
    scaffold_cell = None
    scaffold_y = None
    for it in range(loop.max_iters):
        cell = designer_step(vp, client)
        y_pred = predict_properties(Lattice(vectors=np.eye(3), cell=cell), model)
        resp = supervisor_eval_scaffold(cell, vp, y_pred, client)
        trace["design_phase"].append(
            {
                "iteration": it,
                "prompt": vp,
                "scaffold": scaffold_text(cell),
                "predicted_properties": [float(v) for v in y_pred],
                "score": resp.score,
                "improved_prompt": resp.improved_prompt,
            }
        )
        scaffold_cell, scaffold_y = cell, y_pred
        if resp.score >= loop.tau_ds:
            break
        if resp.improved_prompt:
            vp = resp.improved_prompt

    scaffold_state = model.encode(Lattice(vectors=np.eye(3), cell=scaffold_cell))

    # --- C_G/S: generation refinement -----------------------------------------
    y_target = scaffold_y
    best: tuple[float, Lattice | None] = (-1.0, None)
    below = True
    for it in range(loop.max_iters):
        init_index = nearest_index(y_target, dataset)
        source_state = model.encode(dataset[init_index])
        target = build_target(source_state, scaffold_state, loop.operator, evolution)
        evolved, evo_trace = evolve(source_state, target, evolution)
        candidate, _ = model.decode(evolved, seed=loop.seed * 7919 + it)
        violations = validate_cell(candidate.cell)
        y_pred = predict_properties(candidate, model)
        resp = supervisor_eval_structure(candidate, vp, y_pred, client)
        trace["generation_phase"].append(
            {
                "iteration": it,
                "init_index": init_index,
                "operator": loop.operator,
                "property_target": [float(v) for v in y_target],
                "predicted_properties": [float(v) for v in y_pred],
                "score": resp.score,
                "validity_violations": violations,
                "final_loss": evo_trace.total[-1],
                "improved_properties": None
                if resp.improved_properties is None
                else [float(v) for v in resp.improved_properties],
            }
        )
        if resp.score > best[0]:
            best = (resp.score, candidate)
        if resp.score >= loop.tau_gs:
            below = False
            break
        if resp.improved_properties is not None:
            y_target = resp.improved_properties

    trace["final"] = {"score": best[0], "below_threshold": below}
    return DesignResult(lattice=best[1], score=best[0], below_threshold=below, trace=trace)

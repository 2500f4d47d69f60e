"""LLM-assisted hyperparameter selection with strict clamping and offline
fallbacks.

Three fixed prompt templates ask a chat-completion endpoint for (1) the
relative size ratio of the two objects, (2) whether the arrangement requires
solid-to-solid penetration, and (3) the expected fraction of surface contact.
Responses are parsed defensively: the first JSON object found on any line
wins, anything malformed falls back to a static default, and an alignment run
never blocks on the endpoint.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from statistics import median
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

LLM_URL_ENV = "OOALIGN_LLM_URL"
LLM_KEY_ENV = "OOALIGN_LLM_KEY"

SIZE_RATIO_CLAMP = (0.1, 10.0)
CONTACT_RATIO_CLAMP = (0.0, 1.0)
DEFAULT_SIZE_RATIO = 1.0
DEFAULT_PENETRATION = False
DEFAULT_CONTACT_RATIO = 0.3

SCALE_PROMPT_TEMPLATE = (
    'Estimate the relative scale needed so that object1="{object1}" and '
    'object2="{object2}" fit together naturally in the desired alignment '
    '"{wanted_alignment}".\n'
    "Define size_ratio = bbox_size(object1) / bbox_size(object2).\n"
    'Output exactly one JSON object: {"size_ratio": <float between 0.01 and 100.0>}.'
)

PENETRATION_PROMPT_TEMPLATE = (
    'Decide whether achieving alignment "{wanted_alignment}" between '
    'object1="{object1}" and object2="{object2} REQUIRES solid-to-solid penetration.\n'
    'Output exactly one JSON object: {"penetration": <true|false>}.'
)

CONTACT_PROMPT_TEMPLATE = (
    'For the desired alignment "{wanted_alignment}", estimate the fraction of '
    'surface contact between object1="{object1}" and object2="{object2}".\n'
    "Define contact_ratio in [0,1], where 0 = almost no contact and 1 = full surface contact.\n"
    'Output exactly one JSON object: {"contact_ratio": <float 0..1>}.'
)


@dataclass(frozen=True)
class HparamDecision:
    size_ratio: float = DEFAULT_SIZE_RATIO  # clamped to [0.1, 10]
    penetration_allowed: bool = DEFAULT_PENETRATION
    contact_ratio: float = DEFAULT_CONTACT_RATIO  # clamped to [0, 1]
    provenance: str = "default"  # llm | default | manual
    raw_responses: tuple[str, ...] = field(default=())

    def to_json_dict(self) -> dict:
        return {
            "size_ratio": self.size_ratio,
            "penetration_allowed": self.penetration_allowed,
            "contact_ratio": self.contact_ratio,
            "provenance": self.provenance,
            "raw_responses": list(self.raw_responses),
        }


def build_prompts(object1: str, object2: str, wanted_alignment: str) -> tuple[str, str, str]:
    """Instantiate the three templates byte-exactly (scale, penetration, contact)."""
    for name, value in (("object1", object1), ("object2", object2),
                        ("wanted_alignment", wanted_alignment)):
        if not value or not str(value).strip():
            raise ValueError(f"{name} must be a non-empty string")

    def fill(template: str) -> str:
        return (
            template.replace("{object1}", object1)
            .replace("{object2}", object2)
            .replace("{wanted_alignment}", wanted_alignment)
        )

    return (
        fill(SCALE_PROMPT_TEMPLATE),
        fill(PENETRATION_PROMPT_TEMPLATE),
        fill(CONTACT_PROMPT_TEMPLATE),
    )


def _first_json_object(text: str) -> Optional[dict]:
    """First parseable JSON object found on any line of the response."""
    for line in text.splitlines():
        start = line.find("{")
        while start != -1:
            depth = 0
            for end in range(start, len(line)):
                if line[end] == "{":
                    depth += 1
                elif line[end] == "}":
                    depth -= 1
                    if depth == 0:
                        try:
                            obj = json.loads(line[start : end + 1])
                        except json.JSONDecodeError:
                            break
                        if isinstance(obj, dict):
                            return obj
                        break
            start = line.find("{", start + 1)
    return None


def _clamp(value: float, bounds: tuple[float, float]) -> float:
    return float(min(max(value, bounds[0]), bounds[1]))


def parse_and_clamp(responses) -> HparamDecision:
    """Extract the three fields from (scale, penetration, contact) responses.

    Always yields a decision: a field that cannot be parsed takes its static
    default, and the decision's provenance is 'llm' only if all three fields
    came from the responses.
    """
    responses = [("" if r is None else str(r)) for r in responses]
    while len(responses) < 3:
        responses.append("")
    parsed = 0

    size_ratio = DEFAULT_SIZE_RATIO
    obj = _first_json_object(responses[0])
    if obj is not None and isinstance(obj.get("size_ratio"), (int, float)) and not isinstance(obj.get("size_ratio"), bool):
        if np.isfinite(obj["size_ratio"]):
            size_ratio = _clamp(float(obj["size_ratio"]), SIZE_RATIO_CLAMP)
            parsed += 1

    penetration = DEFAULT_PENETRATION
    obj = _first_json_object(responses[1])
    if obj is not None and isinstance(obj.get("penetration"), bool):
        penetration = obj["penetration"]
        parsed += 1

    contact_ratio = DEFAULT_CONTACT_RATIO
    obj = _first_json_object(responses[2])
    if obj is not None and isinstance(obj.get("contact_ratio"), (int, float)) and not isinstance(obj.get("contact_ratio"), bool):
        if np.isfinite(obj["contact_ratio"]):
            contact_ratio = _clamp(float(obj["contact_ratio"]), CONTACT_RATIO_CLAMP)
            parsed += 1

    return HparamDecision(
        size_ratio=size_ratio,
        penetration_allowed=penetration,
        contact_ratio=contact_ratio,
        provenance="llm" if parsed == 3 else "default",
        raw_responses=tuple(responses[:3]),
    )


def query_chat_endpoint(prompt: str, url: str, api_key: Optional[str], timeout_s: float = 20.0) -> Optional[str]:
    """One chat-completion POST; returns the raw text content or None."""
    import requests

    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {"messages": [{"role": "user", "content": prompt}]}
    for attempt in range(2):  # one retry
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=timeout_s)
            resp.raise_for_status()
            data = resp.json()
            if isinstance(data, dict):
                choices = data.get("choices")
                if isinstance(choices, list) and choices:
                    msg = choices[0].get("message", {})
                    if isinstance(msg, dict) and isinstance(msg.get("content"), str):
                        return msg["content"]
                if isinstance(data.get("content"), str):
                    return data["content"]
            return resp.text
        except (requests.RequestException, ValueError) as exc:
            logger.warning("LLM query attempt %d failed: %s", attempt + 1, exc)
    return None


def decide_hparams(
    object1: str,
    object2: str,
    wanted_alignment: str,
    url: Optional[str] = None,
    api_key: Optional[str] = None,
    num_queries: int = 1,
    timeout_s: float = 20.0,
) -> HparamDecision:
    """Query the endpoint (if configured) and fold responses into a decision.

    ``num_queries`` > 1 repeats each query and aggregates: majority vote for
    the penetration boolean, median for the continuous fields. With no
    endpoint configured this returns the static defaults immediately.
    """
    url = url or os.environ.get(LLM_URL_ENV)
    api_key = api_key or os.environ.get(LLM_KEY_ENV)
    prompts = build_prompts(object1, object2, wanted_alignment)
    if not url:
        return HparamDecision(raw_responses=("", "", ""))

    decisions = []
    all_raw = []
    for _ in range(max(1, num_queries)):
        responses = [query_chat_endpoint(p, url, api_key, timeout_s) for p in prompts]
        all_raw.extend("" if r is None else r for r in responses)
        decisions.append(parse_and_clamp(responses))
    if len(decisions) == 1:
        return decisions[0]
    return HparamDecision(
        size_ratio=float(median(d.size_ratio for d in decisions)),
        penetration_allowed=sum(d.penetration_allowed for d in decisions) * 2 > len(decisions),
        contact_ratio=float(median(d.contact_ratio for d in decisions)),
        provenance="llm" if all(d.provenance == "llm" for d in decisions) else "default",
        raw_responses=tuple(all_raw),
    )


def apply_decision(config, decision: HparamDecision):
    """Fold a decision into an AlignConfig copy: penetration policy zeroes the
    penetration ramp, contact ratio maps directly to the attachment ratio r,
    and size ratio initializes the scale (scaled mode only)."""
    from .harness import replace_config

    kwargs = {"icp_ratio_r": max(decision.contact_ratio, 1e-6)}
    if decision.penetration_allowed:
        kwargs["lambda_pen_per_phase"] = [0.0 for _ in config.lambda_pen_per_phase]
    if config.mode == "scaled":
        init = config.to_json_dict()["init"]
        init["fixed_scale"] = decision.size_ratio
        kwargs["init"] = init
    elif decision.size_ratio != DEFAULT_SIZE_RATIO:
        logger.warning("size_ratio %.3g ignored in rigid mode", decision.size_ratio)
    return replace_config(config, **kwargs)


def evaluate_hparam_accuracy(labels: list[dict], decisions: list[HparamDecision | dict]) -> dict:
    """Penetration accuracy plus MAE of the continuous fields, matched by id.

    ``labels``: [{"id", "size_ratio", "penetration", "contact_ratio"}, ...];
    ``decisions``: HparamDecision list aligned by position, or dicts with an
    "id" key and the same fields.
    """
    def as_dict(d, idx):
        if isinstance(d, HparamDecision):
            return {"id": labels[idx]["id"], "size_ratio": d.size_ratio,
                    "penetration": d.penetration_allowed, "contact_ratio": d.contact_ratio}
        return d

    if len(labels) != len(decisions):
        raise ValueError(f"{len(labels)} labels vs {len(decisions)} decisions")
    by_id = {}
    for idx, d in enumerate(decisions):
        d = as_dict(d, idx)
        by_id[d["id"]] = d
    if set(by_id) != {l["id"] for l in labels}:
        raise ValueError("label/decision ids do not match")

    pen_hits = 0
    size_err, contact_err = [], []
    for label in labels:
        d = by_id[label["id"]]
        pen_hits += d["penetration"] == label["penetration"]
        size_err.append(abs(d["size_ratio"] - label["size_ratio"]))
        contact_err.append(abs(d["contact_ratio"] - label["contact_ratio"]))
    n = len(labels)
    return {
        "n": n,
        "penetration_accuracy_pct": 100.0 * pen_hits / n,
        "size_ratio_mae": float(np.mean(size_err)),
        "contact_ratio_mae": float(np.mean(contact_err)),
    }

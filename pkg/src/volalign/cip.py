"""Staged class-description prompts, reply parsing and a chat-completions client.

A prompt asks a vision-language model to describe a class in four tagged
stages. Two tag sets exist: ``appendix`` (SUMMARY, CAPTION, REASONING,
CONCLUSION; the default) and ``main`` (STRATEGY, PERCEPTION, REFINEMENT,
CONCLUSION). Replies are parsed by tag identity, so a reply with stages in
an unexpected order still parses; the order is noted in ``warnings``.

HTTP wire format (chat-completions style)::

    POST <endpoint>
    Authorization: Bearer <token>            (omitted when no token is set)
    {"model": "...", "messages": [{"role": "user", "content": "<prompt>"}]}

    200 {"choices": [{"message": {"role": "assistant", "content": "<reply>"}}]}

Status 429, any 5xx, timeouts and connection failures are retried with
exponential backoff ``backoff * 2**attempt``; other statuses fail at once.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from urllib.parse import urlparse

import httpx

from .errors import (
    EmptyClassName,
    HttpStatusError,
    MalformedTags,
    MissingStage,
    NetworkError,
    ParseError,
    RequestTimeout,
)

TAG_SETS = {
    "appendix": ("SUMMARY", "CAPTION", "REASONING", "CONCLUSION"),
    "main": ("STRATEGY", "PERCEPTION", "REFINEMENT", "CONCLUSION"),
}
DEFAULT_VARIANT = "appendix"

STAGE_INSTRUCTIONS = {
    "SUMMARY": "Outline how you will work out what sets this class apart.",
    "CAPTION": "Describe what the reference images show, sticking to visible evidence.",
    "REASONING": "Reconcile the class name with the images and drop any detail they contradict.",
    "STRATEGY": "Plan which visual attributes matter most for recognizing this class.",
    "PERCEPTION": "List the attributes actually visible in the reference images.",
    "REFINEMENT": "Correct or sharpen earlier statements that the images do not support.",
    "CONCLUSION": "Give a single-paragraph definition of the class grounded in the images.",
}

_TAG = re.compile(r"<(/?)([A-Z]+)>")


def stage_tags(variant: str = DEFAULT_VARIANT) -> tuple:
    try:
        return TAG_SETS[variant]
    except KeyError:
        raise ValueError(f"unknown prompt variant {variant!r}; choose from {sorted(TAG_SETS)}") from None


@dataclass
class ClassDescriptor:
    class_name: str
    stage_outputs: dict
    conclusion: str
    variant: str = DEFAULT_VARIANT
    warnings: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return all(t in self.stage_outputs for t in stage_tags(self.variant)) and bool(self.conclusion)


def render_stages(bodies: dict, variant: str = DEFAULT_VARIANT) -> str:
    """Tagged stage blocks in variant order; the shape a well-formed reply takes."""
    blocks = []
    for tag in stage_tags(variant):
        blocks.append(f"<{tag}>\n{bodies.get(tag, '')}\n</{tag}>")
    return "\n".join(blocks)


def build_prompt(class_name: str, image_refs=(), variant: str = DEFAULT_VARIANT, bodies=None) -> str:
    """Prompt text for one class.

    Stage blocks hold the per-stage instructions, or ``bodies`` when given
    (handy for fixtures). Image references are passed through untouched.
    """
    name = (class_name or "").strip()
    if not name:
        raise EmptyClassName("class name must be non-empty")
    tags = stage_tags(variant)
    lines = [
        f"You are helping build a visual definition of the class \"{name}\".",
        "Reference images of this class:" if image_refs else "No reference images are attached.",
    ]
    lines += [f"[image {i + 1}] {ref}" for i, ref in enumerate(image_refs)]
    lines += [
        "",
        f"Work through {len(tags)} stages in one pass, keeping each stage inside its own tag pair,",
        "in exactly the order and format below. Finish with the definition.",
        "",
        render_stages(bodies if bodies is not None else {t: STAGE_INSTRUCTIONS[t] for t in tags}, variant),
    ]
    return "\n".join(lines)


def parse_stages(text: str, variant: str = DEFAULT_VARIANT, class_name: str = "",
                 strict: bool = True) -> ClassDescriptor:
    """Split a staged reply into its stage bodies (whitespace-trimmed).

    Raises MalformedTags for unbalanced, repeated or overlapping tags and,
    when ``strict``, MissingStage for absent stages. Non-strict parsing
    returns an incomplete descriptor instead.
    """
    tags = stage_tags(variant)
    opens, closes = {t: [] for t in tags}, {t: [] for t in tags}
    for m in _TAG.finditer(text or ""):
        if m.group(2) in opens:
            (closes if m.group(1) else opens)[m.group(2)].append(m)
    spans = []
    for t in tags:
        o, c = opens[t], closes[t]
        if not o and not c:
            continue
        if len(o) != 1 or len(c) != 1:
            raise MalformedTags(f"<{t}> opened {len(o)} and closed {len(c)} times")
        if c[0].start() < o[0].end():
            raise MalformedTags(f"</{t}> comes before <{t}>")
        spans.append((o[0].start(), c[0].end(), t, o[0].end(), c[0].start()))
    spans.sort()
    for a, b in zip(spans, spans[1:]):
        if b[0] < a[1]:
            raise MalformedTags(f"<{b[2]}> starts inside <{a[2]}>")
    missing = [t for t in tags if not opens[t]]
    if missing and strict:
        raise MissingStage(missing)
    outputs = {t: text[s:e].strip() for _, _, t, s, e in spans}
    warnings = []
    seen = [s[2] for s in spans]
    if seen != [t for t in tags if t in outputs]:
        warnings.append("stages out of order: " + ", ".join(seen))
    return ClassDescriptor(class_name, outputs, outputs.get(tags[-1], ""), variant, warnings)


# ------------------------------------------------------------------- client


@dataclass(frozen=True)
class ClientConfig:
    endpoint: str
    model: str
    token: str | None = field(default=None, repr=False)
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.5

    def __post_init__(self):
        url = urlparse(self.endpoint)
        if url.scheme not in ("http", "https") or not url.netloc:
            raise ValueError(f"endpoint {self.endpoint!r} is not an http(s) URL")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0 or self.backoff < 0:
            raise ValueError("max_retries and backoff must be non-negative")


def _retryable(code: int) -> bool:
    return code == 429 or 500 <= code < 600


def chat_completion(cfg: ClientConfig, prompt: str, transport=None, sleep=time.sleep) -> str:
    """Send one user message and return the assistant text, retrying transient failures."""
    headers = {"Authorization": f"Bearer {cfg.token}"} if cfg.token else {}
    payload = {"model": cfg.model, "messages": [{"role": "user", "content": prompt}]}
    with httpx.Client(transport=transport, timeout=cfg.timeout) as client:
        for attempt in range(cfg.max_retries + 1):
            last = attempt == cfg.max_retries
            try:
                resp = client.post(cfg.endpoint, json=payload, headers=headers)
            except httpx.TimeoutException as exc:
                if last:
                    raise RequestTimeout(f"no reply within {cfg.timeout}s") from exc
            except httpx.TransportError as exc:
                if last:
                    raise NetworkError(str(exc)) from exc
            else:
                if resp.status_code == 200:
                    return _reply_text(resp)
                if last or not _retryable(resp.status_code):
                    raise HttpStatusError(resp.status_code, resp.text)
            sleep(cfg.backoff * 2**attempt)
    raise AssertionError("unreachable")


def _reply_text(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ParseError("reply has no choices[0].message.content") from exc
    if not isinstance(content, str):
        raise ParseError("reply content is not text")
    return content


def request_description(cfg: ClientConfig, prompt: str, variant: str = DEFAULT_VARIANT, class_name: str = "",
                        transport=None, sleep=time.sleep) -> ClassDescriptor:
    """Send a staged prompt and parse the reply into a descriptor."""
    reply = chat_completion(cfg, prompt, transport=transport, sleep=sleep)
    return parse_stages(reply, variant, class_name=class_name)

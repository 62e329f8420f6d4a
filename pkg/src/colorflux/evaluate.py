"""Scoring colorized outputs: hermetic proxies, an LLM-judge client, aggregation and win rates.

Six aspects are tracked everywhere: color richness (``cri``), color
rationality (``cra``), color consistency (``ccs``), structural consistency
(``scs``), aesthetics (``aes``) and overall (``oa``). The proxy scorer only
fills the two aspects that can be computed mechanically and marks the rest
as unscored through a validity mask.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import httpx
import numpy as np
from PIL import Image

from .color_math import ImageError, check_image8, colorfulness, rgb_to_gray

log = logging.getLogger(__name__)

ASPECTS = ("cri", "cra", "ccs", "scs", "aes", "oa")
PROXY_ASPECTS = ("cri", "scs")
SOURCES = ("proxy", "external")
SCS_SCALE = 20.0  # MAE (8-bit units) at which the structure proxy drops to 100/e


class ScoreParseError(ValueError):
    """A judge reply lacked a usable score; ``aspect`` names the first offender."""

    def __init__(self, aspect: str, raw: str, reason: str = "missing"):
        super().__init__(f"judge reply: {reason} score for aspect {aspect.upper()!r}")
        self.aspect = aspect
        self.raw = raw


class JudgeTransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class AspectScores:
    cri: float
    cra: float
    ccs: float
    scs: float
    aes: float
    oa: float
    source: str
    valid: tuple[bool, ...] = (True,) * 6

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown score source {self.source!r}")
        if len(self.valid) != len(ASPECTS):
            raise ValueError("validity mask must cover all six aspects")
        for name in ASPECTS:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0.0 <= v <= 100.0):
                raise ValueError(f"aspect {name} = {v!r} outside [0, 100]")

    def as_dict(self) -> dict[str, float | None]:
        """Aspect values with unscored aspects mapped to ``None``."""
        return {a: (getattr(self, a) if ok else None) for a, ok in zip(ASPECTS, self.valid)}


# -- proxies ---------------------------------------------------------------------

def proxy_scores(condition: np.ndarray, output: np.ndarray) -> AspectScores:
    """Deterministic stand-in for the judge.

    Args:
        condition: Gray condition, ``(H, W)`` or ``(H, W, 1)`` uint8.
        output: Colorized ``(H, W, 3)`` uint8 image.

    Returns:
        Scores with only ``cri`` and ``scs`` marked valid. ``cri`` is the
        colorfulness clamped to [0, 100]; ``scs`` is
        ``100 * exp(-MAE / 20)`` between gray(output) and the condition.
    """
    cond = check_image8(condition, (1,))
    cond = cond.reshape(cond.shape[0], cond.shape[1])
    out = check_image8(output, (3,))
    if out.shape[:2] != cond.shape:
        raise ImageError(f"size mismatch: condition {cond.shape} vs output {out.shape[:2]}")
    cri = min(max(colorfulness(out), 0.0), 100.0)
    mae = float(np.mean(np.abs(rgb_to_gray(out).astype(np.int64) - cond.astype(np.int64))))
    scs = 100.0 * math.exp(-mae / SCS_SCALE)
    valid = tuple(a in PROXY_ASPECTS for a in ASPECTS)
    return AspectScores(cri, 0.0, 0.0, scs, 0.0, 0.0, "proxy", valid)


# -- external judge ----------------------------------------------------------------

@dataclass
class EndpointConfig:
    """Connection settings for a chat-completions style judge endpoint."""

    base_url: str
    model: str
    token_env: str = "COLORFLUX_JUDGE_TOKEN"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    max_backoff: float = 8.0
    concurrency: int = 4
    send_condition: bool = True  # pair request (condition + output) vs output only
    log_path: str | None = None  # line-delimited request/response audit records

    def __post_init__(self):
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"


def default_template() -> str:
    return resources.files("colorflux").joinpath("data/judge_template.txt").read_text(encoding="utf-8")


def load_template(path: str | Path | None = None) -> str:
    text = default_template() if path is None else Path(path).read_text(encoding="utf-8")
    missing = [a for a in ASPECTS if a.upper() not in text]
    if missing:
        raise ValueError(f"judge template does not mention aspects {[m.upper() for m in missing]}")
    return text


_SCORE_RE = {a: re.compile(rf"\b{a}\b\s*[:=]\s*(-?\d+(?:\.\d+)?)", re.IGNORECASE) for a in ASPECTS}


def parse_scores(reply: str) -> AspectScores:
    """Extract the six named scores from a free-text judge reply."""
    values = {}
    for a in ASPECTS:
        m = _SCORE_RE[a].search(reply)
        if m is None:
            raise ScoreParseError(a, reply)
        v = float(m.group(1))
        if not 0.0 <= v <= 100.0:
            raise ScoreParseError(a, reply, "out-of-range")
        values[a] = v
    return AspectScores(source="external", **values)


def _png_data_uri(img: np.ndarray) -> str:
    arr = np.ascontiguousarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def build_request(image: np.ndarray, condition: np.ndarray | None, cfg: EndpointConfig, template: str) -> dict:
    if condition is not None and cfg.send_condition:
        inputs = "The first image is the grayscale input; the second image is the colorized result."
        images = [condition, image]
    else:
        inputs = "The image is the colorized result."
        images = [image]
    content = [{"type": "text", "text": template.replace("{inputs}", inputs)}]
    content += [{"type": "image_url", "image_url": {"url": _png_data_uri(im)}} for im in images]
    return {"model": cfg.model, "temperature": 0, "messages": [{"role": "user", "content": content}]}


_log_lock = threading.Lock()


def _audit(cfg: EndpointConfig, record: dict) -> None:
    if not cfg.log_path:
        return
    with _log_lock, open(cfg.log_path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _reply_text(body: dict) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ScoreParseError(ASPECTS[0], json.dumps(body), "no message content, so no") from exc
    if isinstance(content, list):  # some servers return content parts
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    return str(content)


def external_score(image: np.ndarray, condition: np.ndarray | None, cfg: EndpointConfig,
                   template: str | None = None, client: httpx.Client | None = None,
                   item: str = "") -> AspectScores:
    """Score one output with the remote judge.

    Transport errors, HTTP 429 and 5xx replies are retried with exponential
    backoff capped at ``cfg.max_backoff``. Every attempt outcome and the raw
    reply are appended to ``cfg.log_path`` when set.

    Args:
        image: Colorized ``(H, W, 3)`` uint8 image.
        condition: Gray input, sent alongside when ``cfg.send_condition``.
        cfg: Endpoint settings.
        template: Prompt text; the packaged default when omitted.
        client: Optional shared ``httpx.Client``.
        item: Identifier written to the audit log.

    Raises:
        JudgeTransportError: The endpoint kept failing after all retries.
        ScoreParseError: The reply did not contain all six scores.
    """
    template = load_template() if template is None else template
    payload = build_request(image, condition, cfg, template)
    headers = {}
    token = os.environ.get(cfg.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    own = client is None
    client = httpx.Client(timeout=cfg.timeout) if own else client
    try:
        retries, last_err = 0, None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(min(cfg.backoff * 2 ** (attempt - 1), cfg.max_backoff))
                retries = attempt
            try:
                resp = client.post(cfg.url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last_err = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_err = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                last_err = f"HTTP {resp.status_code}"
                break
            raw = resp.text
            try:
                text = _reply_text(resp.json())
                scores = parse_scores(text)
            except (ValueError, ScoreParseError) as exc:
                _audit(cfg, {"item": item, "retries": retries, "status": "parse_error",
                             "error": str(exc), "raw": raw})
                if isinstance(exc, ScoreParseError):
                    raise
                raise ScoreParseError(ASPECTS[0], raw, "undecodable reply, no") from exc
            if retries:
                log.info("judge item %r succeeded after %d retries", item, retries)
            _audit(cfg, {"item": item, "retries": retries, "status": "ok", "raw": raw,
                         "scores": scores.as_dict()})
            return scores
        _audit(cfg, {"item": item, "retries": retries, "status": "transport_error", "error": last_err})
        raise JudgeTransportError(f"judge endpoint failed after {retries} retries: {last_err}")
    finally:
        if own:
            client.close()


def external_score_many(pairs, cfg: EndpointConfig, template: str | None = None,
                        items=None) -> list[AspectScores]:
    """Score ``(image, condition)`` pairs with at most ``cfg.concurrency`` requests in flight.

    Results come back in input order.
    """
    pairs = list(pairs)
    items = [str(i) for i in range(len(pairs))] if items is None else list(items)
    template = load_template() if template is None else template
    with httpx.Client(timeout=cfg.timeout) as client, ThreadPoolExecutor(cfg.concurrency) as pool:
        futures = [pool.submit(external_score, img, cond, cfg, template, client, it)
                   for (img, cond), it in zip(pairs, items)]
        return [f.result() for f in futures]


# -- aggregation -------------------------------------------------------------------

@dataclass(frozen=True)
class AspectSummary:
    mean: float
    count: int
    std: float  # population standard deviation


def aggregate(scores) -> dict[str, AspectSummary | None]:
    """Per-aspect mean, count and standard deviation.

    Aspects never marked valid map to ``None``. Mixing proxy and external
    records is rejected.
    """
    scores = list(scores)
    if not scores:
        raise ValueError("aggregate: no score records")
    sources = {s.source for s in scores}
    if len(sources) > 1:
        raise ValueError(f"aggregate: mixed sources {sorted(sources)}")
    out = {}
    for i, a in enumerate(ASPECTS):
        vals = np.array([getattr(s, a) for s in scores if s.valid[i]], dtype=np.float64)
        if vals.size == 0:
            out[a] = None
            continue
        mean = math.fsum(vals) / vals.size
        std = math.sqrt(math.fsum((vals - mean) ** 2) / vals.size)
        out[a] = AspectSummary(mean, int(vals.size), std)
    return out


def format_table(table: dict[str, AspectSummary | None], label: str = "") -> str:
    """Aligned text table with one column per aspect."""
    head = f"{'':<10}" + "".join(f"{a.upper():>9}" for a in ASPECTS)
    row = f"{label[:10]:<10}" + "".join(
        f"{'-':>9}" if table[a] is None else f"{table[a].mean:>9.2f}" for a in ASPECTS)
    return head + "\n" + row


def table_records(table: dict[str, AspectSummary | None], label: str = "") -> list[str]:
    """Machine-readable JSON lines, one per aspect."""
    recs = []
    for a in ASPECTS:
        s = table[a]
        recs.append(json.dumps({"label": label, "aspect": a, "mean": None if s is None else s.mean,
                                "count": 0 if s is None else s.count,
                                "std": None if s is None else s.std}, sort_keys=True))
    return recs


# -- win rates ---------------------------------------------------------------------

@dataclass(frozen=True)
class Ballot:
    item: str
    method_a: str
    method_b: str
    winner: str  # "a" or "b"

    def __post_init__(self):
        if self.winner not in ("a", "b"):
            raise ValueError(f"ballot {self.item!r}: winner must be 'a' or 'b', got {self.winner!r}")
        if self.method_a == self.method_b:
            raise ValueError(f"ballot {self.item!r}: both sides are {self.method_a!r}")

    @property
    def chosen(self) -> str:
        return self.method_a if self.winner == "a" else self.method_b


def win_rate(ballots, method: str) -> float:
    """Fraction of ballots involving ``method`` that ``method`` won."""
    involved = [b for b in ballots if method in (b.method_a, b.method_b)]
    if not involved:
        raise ZeroDivisionError(f"no ballots involve method {method!r}")
    return sum(b.chosen == method for b in involved) / len(involved)


def read_ballots(path: str | Path) -> list[Ballot]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValueError(f"{path}:{n}: expected 4 tab-separated fields, got {len(fields)}")
        try:
            out.append(Ballot(*fields))
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
    return out


def write_ballots(ballots, path: str | Path) -> None:
    lines = [f"{b.item}\t{b.method_a}\t{b.method_b}\t{b.winner}\n" for b in ballots]
    Path(path).write_text("".join(lines), encoding="utf-8")

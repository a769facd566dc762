"""JSON-over-HTTP POST with timeout and bounded retries."""

from __future__ import annotations

import logging
import time

import requests

from .errors import ProtocolError, TransportError

log = logging.getLogger(__name__)


def post_json(url: str, payload: dict, *, timeout: float = 30.0, retries: int = 2,
              api_key: str | None = None, backoff: float = 0.5) -> dict:
    """POST ``payload`` and return the decoded JSON object.

    Connection failures, timeouts and 5xx answers are retried ``retries``
    times with exponential backoff; anything else fails immediately.
    Raises :class:`TransportError` (with ``attempts``) when retries run out and
    :class:`ProtocolError` when the body is not a JSON object.
    """
    headers = {"Content-Type": "application/json; charset=utf-8"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    last = None
    attempts = 0
    for attempt in range(retries + 1):
        attempts = attempt + 1
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last = exc
            log.warning("POST %s attempt %d failed: %s", url, attempts, exc)
        else:
            if resp.status_code >= 500:
                last = RuntimeError(f"HTTP {resp.status_code}")
                log.warning("POST %s attempt %d: HTTP %d", url, attempts, resp.status_code)
            elif resp.status_code >= 400:
                raise TransportError(f"POST {url}: HTTP {resp.status_code}", attempts=attempts,
                                     last_error=RuntimeError(resp.text[:200]))
            else:
                try:
                    body = resp.json()
                except ValueError as exc:
                    raise ProtocolError(f"POST {url}: response is not JSON") from exc
                if not isinstance(body, dict):
                    raise ProtocolError(f"POST {url}: response is not a JSON object")
                return body
        if attempt < retries:
            time.sleep(backoff * (2 ** attempt))
    raise TransportError(f"POST {url} failed after {attempts} attempts: {last}",
                         attempts=attempts, last_error=last)

"""Line-delimited-JSON and HTTP transports shared by the answerer and encoder clients."""
from __future__ import annotations

import json
import subprocess
import threading
import time
from typing import Any, Callable, Optional

import requests


class TransportError(RuntimeError):
    """The endpoint could not be reached or the connection broke."""


class MalformedResponseError(RuntimeError):
    """The endpoint replied with something that is not a valid protocol message."""


class RequestIdMismatchError(RuntimeError):
    """The response's request_id does not echo the request's."""


def dump_message(payload: dict[str, Any]) -> str:
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def parse_message(line: str) -> dict[str, Any]:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedResponseError(f"response is not valid JSON: {line[:200]!r}") from exc
    if not isinstance(msg, dict):
        raise MalformedResponseError(f"response is not a JSON object: {line[:200]!r}")
    return msg


class StdioEndpoint:
    """One request per line on a subprocess's stdin, one response per line on stdout."""

    def __init__(self, command: list[str] | str):
        if isinstance(command, str):
            command = command.split()
        try:
            self._proc = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"cannot spawn {command!r}: {exc}") from exc
        self._lock = threading.Lock()

    def send(self, payload: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            if self._proc.poll() is not None:
                raise TransportError("subprocess endpoint has exited")
            try:
                self._proc.stdin.write(dump_message(payload) + "\n")
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise TransportError(f"subprocess pipe failed: {exc}") from exc
        if not line:
            raise TransportError("subprocess endpoint closed its stdout")
        return parse_message(line)

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class HttpEndpoint:
    """JSON-over-HTTP POST to a fixed URL."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def send(self, payload: dict[str, Any]) -> dict[str, Any]:
        try:
            resp = requests.post(self.url, json=payload, timeout=self.timeout)
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise TransportError(f"POST {self.url} failed: {exc}") from exc
        return parse_message(resp.text)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_endpoint(spec: str, timeout: float = 30.0):
    """"http(s)://..." becomes an HTTP endpoint; anything else is a subprocess command."""
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpEndpoint(spec, timeout=timeout)
    return StdioEndpoint(spec)


def send_with_retry(
    endpoint,
    payload: dict[str, Any],
    attempts: int = 3,
    backoff: float = 0.1,
    sleep: Callable[[float], None] = time.sleep,
) -> dict[str, Any]:
    """Retry transport failures with exponential backoff; protocol errors surface at once."""
    last: Optional[Exception] = None
    for attempt in range(attempts):
        try:
            return endpoint.send(payload)
        except TransportError as exc:
            last = exc
            if attempt < attempts - 1:
                sleep(backoff * (2**attempt))
    raise TransportError(f"gave up after {attempts} attempts: {last}") from last

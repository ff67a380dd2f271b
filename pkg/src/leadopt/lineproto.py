"""Line-oriented request/response transports over child pipes or TCP.

Protocol style: one request line out, one response line back, one request
in flight per connection. Endpoints are written `proc:<command line>` or
`tcp:<host>:<port>`.
"""

from __future__ import annotations

import os
import select
import shlex
import socket
import subprocess
import threading

__all__ = [
    "ProtocolError",
    "ProtocolTimeout",
    "LineTransport",
    "open_transport",
]


class ProtocolError(RuntimeError):
    """Malformed response, closed stream, or transport failure."""


class ProtocolTimeout(ProtocolError):
    """No complete response line arrived within the deadline."""


class LineTransport:
    def request(self, line: str) -> str:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _ProcTransport(LineTransport):
    def __init__(self, command: str, timeout: float):
        self._timeout = timeout
        self._lock = threading.Lock()
        self._buffer = b""
        self._proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )

    def request(self, line: str) -> str:
        with self._lock:
            if self._proc.poll() is not None:
                raise ProtocolError("child process has exited")
            assert self._proc.stdin is not None and self._proc.stdout is not None
            try:
                self._proc.stdin.write(line.encode("utf-8") + b"\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ProtocolError(f"write failed: {exc}") from exc
            fd = self._proc.stdout.fileno()
            while b"\n" not in self._buffer:
                ready, _, _ = select.select([fd], [], [], self._timeout)
                if not ready:
                    raise ProtocolTimeout(f"no response within {self._timeout}s")
                chunk = os.read(fd, 65536)
                if not chunk:
                    raise ProtocolError("child closed the stream")
                self._buffer += chunk
            response, self._buffer = self._buffer.split(b"\n", 1)
            return response.decode("utf-8").rstrip("\r")

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()


class _TcpTransport(LineTransport):
    def __init__(self, host: str, port: int, timeout: float):
        self._lock = threading.Lock()
        self._buffer = b""
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.settimeout(timeout)

    def request(self, line: str) -> str:
        with self._lock:
            try:
                self._sock.sendall(line.encode("utf-8") + b"\n")
                while b"\n" not in self._buffer:
                    chunk = self._sock.recv(65536)
                    if not chunk:
                        raise ProtocolError("server closed the connection")
                    self._buffer += chunk
            except socket.timeout as exc:
                raise ProtocolTimeout(str(exc)) from exc
            except OSError as exc:
                raise ProtocolError(str(exc)) from exc
            response, self._buffer = self._buffer.split(b"\n", 1)
            return response.decode("utf-8").rstrip("\r")

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def open_transport(endpoint: str, timeout: float = 10.0) -> LineTransport:
    """`proc:<command>` spawns a child process; `tcp:<host>:<port>` connects."""
    if endpoint.startswith("proc:"):
        return _ProcTransport(endpoint[len("proc:"):], timeout)
    if endpoint.startswith("tcp:"):
        host, _, port = endpoint[len("tcp:"):].rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad tcp endpoint {endpoint!r}")
        return _TcpTransport(host, int(port), timeout)
    raise ValueError(f"unknown endpoint scheme {endpoint!r}")

"""JSON-lines environment protocol server.

One session owns one environment. Requests are newline-delimited JSON
objects processed strictly in order:

    {"cmd":"reset","seed":<int>}
    {"cmd":"step","action":[px,py,theta,length]}
    {"cmd":"close"}

Every reset/step response carries the full observation as a flat row-major
list of 4096 zeros and ones plus reward, done, and info. Malformed input
never kills the session; it yields {"error": ...} instead. Responses are
serialized canonically (sorted keys, no whitespace) so identical request
streams produce byte-identical transcripts.
"""

from __future__ import annotations

import json
import socketserver
import sys

from .env import EnvConfig, ProtocolError, env_reset, env_step, initial_info
from .sde import WipeAction


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class EnvSession:
    """Protocol state machine for one client."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state = None

    def handle_line(self, line: str) -> tuple[str, bool]:
        """Process one request line; returns (response line, session open)."""
        line = line.strip()
        if not line:
            return _dumps({"error": "bad_request", "detail": "empty line"}), True
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            return _dumps({"error": "bad_request", "detail": f"invalid JSON: {exc.msg}"}), True
        if not isinstance(msg, dict):
            return _dumps({"error": "bad_request", "detail": "request must be an object"}), True
        cmd = msg.get("cmd")
        if cmd == "reset":
            return self._reset(msg), True
        if cmd == "step":
            return self._step(msg), True
        if cmd == "close":
            return _dumps({"ok": True}), False
        return _dumps({"error": "unknown_cmd", "detail": f"cmd={cmd!r}"}), True

    def _reset(self, msg: dict) -> str:
        seed = msg.get("seed")
        if not isinstance(seed, int) or isinstance(seed, bool):
            return _dumps({"error": "bad_request", "detail": "reset needs an integer seed"})
        try:
            state, obs = env_reset(self.config, seed)
        except Exception as exc:  # surfaced, not fatal to the session
            return _dumps({"error": "reset_failed", "detail": str(exc)})
        self.state = state
        return _dumps(
            {
                "obs": obs.flat_ints(),
                "reward": 0.0,
                "done": state.done,
                "info": initial_info(state),
            }
        )

    def _step(self, msg: dict) -> str:
        if self.state is None:
            return _dumps({"error": "no_episode", "detail": "reset before stepping"})
        a = msg.get("action")
        if (
            not isinstance(a, list)
            or len(a) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in a)
        ):
            return _dumps(
                {"error": "bad_request", "detail": "step needs action=[px,py,theta,length]"}
            )
        try:
            result = env_step(
                self.state, WipeAction(float(a[0]), float(a[1]), float(a[2]), float(a[3]))
            )
        except ProtocolError:
            return _dumps({"error": "episode_done"})
        except Exception as exc:
            return _dumps({"error": "step_failed", "detail": str(exc)})
        return _dumps(
            {
                "obs": result.observation.flat_ints(),
                "reward": result.reward,
                "done": result.done,
                "info": result.info,
            }
        )


def serve_stream(config: EnvConfig, instream, outstream) -> None:
    """Serve one session over text streams until close/EOF."""
    session = EnvSession(config)
    for line in instream:
        response, keep_going = session.handle_line(line)
        outstream.write(response + "\n")
        outstream.flush()
        if not keep_going:
            break


def serve_stdio(config: EnvConfig) -> None:
    serve_stream(config, sys.stdin, sys.stdout)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        session = EnvSession(self.server.env_config)  # type: ignore[attr-defined]
        for raw in self.rfile:
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError:
                line = ""
            response, keep_going = session.handle_line(line)
            self.wfile.write(response.encode("utf-8") + b"\n")
            self.wfile.flush()
            if not keep_going:
                break


class TcpEnvServer(socketserver.ThreadingTCPServer):
    """One independent session per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, config: EnvConfig, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.env_config = config

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve_tcp(config: EnvConfig, port: int, host: str = "127.0.0.1") -> None:
    with TcpEnvServer(config, host, port) as server:
        print(f"serving environment protocol on {host}:{server.port}", file=sys.stderr)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass

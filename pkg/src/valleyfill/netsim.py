"""Networked coordinator/agent runner over a line-delimited socket protocol.

One message per line: ``MESSAGE <kind> <iteration> <payload...>``.  Float
payloads are encoded with shortest round-trip decimal representation, so
64-bit values cross the wire bit-faithfully and networked runs reproduce
in-process trajectories exactly.

Message kinds:

- ``HELLO <load_id> <grid_digest>``       agent -> coordinator handshake
- ``ASSIGN <load_id> <grid_digest>``      coordinator acknowledgment
- ``SIGNAL <C> <S> v1..vS``               broadcast signal for the iteration
- ``PROFILEUPDATE <load_id> <member_index> <stay> <S> v1..vS``
- ``STOP <reason>``                       termination broadcast

Iterations are barrier synchronized: the signal for iteration k+1 is only
sent after all n profile updates for iteration k have been received.
"""

from __future__ import annotations

import math
import socket
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Profile, TimeGrid, aggregate, norm, norm2
from .engine import (ConfigurationError, EngineConfig, IterationRecord,
                     LoadSpec, Termination, Trajectory, convex_load_update,
                     coordinator_signal, finite_load_update, load_draw)

__all__ = [
    "ProtocolError",
    "AgentLostError",
    "RosterEntry",
    "serve_coordinator",
    "run_agent",
    "grid_digest",
]

DEFAULT_TIMEOUT = 30.0


class ProtocolError(RuntimeError):
    """Malformed or out-of-order message; the offending line is quoted."""


class AgentLostError(RuntimeError):
    """An agent timed out or disconnected mid-session."""


@dataclass(frozen=True)
class RosterEntry:
    """What the coordinator knows about one agent: id, kind and weight."""

    id: int
    finite: bool
    c: float


def grid_digest(grid: TimeGrid) -> str:
    return f"{grid.horizon_hours!r}:{grid.slots}"


def _encode_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _send(fh, kind: str, iteration: int, payload: str = "") -> None:
    line = f"MESSAGE {kind} {iteration}"
    if payload:
        line += f" {payload}"
    fh.write(line + "\n")
    fh.flush()


def _recv(fh, expect: Optional[Sequence[str]] = None) -> Tuple[str, int, List[str]]:
    line = fh.readline()
    if not line:
        raise AgentLostError("connection closed")
    parts = line.split()
    if len(parts) < 3 or parts[0] != "MESSAGE":
        raise ProtocolError(f"malformed message: {line!r}")
    kind = parts[1]
    try:
        iteration = int(parts[2])
    except ValueError:
        raise ProtocolError(f"malformed iteration in: {line!r}") from None
    if expect is not None and kind not in expect:
        raise ProtocolError(f"expected one of {expect}, got: {line!r}")
    return kind, iteration, parts[3:]


def _parse_profile(fields: List[str], grid: TimeGrid, line_hint: str) -> Profile:
    try:
        count = int(fields[0])
        values = [float(v) for v in fields[1:1 + count]]
    except (ValueError, IndexError):
        raise ProtocolError(f"malformed profile payload: {line_hint!r}") from None
    if count != grid.slots or len(values) != count:
        raise ProtocolError(
            f"profile length {count} does not match the {grid.slots}-slot session grid"
        )
    return Profile(np.array(values), grid)


def serve_coordinator(b: Profile, roster: Sequence[RosterEntry], cfg: EngineConfig,
                      endpoint: Tuple[str, int],
                      timeout: float = DEFAULT_TIMEOUT) -> Trajectory:
    """Run the coordinator loop against connected agents; mirrors engine.run.

    Accepts one connection per roster entry, barrier-synchronizes every
    iteration and applies the same stopping rules as the in-process engine.
    The returned Trajectory matches an in-process run with diagnostics
    disabled bit-exactly for identical seeds.
    """
    ids = [entry.id for entry in roster]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate load id in roster")
    if not roster:
        raise ConfigurationError("empty roster")
    C = sum(entry.c for entry in roster)
    all_finite = all(entry.finite for entry in roster)
    grid = b.grid
    digest = grid_digest(grid)

    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind(endpoint)
    server.listen(len(roster))
    server.settimeout(timeout)
    conns: Dict[int, Tuple[socket.socket, object]] = {}
    try:
        while len(conns) < len(roster):
            conn, _ = server.accept()
            conn.settimeout(timeout)
            fh = conn.makefile("rw", encoding="ascii", newline="\n")
            kind, _, fields = _recv(fh, expect=["HELLO"])
            load_id = int(fields[0])
            if load_id in conns:
                _send(fh, "STOP", 0, "DuplicateId")
                raise ConfigurationError(f"duplicate load id {load_id} in session")
            if load_id not in ids:
                _send(fh, "STOP", 0, "UnknownId")
                raise ConfigurationError(f"load id {load_id} not in roster")
            if fields[1] != digest:
                _send(fh, "STOP", 0, "GridMismatch")
                raise ProtocolError(
                    f"agent {load_id} grid digest {fields[1]!r} != session {digest!r}"
                )
            _send(fh, "ASSIGN", 0, f"{load_id} {digest}")
            conns[load_id] = (conn, fh)

        xs: Dict[int, Profile] = {i: Profile.zeros(grid) for i in ids}
        records: List[IterationRecord] = []
        initial_objective = norm2(aggregate(b, [xs[i] for i in ids]))
        g_prev: Optional[Profile] = None
        terminated = Termination.MAX_ITER
        stop_reason = "MaxIter"

        try:
            for k in range(1, cfg.max_iterations + 1):
                g = coordinator_signal(b, [xs[i] for i in ids], C)
                payload = f"{float(C)!r} {grid.slots} {_encode_floats(g.values)}"
                for i in ids:
                    _send(conns[i][1], "SIGNAL", k, payload)
                stays: Dict[int, bool] = {}
                changed = 0
                for i in ids:
                    fh = conns[i][1]
                    kind, it, fields = _recv(fh, expect=["PROFILEUPDATE"])
                    if it != k:
                        raise ProtocolError(
                            f"profile update for iteration {it}, expected {k}"
                        )
                    sender = int(fields[0])
                    if sender != i:
                        raise ProtocolError(f"update from {sender} on connection {i}")
                    stays[i] = fields[2] == "1"
                    x_new = _parse_profile(fields[3:], grid, " ".join(fields))
                    if x_new != xs[i]:
                        changed += 1
                    xs[i] = x_new
                objective = norm2(aggregate(b, [xs[i] for i in ids]))
                records.append(IterationRecord(k, g, objective, math.nan,
                                               math.nan, changed))
                if all_finite and all(stays.values()):
                    terminated = Termination.FIXED_POINT
                    stop_reason = "FixedPoint"
                    break
                if cfg.stop_on_epsilon and k > 2 and g_prev is not None:
                    if norm(Profile(g.values - g_prev.values, grid)) < cfg.epsilon:
                        terminated = Termination.TOLERANCE
                        stop_reason = "Tolerance"
                        break
                g_prev = g
        except (socket.timeout, AgentLostError) as exc:
            for i in ids:
                try:
                    _send(conns[i][1], "STOP", 0, "AgentLost")
                except OSError:
                    pass
            raise AgentLostError(f"agent lost mid-session: {exc}") from exc

        for i in ids:
            _send(conns[i][1], "STOP", len(records), stop_reason)
        return Trajectory(records, [xs[i] for i in ids], terminated,
                          initial_objective)
    finally:
        for conn, fh in conns.values():
            try:
                fh.close()
                conn.close()
            except OSError:
                pass
        server.close()


def _connect_with_retry(endpoint: Tuple[str, int], timeout: float) -> socket.socket:
    """Connect, retrying while the coordinator is still starting up."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection(endpoint, timeout=timeout)
        except ConnectionRefusedError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.05)


def run_agent(load: LoadSpec, master_seed: int, endpoint: Tuple[str, int],
              timeout: float = DEFAULT_TIMEOUT,
              C_hint: Optional[float] = None) -> int:
    """Single-load agent state machine; returns a process exit status.

    Per iteration: receive the signal, compute the convex or finite update
    with the draw keyed by (master_seed, id, k), reply with the profile.
    The stay flag reports a sampling distribution degenerate at the
    previous member profile.
    """
    grid = load.grid
    conn = _connect_with_retry(endpoint, timeout)
    fh = conn.makefile("rw", encoding="ascii", newline="\n")
    try:
        _send(fh, "HELLO", 0, f"{load.id} {grid_digest(grid)}")
        kind, _, fields = _recv(fh, expect=["ASSIGN", "STOP"])
        if kind == "STOP":
            return 1
        if int(fields[0]) != load.id or fields[1] != grid_digest(grid):
            raise ProtocolError(f"handshake refused: {' '.join(fields)!r}")

        x = Profile.zeros(grid)
        prev_member: Optional[int] = None
        while True:
            kind, k, fields = _recv(fh, expect=["SIGNAL", "STOP"])
            if kind == "STOP":
                return 0
            C = float(fields[0])
            g = _parse_profile(fields[1:], grid, " ".join(fields))
            if load.is_finite:
                draw = load_draw(master_seed, load.id, k)
                x_new, theta = finite_load_update(g, C, x, load.constraint,
                                                  load.c, draw)
                stay = (prev_member is not None
                        and theta.is_degenerate_at(prev_member))
                prev_member = load.constraint.member_index(x_new)
            else:
                x_new = convex_load_update(g, x, load.constraint, load.c)
                stay = x_new == x
            x = x_new
            _send(fh, "PROFILEUPDATE", k,
                  f"{load.id} {prev_member if prev_member is not None else -1} "
                  f"{1 if stay else 0} {grid.slots} {_encode_floats(x.values)}")
    finally:
        try:
            fh.close()
            conn.close()
        except OSError:
            pass

"""Wire messages of the master/worker protocol.

Each message is one JSON object on one line with the fields ``kind``,
``round``, ``component`` and ``payload``.  Floats are written with Python's
shortest round-trip representation, so decoding restores them exactly.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import MalformedMessage

HELLO = "HELLO"
STATS = "STATS"
BROADCAST_STATS = "BROADCAST_STATS"
POWER_R = "POWER_R"
BROADCAST_R = "BROADCAST_R"
POWER_NORM = "POWER_NORM"
BROADCAST_NORM = "BROADCAST_NORM"
COMPONENT_DONE = "COMPONENT_DONE"
ROUND_DONE = "ROUND_DONE"
SHUTDOWN = "SHUTDOWN"

# Payload keys every message of a kind must carry.
REQUIRED = {
    HELLO: ("site_id", "n_k", "schema_hash"),
    STATS: (),
    BROADCAST_STATS: ("op",),
    POWER_R: ("r",),
    BROADCAST_R: ("v",),
    POWER_NORM: ("sq",),
    BROADCAST_NORM: ("sigma",),
    COMPONENT_DONE: ("sigma", "v", "sign", "null"),
    ROUND_DONE: (),
    SHUTDOWN: (),
}
KINDS = tuple(REQUIRED)


@dataclass
class Message:
    kind: str
    round: int = 0
    component: int = 0
    payload: dict = field(default_factory=dict)

    def vector(self, key):
        return np.asarray(self.payload[key], dtype=float)


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def encode(msg):
    """Serialize to one UTF-8 line (with trailing newline)."""
    obj = {"kind": msg.kind, "round": int(msg.round), "component": int(msg.component),
           "payload": msg.payload}
    return (json.dumps(obj, default=_plain, separators=(",", ":")) + "\n").encode()


def decode(line):
    """Parse and validate one line; raises :class:`MalformedMessage`."""
    if isinstance(line, bytes):
        raw = line
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedMessage("invalid UTF-8", exc.start) from None
    else:
        text, raw = line, line.encode()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode())
        raise MalformedMessage(exc.msg, offset) from None
    end = len(raw.rstrip(b"\r\n"))
    if not isinstance(obj, dict):
        raise MalformedMessage("message is not a JSON object", 0)
    kind = obj.get("kind")
    if kind not in REQUIRED:
        raise MalformedMessage(f"unknown kind {kind!r}", _offset_of(raw, b'"kind"', end))
    for key in ("round", "component"):
        if not isinstance(obj.get(key), int) or isinstance(obj.get(key), bool) \
                or obj[key] < 0:
            raise MalformedMessage(f"field {key!r} must be a nonnegative integer",
                                   _offset_of(raw, f'"{key}"'.encode(), end))
    payload = obj.get("payload")
    if not isinstance(payload, dict):
        raise MalformedMessage("payload must be an object", _offset_of(raw, b'"payload"', end))
    missing = [k for k in REQUIRED[kind] if k not in payload]
    if missing:
        raise MalformedMessage(f"{kind} payload lacks {missing}",
                               _offset_of(raw, b'"payload"', end))
    return Message(kind, obj["round"], obj["component"], payload)


def _offset_of(raw, token, default):
    i = raw.find(token)
    return i if i >= 0 else default

"""Flow domain types and the line-delimited flow interchange format.

A flow is one bidirectional five-tuple TCP conversation. Flows are produced
by the pcap ingester or the synthetic generator and consumed by every
downstream stage through `write_flows` / `read_flows` (one JSON object per
line, fixed key order, so files round-trip byte-identically).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, TextIO

DIR_C2S = 1
DIR_S2C = -1


@dataclass(frozen=True)
class FiveTuple:
    """Directed socket pair; the first packet's sender is src."""

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int = 6

    def __post_init__(self):
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 65535:
                raise ValueError(f"port out of range: {port}")

    def canonical(self) -> tuple:
        """Direction-free key: a tuple and its reverse map to the same flow."""
        a = (self.src_ip, self.src_port)
        b = (self.dst_ip, self.dst_port)
        return (min(a, b), max(a, b), self.protocol)

    def reversed(self) -> "FiveTuple":
        return FiveTuple(self.dst_ip, self.src_ip, self.dst_port,
                         self.src_port, self.protocol)


@dataclass
class Packet:
    """One transport payload observation inside a flow.

    payload holds only TCP payload bytes (headers already stripped) and may
    be truncated for storage; payload_len is the true payload length.
    """

    direction: int  # DIR_C2S or DIR_S2C
    payload: bytes
    capture_index: int
    payload_len: int = -1

    def __post_init__(self):
        if self.payload_len < 0:
            self.payload_len = len(self.payload)


@dataclass(frozen=True)
class CommInfo:
    """Communication identity of a flow: destination tuple plus, when a TLS
    certificate was visible, the hex digest of the server leaf certificate."""

    dst_ip: str
    dst_port: int
    tls_cert_fingerprint: Optional[str] = None

    def key(self) -> tuple:
        return (self.dst_ip, self.dst_port, self.tls_cert_fingerprint)


@dataclass
class Flow:
    key: FiveTuple
    packets: list = field(default_factory=list)
    label: Optional[int] = None
    comm: Optional[CommInfo] = None

    def payload_bytes(self, limit: Optional[int] = None) -> bytes:
        """Concatenated payloads in capture order, optionally truncated."""
        out = bytearray()
        for pkt in self.packets:
            out += pkt.payload
            if limit is not None and len(out) >= limit:
                return bytes(out[:limit])
        return bytes(out)


def flow_to_obj(flow: Flow, max_payload_bytes: Optional[int] = None) -> dict:
    """Fixed-key-order dict for one flow line. Stored payload hex is capped
    at max_payload_bytes cumulative over the flow (the token builder only
    ever reads that prefix); packet `len` keeps the true payload length."""
    budget = max_payload_bytes
    pkts = []
    for pkt in flow.packets:
        data = pkt.payload
        if budget is not None:
            data = data[:max(budget, 0)]
            budget -= len(data)
        pkts.append({
            "dir": pkt.direction,
            "len": pkt.payload_len,
            "payload": data.hex(),
        })
    comm = flow.comm
    return {
        "key": {
            "src_ip": flow.key.src_ip,
            "dst_ip": flow.key.dst_ip,
            "src_port": flow.key.src_port,
            "dst_port": flow.key.dst_port,
            "protocol": flow.key.protocol,
        },
        "label": flow.label,
        "comm": None if comm is None else {
            "dst_ip": comm.dst_ip,
            "dst_port": comm.dst_port,
            "cert": comm.tls_cert_fingerprint,
        },
        "packets": pkts,
    }


def flow_from_obj(obj: dict) -> Flow:
    key = FiveTuple(obj["key"]["src_ip"], obj["key"]["dst_ip"],
                    obj["key"]["src_port"], obj["key"]["dst_port"],
                    obj["key"]["protocol"])
    comm = None
    if obj.get("comm") is not None:
        comm = CommInfo(obj["comm"]["dst_ip"], obj["comm"]["dst_port"],
                        obj["comm"]["cert"])
    packets = [
        Packet(direction=p["dir"], payload=bytes.fromhex(p["payload"]),
               capture_index=i, payload_len=p["len"])
        for i, p in enumerate(obj["packets"])
    ]
    return Flow(key=key, packets=packets, label=obj["label"], comm=comm)


def dump_flow_line(flow: Flow, max_payload_bytes: Optional[int] = None) -> str:
    return json.dumps(flow_to_obj(flow, max_payload_bytes),
                      separators=(",", ":"))


def write_flows(path, flows: Iterable[Flow],
                max_payload_bytes: Optional[int] = None) -> int:
    n = 0
    with open(path, "w") as fh:
        for flow in flows:
            fh.write(dump_flow_line(flow, max_payload_bytes) + "\n")
            n += 1
    return n


def read_flows(path) -> list:
    with open(path) as fh:
        return [flow_from_obj(json.loads(line)) for line in fh if line.strip()]


def iter_flow_lines(fh: TextIO) -> Iterator[Flow]:
    for line in fh:
        if line.strip():
            yield flow_from_obj(json.loads(line))

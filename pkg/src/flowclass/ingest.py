"""Packet capture parsing and bidirectional TCP flow assembly.

Reads classic pcap containers (both byte orders, microsecond and nanosecond
magics), strips link/IP/TCP headers down to transport payload, and groups
packets into one flow per five-tuple (the tuple and its reverse share a
flow). The client side is the SYN sender, falling back to the sender of the
first captured packet. Non-TCP frames and unparseable layering are dropped
and counted; packets are kept in capture order with no retransmission
de-duplication or stream reconstruction.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import InputError
from .flows import DIR_C2S, DIR_S2C, CommInfo, FiveTuple, Flow, Packet

log = logging.getLogger(__name__)

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW_IP = 101

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_ACK = 0x10

_PCAP_MAGICS = {
    0xA1B2C3D4: "<",
    0xA1B23C4D: "<",
    0xD4C3B2A1: ">",
    0x4D3CB2A1: ">",
}


class ParseSkip(Exception):
    """Frame does not parse through the link/IP/TCP layering."""


@dataclass
class ParsedFrame:
    tuple: FiveTuple          # as captured: src = frame sender
    flags: int
    payload: bytes


@dataclass
class IngestResult:
    flows: list
    non_tcp_dropped: int = 0
    frames_skipped: int = 0
    truncated_records: int = 0


# ---------------------------------------------------------------------------
# Layer parsing
# ---------------------------------------------------------------------------

def _ipv4_addr(raw: bytes) -> str:
    return ".".join(str(b) for b in raw)


def _ipv6_addr(raw: bytes) -> str:
    return ":".join(raw[i:i + 2].hex() for i in range(0, 16, 2))


def _parse_ipv4(data: bytes) -> tuple:
    if len(data) < 20:
        raise ParseSkip("short IPv4 header")
    ihl = (data[0] & 0x0F) * 4
    if data[0] >> 4 != 4 or ihl < 20 or len(data) < ihl:
        raise ParseSkip("bad IPv4 header")
    total_len = struct.unpack_from("!H", data, 2)[0]
    if total_len < ihl or total_len > len(data):
        raise ParseSkip("bad IPv4 total length")
    frag = struct.unpack_from("!H", data, 6)[0]
    if frag & 0x1FFF or frag & 0x2000:  # fragment offset or more-fragments
        raise ParseSkip("fragmented IPv4 packet")
    proto = data[9]
    src = _ipv4_addr(data[12:16])
    dst = _ipv4_addr(data[16:20])
    return proto, src, dst, data[ihl:total_len]


def _parse_ipv6(data: bytes) -> tuple:
    if len(data) < 40:
        raise ParseSkip("short IPv6 header")
    if data[0] >> 4 != 6:
        raise ParseSkip("bad IPv6 version")
    payload_len = struct.unpack_from("!H", data, 4)[0]
    nxt = data[6]
    src = _ipv6_addr(data[8:24])
    dst = _ipv6_addr(data[24:40])
    body = data[40:40 + payload_len]
    if len(body) < payload_len:
        raise ParseSkip("truncated IPv6 payload")
    # walk hop-by-hop / routing / destination extension headers
    while nxt in (0, 43, 60):
        if len(body) < 8:
            raise ParseSkip("truncated IPv6 extension header")
        ext_len = (body[1] + 1) * 8
        if len(body) < ext_len:
            raise ParseSkip("truncated IPv6 extension header")
        nxt = body[0]
        body = body[ext_len:]
    if nxt == 44:
        raise ParseSkip("fragmented IPv6 packet")
    return nxt, src, dst, body


def parse_frame(frame: bytes, linktype: int = LINKTYPE_ETHERNET) -> ParsedFrame:
    """Strip link, IP and TCP headers; ParseSkip for anything that is not a
    clean unfragmented TCP packet."""
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            raise ParseSkip("short ethernet frame")
        ethertype = struct.unpack_from("!H", frame, 12)[0]
        offset = 14
        while ethertype in (0x8100, 0x88A8):  # VLAN tags
            if len(frame) < offset + 4:
                raise ParseSkip("short VLAN header")
            ethertype = struct.unpack_from("!H", frame, offset + 2)[0]
            offset += 4
        ip = frame[offset:]
        if ethertype == 0x0800:
            proto, src, dst, body = _parse_ipv4(ip)
        elif ethertype == 0x86DD:
            proto, src, dst, body = _parse_ipv6(ip)
        else:
            raise ParseSkip(f"non-IP ethertype 0x{ethertype:04x}")
    elif linktype == LINKTYPE_RAW_IP:
        if not frame:
            raise ParseSkip("empty frame")
        version = frame[0] >> 4
        if version == 4:
            proto, src, dst, body = _parse_ipv4(frame)
        elif version == 6:
            proto, src, dst, body = _parse_ipv6(frame)
        else:
            raise ParseSkip("unknown IP version")
    else:
        raise ParseSkip(f"unsupported linktype {linktype}")

    if proto != 6:
        raise ParseSkip(f"non-TCP protocol {proto}")
    if len(body) < 20:
        raise ParseSkip("short TCP header")
    src_port, dst_port = struct.unpack_from("!HH", body, 0)
    data_offset = (body[12] >> 4) * 4
    if data_offset < 20 or len(body) < data_offset:
        raise ParseSkip("bad TCP data offset")
    flags = body[13]
    return ParsedFrame(
        tuple=FiveTuple(src, dst, src_port, dst_port, 6),
        flags=flags,
        payload=body[data_offset:],
    )


def filter_bias_bytes(frame: bytes, linktype: int = LINKTYPE_ETHERNET) -> bytes:
    """Transport payload only; every header byte (MAC, IPs, ports, TCP
    options) is stripped. Raises ParseSkip when the layering does not parse."""
    return parse_frame(frame, linktype).payload


# ---------------------------------------------------------------------------
# pcap container
# ---------------------------------------------------------------------------

def read_pcap(capture: Union[bytes, str]) -> tuple:
    """Parse a classic pcap byte stream (or file path).

    Returns (linktype, list of frame byte strings, truncated_record_count).
    A malformed global header is fatal; a truncated packet record stops the
    scan and is counted.
    """
    if isinstance(capture, (str, bytes)) and not isinstance(capture, bytes):
        with open(capture, "rb") as fh:
            capture = fh.read()
    if len(capture) < 24:
        raise InputError("capture shorter than a pcap global header")
    (magic,) = struct.unpack_from("<I", capture, 0)
    endian = _PCAP_MAGICS.get(magic)
    if endian is None:
        raise InputError(f"bad pcap magic 0x{magic:08x}")
    _, _, _, _, _, linktype = struct.unpack_from(endian + "HHiIII", capture, 4)
    frames = []
    truncated = 0
    off = 24
    while off < len(capture):
        if off + 16 > len(capture):
            truncated += 1
            log.warning("truncated packet record header at offset %d", off)
            break
        _, _, incl_len, _ = struct.unpack_from(endian + "IIII", capture, off)
        off += 16
        if off + incl_len > len(capture):
            truncated += 1
            log.warning("truncated packet record body at offset %d", off)
            break
        frames.append(capture[off:off + incl_len])
        off += incl_len
    return linktype, frames, truncated


# ---------------------------------------------------------------------------
# Flow assembly
# ---------------------------------------------------------------------------

@dataclass
class _FlowBuilder:
    first_sender: tuple
    syn_sender: Optional[tuple] = None
    entries: list = field(default_factory=list)  # (sender, payload, index)

    def finalize(self, label: Optional[int]) -> Flow:
        client = self.syn_sender or self.first_sender
        sender0, _, _, receiver0 = self.entries[0]
        server = receiver0 if sender0 == client else sender0
        key = FiveTuple(client[0], server[0], client[1], server[1], 6)
        packets = [
            Packet(direction=DIR_C2S if sender == client else DIR_S2C,
                   payload=payload, capture_index=index)
            for sender, payload, index, _ in self.entries
        ]
        flow = Flow(key=key, packets=packets, label=label)
        flow.comm = extract_comm_info(flow)
        return flow


def reassemble_flows(capture: Union[bytes, str],
                     label: Optional[int] = None) -> IngestResult:
    """Group every parseable TCP packet of a capture into per-five-tuple
    bidirectional flows, in capture order."""
    linktype, frames, truncated = read_pcap(capture)
    builders: dict = {}
    order: list = []
    non_tcp = 0
    skipped = 0
    for index, frame in enumerate(frames):
        try:
            parsed = parse_frame(frame, linktype)
        except ParseSkip as exc:
            if "non-TCP" in str(exc):
                non_tcp += 1
            else:
                skipped += 1
            continue
        tup = parsed.tuple
        sender = (tup.src_ip, tup.src_port)
        receiver = (tup.dst_ip, tup.dst_port)
        key = tup.canonical()
        builder = builders.get(key)
        if builder is None:
            builder = _FlowBuilder(first_sender=sender)
            builders[key] = builder
            order.append(key)
        if (builder.syn_sender is None and parsed.flags & TCP_SYN
                and not parsed.flags & TCP_ACK):
            builder.syn_sender = sender
        builder.entries.append((sender, parsed.payload, index, receiver))
    flows = [builders[key].finalize(label) for key in order]
    return IngestResult(flows=flows, non_tcp_dropped=non_tcp,
                        frames_skipped=skipped, truncated_records=truncated)


# ---------------------------------------------------------------------------
# Communication info (destination tuple + TLS certificate fingerprint)
# ---------------------------------------------------------------------------

def _tls_certificate_digest(server_stream: bytes) -> Optional[str]:
    """SHA-256 over the first certificate entry of the first TLS Certificate
    handshake message in the server byte stream; None when absent."""
    handshake = bytearray()
    off = 0
    while off + 5 <= len(server_stream):
        ctype = server_stream[off]
        version_major = server_stream[off + 1]
        (length,) = struct.unpack_from("!H", server_stream, off + 3)
        if version_major != 3 or ctype not in (20, 21, 22, 23):
            break
        fragment = server_stream[off + 5:off + 5 + length]
        if ctype == 22:
            handshake += fragment
        elif ctype in (20, 23):  # encrypted from here on
            break
        if len(fragment) < length:
            break
        off += 5 + length
    pos = 0
    while pos + 4 <= len(handshake):
        msg_type = handshake[pos]
        msg_len = int.from_bytes(handshake[pos + 1:pos + 4], "big")
        body = bytes(handshake[pos + 4:pos + 4 + msg_len])
        if msg_type == 11 and len(body) == msg_len:
            if len(body) < 6:
                return None
            cert_len = int.from_bytes(body[3:6], "big")
            der = body[6:6 + cert_len]
            if len(der) < cert_len:
                return None
            return hashlib.sha256(der).hexdigest()
        pos += 4 + msg_len
    return None


def extract_comm_info(flow: Flow) -> CommInfo:
    """Destination tuple of the responder plus, when a TLS certificate
    record is visible (TLS <= 1.2), the digest of the server leaf
    certificate. TLS parse failures leave the fingerprint absent."""
    if not flow.packets:
        raise InputError("flow has no packets")
    server_stream = b"".join(p.payload for p in flow.packets
                             if p.direction == DIR_S2C)
    try:
        digest = _tls_certificate_digest(server_stream)
    except Exception:
        digest = None
    return CommInfo(dst_ip=flow.key.dst_ip, dst_port=flow.key.dst_port,
                    tls_cert_fingerprint=digest)


# ---------------------------------------------------------------------------
# Capture-file -> class-id label maps
# ---------------------------------------------------------------------------

def load_label_map(path) -> dict:
    """Lines of `<capture-file-name> <class-id>`; '#' starts a comment."""
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: want '<name> <class-id>'")
            mapping[parts[0]] = int(parts[1])
    return mapping

"""Deterministic synthetic flow corpora with controllable imbalance and
traffic homogeneity.

Each class draws payload bytes from its own band of a small byte alphabet
and packet lengths from a class-specific profile, so classes are separable
but overlapping. A configurable fraction of flows is "shared-domain": those
take their communication identity and a payload prefix from a pool that all
classes share, mimicking common CDN / analytics backends. The unlabeled
pool is drawn from the same mixture with labels stripped.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Optional

from .flows import DIR_C2S, DIR_S2C, CommInfo, FiveTuple, Flow, Packet


@dataclass
class CorpusSpec:
    class_counts: list
    unlabeled_counts: Optional[list] = None
    unlabeled_factor: float = 3.0
    shared_fraction: float = 0.3
    payload_bytes: int = 48
    prefix_len: int = 16
    packets_min: int = 6
    packets_max: int = 12
    alphabet: int = 16
    band_width: int = 6
    comm_pool: int = 4
    shared_comm_pool: int = 4
    payload_noise: float = 0.1
    length_noise: float = 0.1
    length_stride: int = 60
    profile_positions: Optional[list] = None  # class -> profile slot
    seed: int = 0

    def __post_init__(self):
        if not self.class_counts or any(c < 1 for c in self.class_counts):
            raise ValueError("class_counts must all be >= 1")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError("shared_fraction must be in [0, 1]")
        if self.unlabeled_counts is None:
            self.unlabeled_counts = [max(1, round(c * self.unlabeled_factor))
                                     for c in self.class_counts]

    @property
    def n_classes(self) -> int:
        return len(self.class_counts)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "CorpusSpec":
        """Build from a flat string mapping (one config file section)."""
        kwargs = {}
        for key, value in mapping.items():
            if key in ("class_counts", "unlabeled_counts"):
                kwargs[key] = [int(x) for x in str(value).split(",") if x.strip()]
            elif key in ("shared_fraction", "unlabeled_factor", "payload_noise",
                         "length_noise"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def _cert(tag: str) -> str:
    return hashlib.sha256(tag.encode()).hexdigest()


def _class_comm_pool(spec: CorpusSpec, cls: int) -> list:
    return [CommInfo(f"10.{cls}.0.{j + 1}", 443, _cert(f"class{cls}-cert{j}"))
            for j in range(spec.comm_pool)]


def _shared_comm_pool(spec: CorpusSpec) -> list:
    return [CommInfo(f"203.0.113.{j + 1}", 443, _cert(f"shared-cert{j}"))
            for j in range(spec.shared_comm_pool)]


def _position(spec: CorpusSpec, cls: int) -> int:
    """Profile slot of a class; slots control how close class payload bands
    and length profiles sit, so a permutation like [0, 2, 4, 1] makes the
    last (rarest) class nearly indistinguishable from its neighbors."""
    if spec.profile_positions is not None:
        return spec.profile_positions[cls]
    return cls


def _class_byte(spec: CorpusSpec, cls: int, rng: random.Random) -> int:
    if rng.random() < spec.payload_noise:
        return rng.randrange(spec.alphabet)
    stride = max(1, spec.alphabet // max(spec.n_classes, 1))
    return (_position(spec, cls) * stride
            + rng.randrange(spec.band_width)) % spec.alphabet

def _shared_byte(spec: CorpusSpec, rng: random.Random) -> int:
    return rng.randrange(spec.alphabet)


def _class_lengths(spec: CorpusSpec, cls: int) -> list:
    # neighboring profile slots share two of their three lengths
    base = spec.length_stride
    return [120 + base * (_position(spec, cls) + j) for j in range(3)]

_GLOBAL_LENGTHS = [500, 1000, 1500]


def _make_flow(spec: CorpusSpec, cls: int, shared: bool, flow_idx: int,
               shared_pool: list, class_pools: list,
               rng: random.Random) -> Flow:
    comm = rng.choice(shared_pool if shared else class_pools[cls])

    n_prefix = min(spec.prefix_len, spec.payload_bytes) if shared else 0
    payload = bytes(
        [_shared_byte(spec, rng) for _ in range(n_prefix)]
        + [_class_byte(spec, cls, rng)
           for _ in range(spec.payload_bytes - n_prefix)])

    n_packets = rng.randint(spec.packets_min, spec.packets_max)
    burst = 1 + cls % 3  # server packets per client request, class-dependent
    lengths = _class_lengths(spec, cls)
    packets = []
    offset = 0
    chunk = max(1, -(-len(payload) // n_packets))  # ceil split across packets
    position = 0
    for i in range(n_packets):
        if position == 0:
            direction = DIR_C2S
        else:
            direction = DIR_S2C
        position = (position + 1) % (burst + 1)
        if rng.random() < spec.length_noise:
            length = rng.choice(_GLOBAL_LENGTHS)
        else:
            length = rng.choice(lengths)
        data = payload[offset:offset + chunk]
        offset += len(data)
        packets.append(Packet(direction=direction, payload=data,
                              capture_index=i, payload_len=length))

    key = FiveTuple(src_ip=f"192.168.{flow_idx // 250}.{flow_idx % 250 + 1}",
                    dst_ip=comm.dst_ip,
                    src_port=20000 + flow_idx % 40000,
                    dst_port=comm.dst_port)
    return Flow(key=key, packets=packets, label=cls, comm=comm)


def generate(spec: CorpusSpec):
    """Returns (labeled flows, unlabeled flows), both fully determined by
    the spec and its seed."""
    rng = random.Random(spec.seed)
    shared_pool = _shared_comm_pool(spec)
    class_pools = [_class_comm_pool(spec, k) for k in range(spec.n_classes)]

    def draw(counts, labeled: bool, base_idx: int) -> list:
        flows = []
        idx = base_idx
        for cls, count in enumerate(counts):
            first_of_class = len(flows)
            for _ in range(count):
                shared = rng.random() < spec.shared_fraction
                flow = _make_flow(spec, cls, shared, idx, shared_pool,
                                  class_pools, rng)
                if not labeled:
                    flow.label = None
                flows.append(flow)
                idx += 1
            # guarantee same-class comm diversity so weak negatives exist
            if labeled and count >= 2 and spec.comm_pool >= 2:
                group = flows[first_of_class:first_of_class + count]
                if len({f.comm.key() for f in group}) == 1:
                    alt = next(c for c in class_pools[cls]
                               if c.key() != group[0].comm.key())
                    group[-1].comm = alt
                    group[-1].key = FiveTuple(group[-1].key.src_ip, alt.dst_ip,
                                              group[-1].key.src_port,
                                              alt.dst_port)
        return flows

    labeled = draw(spec.class_counts, labeled=True, base_idx=0)
    unlabeled = draw(spec.unlabeled_counts, labeled=False,
                     base_idx=len(labeled))
    return labeled, unlabeled

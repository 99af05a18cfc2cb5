"""Coding dictionary and multi-granularity token sequences.

Every flow becomes one fixed-length id sequence

    [CLS] + RP bigrams (padded to m/2) + [SEP] + PL tokens (padded to n)

where the RP segment tokenizes the flow's first m payload bytes as 2-byte
hex bigrams and the PL segment encodes signed payload lengths of the first
n packets ("+328" client->server, "-1074" server->client). RP and PL tokens
share one frequency-ranked dictionary together with the four special
markers PAD/UNK/CLS/SEP.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .flows import DIR_C2S, Flow

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")


def sequence_length(m: int, n: int) -> int:
    return m // 2 + n + 2


def build_rp_tokens(flow: Flow, m: int) -> list:
    """Hex bigram tokens over the flow's first m payload bytes.

    Payloads are concatenated across packets in capture order before
    truncation; a trailing odd byte is dropped.
    """
    if m <= 0 or m % 2:
        raise ValueError(f"byte budget m must be even and positive, got {m}")
    data = flow.payload_bytes(limit=m)
    return [data[i:i + 2].hex() for i in range(0, len(data) - len(data) % 2, 2)]


def build_pl_tokens(flow: Flow, n: int) -> list:
    """Signed packet-length tokens for the flow's first n packets."""
    if n <= 0:
        raise ValueError(f"packet budget n must be positive, got {n}")
    out = []
    for pkt in flow.packets[:n]:
        sign = "+" if pkt.direction == DIR_C2S else "-"
        out.append(sign + str(pkt.payload_len))
    return out


@dataclass
class Vocab:
    """Token -> dense id map; ids 0-3 are the special markers, the rest are
    assigned by non-increasing corpus frequency with lexicographic
    tie-break."""

    entries: dict
    frequencies: dict = field(default_factory=dict)
    m: int = 0
    n: int = 0

    @property
    def size(self) -> int:
        return len(self.entries)

    def id_of(self, token: str) -> int:
        return self.entries.get(token, UNK_ID)

    def tokens_by_id(self) -> list:
        out = [None] * len(self.entries)
        for tok, idx in self.entries.items():
            out[idx] = tok
        return out


def rank_tokens(counts: Counter) -> dict:
    """Assign ids: specials first, then descending frequency with
    lexicographic tie-break."""
    entries = {tok: i for i, tok in enumerate(SPECIALS)}
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    for offset, (tok, _) in enumerate(ranked):
        entries[tok] = len(SPECIALS) + offset
    return entries


def build_vocab(corpus: Iterable[Flow], m: int, n: int) -> Vocab:
    """One unified dictionary over all RP and PL tokens in the corpus."""
    counts = Counter()
    for flow in corpus:
        counts.update(build_rp_tokens(flow, m))
        counts.update(build_pl_tokens(flow, n))
    return Vocab(entries=rank_tokens(counts), frequencies=dict(counts),
                 m=m, n=n)


@dataclass
class TokenSequence:
    """Encoded flow of fixed length m/2 + n + 2."""

    ids: list
    rp_len: int
    pl_len: int

    def __len__(self):
        return len(self.ids)


def encode_sequence(flow: Flow, vocab: Vocab, m: Optional[int] = None,
                    n: Optional[int] = None) -> TokenSequence:
    m = vocab.m if m is None else m
    n = vocab.n if n is None else n
    rp = [vocab.id_of(t) for t in build_rp_tokens(flow, m)]
    pl = [vocab.id_of(t) for t in build_pl_tokens(flow, n)]
    ids = ([CLS_ID] + rp + [PAD_ID] * (m // 2 - len(rp))
           + [SEP_ID] + pl + [PAD_ID] * (n - len(pl)))
    return TokenSequence(ids=ids, rp_len=len(rp), pl_len=len(pl))


def mask_segment(seq: TokenSequence, segment: str, m: int, n: int) -> TokenSequence:
    """Replace one segment's ids with PAD (ablation of the RP or PL feature).

    CLS and SEP markers are kept so the sequence layout is unchanged.
    """
    ids = list(seq.ids)
    if segment == "rp":
        for i in range(1, 1 + m // 2):
            ids[i] = PAD_ID
        return TokenSequence(ids=ids, rp_len=0, pl_len=seq.pl_len)
    if segment == "pl":
        for i in range(2 + m // 2, len(ids)):
            ids[i] = PAD_ID
        return TokenSequence(ids=ids, rp_len=seq.rp_len, pl_len=0)
    raise ValueError(f"unknown segment {segment!r} (want 'rp' or 'pl')")


# ---------------------------------------------------------------------------
# Vocab file: header line `m=<m>\tn=<n>\tV=<V>`, then one `token\tid\tfreq`
# line per entry in id order. Round-trips byte-exactly.
# ---------------------------------------------------------------------------

def dump_vocab(vocab: Vocab) -> str:
    lines = [f"m={vocab.m}\tn={vocab.n}\tV={vocab.size}"]
    for idx, tok in enumerate(vocab.tokens_by_id()):
        freq = vocab.frequencies.get(tok, 0)
        lines.append(f"{tok}\t{idx}\t{freq}")
    return "\n".join(lines) + "\n"


def parse_vocab(text: str) -> Vocab:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty vocab file")
    header = dict(kv.split("=", 1) for kv in lines[0].split("\t"))
    m, n, size = int(header["m"]), int(header["n"]), int(header["V"])
    entries, freqs = {}, {}
    for line in lines[1:]:
        tok, idx, freq = line.split("\t")
        entries[tok] = int(idx)
        if int(idx) >= len(SPECIALS):
            freqs[tok] = int(freq)
    if len(entries) != size:
        raise ValueError(f"vocab header V={size} but {len(entries)} entries")
    for i, special in enumerate(SPECIALS):
        if entries.get(special) != i:
            raise ValueError(f"special {special} missing or misplaced")
    return Vocab(entries=entries, frequencies=freqs, m=m, n=n)


def save_vocab(path, vocab: Vocab) -> None:
    with open(path, "w") as fh:
        fh.write(dump_vocab(vocab))


def load_vocab(path) -> Vocab:
    with open(path) as fh:
        return parse_vocab(fh.read())


# ---------------------------------------------------------------------------
# Token records: the tokens.jsonl interchange between encode and the
# training stages. Carries label and communication identity through so the
# pair sampler does not need the original flow file.
# ---------------------------------------------------------------------------

@dataclass
class TokenRecord:
    flow_id: int
    ids: list
    rp_len: int
    pl_len: int
    label: Optional[int] = None
    comm: Optional[tuple] = None  # (dst_ip, dst_port, cert-or-None)

    @property
    def sequence(self) -> TokenSequence:
        return TokenSequence(ids=self.ids, rp_len=self.rp_len, pl_len=self.pl_len)


def encode_corpus(flows: Iterable[Flow], vocab: Vocab,
                  masked_segments: Iterable[str] = ()) -> list:
    records = []
    for i, flow in enumerate(flows):
        seq = encode_sequence(flow, vocab)
        for segment in masked_segments:
            seq = mask_segment(seq, segment, vocab.m, vocab.n)
        comm = flow.comm.key() if flow.comm is not None else None
        records.append(TokenRecord(flow_id=i, ids=seq.ids, rp_len=seq.rp_len,
                                   pl_len=seq.pl_len, label=flow.label,
                                   comm=comm))
    return records


def record_to_obj(rec: TokenRecord) -> dict:
    return {
        "id": rec.flow_id,
        "label": rec.label,
        "comm": None if rec.comm is None else list(rec.comm),
        "rp_len": rec.rp_len,
        "pl_len": rec.pl_len,
        "ids": rec.ids,
    }


def record_from_obj(obj: dict) -> TokenRecord:
    comm = obj.get("comm")
    return TokenRecord(flow_id=obj["id"], ids=obj["ids"], rp_len=obj["rp_len"],
                       pl_len=obj["pl_len"], label=obj["label"],
                       comm=None if comm is None else tuple(comm))


def write_records(path, records: Iterable[TokenRecord]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_obj(rec), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_records(path) -> list:
    with open(path) as fh:
        return [record_from_obj(json.loads(line)) for line in fh if line.strip()]

"""Flow assembly, packet-length tokenization and the line-delimited flow files."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

PROTOCOLS = ("TCP", "UDP")
DEFAULT_HEAD = 50
DEFAULT_MAX_LEN = 1500
PAD = 0


class FlowFileError(ValueError):
    """Raised for unparseable flow or packet files; carries the 1-based line number."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True)
class PacketRecord:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: str
    timestamp: float
    length: int


class FlowKey(NamedTuple):
    """Directional five-tuple; A->B and B->A are different keys."""

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: str


@dataclass(frozen=True)
class Flow:
    key: FlowKey
    first_ts: float
    lengths: tuple[int, ...]

    def __post_init__(self):
        if not self.lengths:
            raise ValueError("a flow needs at least one packet")


@dataclass(frozen=True)
class LengthSequence:
    tokens: tuple[int, ...]
    true_len: int

    @property
    def n(self) -> int:
        return len(self.tokens)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


def _check_packet(i: int, p: PacketRecord) -> None:
    if not isinstance(p.length, (int, np.integer)) or p.length < 1:
        raise ValueError(f"packet record {i}: length must be a positive integer, got {p.length!r}")
    if not math.isfinite(p.timestamp):
        raise ValueError(f"packet record {i}: non-finite timestamp")
    if p.protocol not in PROTOCOLS:
        raise ValueError(f"packet record {i}: unknown protocol {p.protocol!r}")
    for name in ("src_port", "dst_port"):
        port = getattr(p, name)
        if not 0 <= port <= 65535:
            raise ValueError(f"packet record {i}: {name} {port} out of range")


def assemble_flows(packets: Sequence[PacketRecord]) -> list[Flow]:
    """Group packets by directional five-tuple.

    Lengths inside a flow follow packet timestamps (stable on ties, so input
    order breaks them). Flows are returned ordered by their first timestamp,
    again stable with respect to first appearance.
    """
    groups: dict[FlowKey, list[tuple[float, int, int]]] = {}
    for i, p in enumerate(packets):
        _check_packet(i, p)
        key = FlowKey(p.src_ip, p.dst_ip, int(p.src_port), int(p.dst_port), p.protocol)
        groups.setdefault(key, []).append((float(p.timestamp), i, int(p.length)))

    flows = []
    for key, items in groups.items():
        items.sort(key=lambda t: (t[0], t[1]))
        flows.append(Flow(key, items[0][0], tuple(length for _, _, length in items)))
    flows.sort(key=lambda f: f.first_ts)
    return flows


def tokenize(flow: Flow, n: int = DEFAULT_HEAD, max_len: int = DEFAULT_MAX_LEN) -> LengthSequence:
    """Keep the first ``n`` packet lengths, clamp to ``max_len`` and zero-pad.

    Token ids equal the clamped byte length, so the vocabulary size is
    ``max_len + 1`` with 0 reserved for padding.
    """
    if n < 1 or max_len < 1:
        raise ValueError("n and max_len must be >= 1")
    head = [min(int(x), max_len) for x in flow.lengths[:n]]
    true_len = len(head)
    return LengthSequence(tuple(head) + (PAD,) * (n - true_len), true_len)


def tokenize_many(flows: Iterable[Flow], n: int = DEFAULT_HEAD,
                  max_len: int = DEFAULT_MAX_LEN) -> list[LengthSequence]:
    return [tokenize(f, n, max_len) for f in flows]


def vocab_size(max_len: int = DEFAULT_MAX_LEN) -> int:
    return max_len + 1


# ---------------------------------------------------------------------------
# files

def _format_flow(flow: Flow) -> str:
    k = flow.key
    lengths = " ".join(str(x) for x in flow.lengths)
    return f"{k.src_ip},{k.dst_ip},{k.src_port},{k.dst_port},{k.protocol},{flow.first_ts!r},{lengths}"


def _parse_int(text: str, line_no: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise FlowFileError(line_no, f"{what} is not an integer: {text!r}") from None


def _parse_flow(fields: list[str], line_no: int) -> Flow:
    src, dst, sport, dport, proto, ts, lengths = fields
    if proto not in PROTOCOLS:
        raise FlowFileError(line_no, f"unknown protocol {proto!r}")
    sport_i = _parse_int(sport, line_no, "src_port")
    dport_i = _parse_int(dport, line_no, "dst_port")
    if not (0 <= sport_i <= 65535 and 0 <= dport_i <= 65535):
        raise FlowFileError(line_no, "port out of range")
    try:
        first_ts = float(ts)
    except ValueError:
        raise FlowFileError(line_no, f"first_ts is not a number: {ts!r}") from None
    if not math.isfinite(first_ts):
        raise FlowFileError(line_no, "first_ts is not finite")
    parts = lengths.split()
    if not parts:
        raise FlowFileError(line_no, "no packet lengths")
    lens = tuple(_parse_int(x, line_no, "packet length") for x in parts)
    if min(lens) < 1:
        raise FlowFileError(line_no, "packet lengths must be positive")
    return Flow(FlowKey(src, dst, sport_i, dport_i, proto), first_ts, lens)


def _data_lines(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield line_no, line


def _write_lines(path: str | Path, lines: Iterable[str], header: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        for line in lines:
            fh.write(line + "\n")


def save_flow_file(flows: Iterable[Flow], path: str | Path, header: Sequence[str] = ()) -> None:
    _write_lines(path, (_format_flow(f) for f in flows), header)


def load_flow_file(path: str | Path) -> list[Flow]:
    flows = []
    for line_no, line in _data_lines(path):
        fields = line.split(",")
        if len(fields) != 7:
            raise FlowFileError(line_no, f"expected 7 comma-separated fields, got {len(fields)}")
        flows.append(_parse_flow(fields, line_no))
    return flows


def save_labeled_flows(flows: Sequence[Flow], labels: Sequence[int], path: str | Path,
                       header: Sequence[str] = ()) -> None:
    if len(flows) != len(labels):
        raise ValueError("flows and labels differ in length")
    _write_lines(path, (f"{_format_flow(f)},{int(y)}" for f, y in zip(flows, labels)), header)


def load_labeled_flows(path: str | Path) -> tuple[list[Flow], list[int]]:
    flows, labels = [], []
    for line_no, line in _data_lines(path):
        fields = line.split(",")
        if len(fields) != 8:
            raise FlowFileError(line_no, f"expected 8 comma-separated fields, got {len(fields)}")
        label = _parse_int(fields[7], line_no, "label")
        if label not in (0, 1):
            raise FlowFileError(line_no, f"label must be 0 or 1, got {label}")
        flows.append(_parse_flow(fields[:7], line_no))
        labels.append(label)
    return flows, labels


def load_packet_file(path: str | Path) -> list[PacketRecord]:
    """Read ``src_ip,dst_ip,src_port,dst_port,proto,timestamp,length`` records."""
    packets = []
    for line_no, line in _data_lines(path):
        fields = line.split(",")
        if len(fields) != 7:
            raise FlowFileError(line_no, f"expected 7 comma-separated fields, got {len(fields)}")
        src, dst, sport, dport, proto, ts, length = fields
        try:
            timestamp = float(ts)
        except ValueError:
            raise FlowFileError(line_no, f"timestamp is not a number: {ts!r}") from None
        rec = PacketRecord(src, dst, _parse_int(sport, line_no, "src_port"),
                           _parse_int(dport, line_no, "dst_port"), proto, timestamp,
                           _parse_int(length, line_no, "length"))
        try:
            _check_packet(0, rec)
        except ValueError as exc:
            raise FlowFileError(line_no, str(exc).split(": ", 1)[1]) from None
        packets.append(rec)
    return packets


def sample_ids(count: int) -> list[str]:
    """Row-index sample ids used by every file written from a flow file."""
    return [f"{i:06d}" for i in range(count)]

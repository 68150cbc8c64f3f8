import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisyflow.flows import (Flow, FlowFileError, FlowKey, PacketRecord, assemble_flows, load_flow_file,
                             load_labeled_flows, load_packet_file, sample_ids, save_flow_file,
                             save_labeled_flows, tokenize, vocab_size)


def pkt(src="10.0.0.1", dst="10.0.0.2", sport=1000, dport=443, proto="TCP", ts=0.0, length=100):
    return PacketRecord(src, dst, sport, dport, proto, ts, length)


def test_same_five_tuple_forms_one_flow():
    flows = assemble_flows([pkt(ts=0.0, length=100), pkt(ts=1.0, length=200)])
    assert len(flows) == 1
    assert flows[0].lengths == (100, 200)


def test_directions_are_separate_flows():
    a_to_b = pkt(src="1.1.1.1", dst="2.2.2.2", sport=5, dport=6)
    b_to_a = pkt(src="2.2.2.2", dst="1.1.1.1", sport=6, dport=5, ts=0.5)
    assert len(assemble_flows([a_to_b, b_to_a])) == 2


def test_empty_input():
    assert assemble_flows([]) == []


def test_lengths_follow_timestamps_and_ties_keep_input_order():
    packets = [pkt(ts=2.0, length=30), pkt(ts=1.0, length=10), pkt(ts=2.0, length=40), pkt(ts=1.5, length=20)]
    (flow,) = assemble_flows(packets)
    assert flow.lengths == (10, 20, 30, 40)
    assert flow.first_ts == 1.0


def test_flows_ordered_by_first_timestamp():
    packets = [pkt(sport=1, ts=5.0), pkt(sport=2, ts=1.0), pkt(sport=3, ts=3.0)]
    assert [f.key.src_port for f in assemble_flows(packets)] == [2, 3, 1]


@pytest.mark.parametrize("bad, needle", [
    (dict(length=0), "length"),
    (dict(length=-4), "length"),
    (dict(ts=math.nan), "timestamp"),
    (dict(proto="ICMP"), "protocol"),
    (dict(sport=70000), "src_port"),
])
def test_malformed_record_names_its_index(bad, needle):
    packets = [pkt(), pkt(ts=1.0), pkt(**{"ts": 2.0, **bad})]
    with pytest.raises(ValueError, match=r"record 2.*" + needle):
        assemble_flows(packets)


packet_lists = st.lists(
    st.builds(pkt, sport=st.integers(1, 4), dport=st.integers(1, 3), ts=st.floats(0, 100),
              length=st.integers(1, 3000)),
    max_size=40)


@given(packet_lists)
@settings(max_examples=60, deadline=None)
def test_assembly_is_a_partition(packets):
    flows = assemble_flows(packets)
    assert sum(len(f.lengths) for f in flows) == len(packets)
    assert sorted(x for f in flows for x in f.lengths) == sorted(p.length for p in packets)
    assert len({f.key for f in flows}) == len(flows)
    assert [f.first_ts for f in flows] == sorted(f.first_ts for f in flows)


def _flow(lengths, ts=0.0):
    return Flow(FlowKey("a", "b", 1, 2, "UDP"), ts, tuple(lengths))


def test_tokenize_keeps_head_packets():
    seq = tokenize(_flow(range(1, 81)), n=50)
    assert seq.tokens == tuple(range(1, 51))
    assert seq.true_len == 50


def test_tokenize_pads_short_flows():
    seq = tokenize(_flow([1500, 60]), n=50)
    assert seq.tokens == (1500, 60) + (0,) * 48
    assert seq.true_len == 2


def test_tokenize_clamps_jumbo_lengths():
    assert tokenize(_flow([9000]), n=3, max_len=1500).tokens == (1500, 0, 0)
    assert vocab_size(1500) == 1501


@given(st.lists(st.integers(1, 20000), min_size=1, max_size=120), st.integers(1, 64))
@settings(max_examples=80, deadline=None)
def test_tokenize_shape_and_padding_law(lengths, n):
    seq = tokenize(_flow(lengths), n=n)
    assert seq.n == n
    assert seq.true_len == min(n, len(lengths))
    assert all(1 <= t <= 1500 for t in seq.tokens[:seq.true_len])
    assert all(t == 0 for t in seq.tokens[seq.true_len:])


def test_flow_file_round_trip(tmp_path):
    flows = [_flow([1, 2, 3], 0.1), _flow([1500], 1 / 3), Flow(FlowKey("x", "y", 0, 65535, "TCP"), 2.5, (7, 8))]
    path = tmp_path / "f.flows"
    save_flow_file(flows, path, header=["made by a test"])
    assert load_flow_file(path) == flows


def test_labeled_round_trip(tmp_path):
    flows = [_flow([5, 6]), _flow([7], 1.0)]
    path = tmp_path / "l.flows"
    save_labeled_flows(flows, [0, 1], path)
    assert load_labeled_flows(path) == (flows, [0, 1])


def test_empty_file_loads_empty(tmp_path):
    path = tmp_path / "empty.flows"
    path.write_text("")
    assert load_flow_file(path) == []


def test_malformed_line_is_reported(tmp_path):
    path = tmp_path / "bad.flows"
    path.write_text("a,b,1,2,TCP,0.0,10 20\n"
                    "a,b,1,2,TCP,0.0,10 twenty\n")
    with pytest.raises(FlowFileError) as err:
        load_flow_file(path)
    assert err.value.line_no == 2
    assert "packet length" in err.value.reason


def test_bad_label_rejected(tmp_path):
    path = tmp_path / "bad.flows"
    path.write_text("a,b,1,2,TCP,0.0,10,7\n")
    with pytest.raises(FlowFileError, match="line 1"):
        load_labeled_flows(path)


def test_packet_file(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("# capture\n1.1.1.1,2.2.2.2,1,2,TCP,0.5,100\n1.1.1.1,2.2.2.2,1,2,TCP,0.1,60\n")
    (flow,) = assemble_flows(load_packet_file(path))
    assert flow.lengths == (60, 100)
    path.write_text("1.1.1.1,2.2.2.2,1,2,TCP,0.5,0\n")
    with pytest.raises(FlowFileError, match="line 1"):
        load_packet_file(path)


def test_sample_ids_are_row_indices():
    assert sample_ids(3) == ["000000", "000001", "000002"]

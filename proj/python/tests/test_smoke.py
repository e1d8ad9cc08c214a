import struct

import pytest

import phub


def test_partition_never_spans_keys():
    spec = phub.build_model_spec([10, 3, 7])
    chunks = phub.partition_model(spec, 16)
    assert [(c.key_id, c.element_count) for c in chunks] == [(0, 4), (0, 4), (0, 2), (1, 3), (2, 4), (2, 3)]
    assert sum(c.byte_size for c in chunks) == spec.total_bytes


def test_invalid_chunk_size_raises():
    spec = phub.build_model_spec([8])
    with pytest.raises(phub.PhubError):
        phub.partition_model(spec, 6)


def test_wire_round_trip_and_header_layout():
    msg = phub.Message(phub.MsgType.PUSH_GRAD, worker_id=3, iteration=7, key_id=2, chunk_index=1,
                       payload=phub.floats_to_payload([1.0, -2.5]))
    frame = phub.encode_message(msg)
    assert len(frame) == phub.HEADER_BYTES + 8
    magic, version, mtype, wid, it, key, idx, plen = struct.unpack("<IBBHIIII", frame[:24])
    assert (magic, version, mtype, wid, it, key, idx, plen) == (0x50485542, 1, 3, 3, 7, 2, 1, 8)
    decoded, consumed = phub.decode_message(frame)
    assert consumed == len(frame)
    assert decoded == msg
    assert phub.payload_to_floats(decoded.payload) == [1.0, -2.5]
    assert phub.decode_message(frame[:10]) is None


def test_assignment_balances_bytes():
    spec = phub.build_model_spec([5, 4, 3, 3, 3])
    chunks = phub.partition_model(spec, 1024)
    a = phub.assign_chunks(chunks, cores=2)
    loads = sorted(l.byte_load for l in phub.load_report(a))
    assert loads == [32, 40]


def test_switch_sum_and_overflow():
    model = phub.SwitchModel()
    total = phub.switch_aggregate([[1, -2, 3], [4, 5, -6]], model)
    assert total == [5, 3, -3]
    with pytest.raises(phub.PhubError):
        phub.switch_aggregate([[model.acc_max()], [1]], model)
    q = phub.quantize([0.5, -0.25], model)
    assert phub.dequantize(q, model.scale) == [0.5, -0.25]


def test_hierarchical_traffic_is_smaller():
    flat, hier = phub.traffic_compare(racks=4, workers_per_rack=8, model_bytes=1 << 20)
    assert hier < flat


def test_experiment_matches_single_process_trainer():
    text = """
[server]
deploy = pbox
endpoints = 2
cores = 2
agg-mode = det
lr = 0.05
iters = 5
[workers]
count = 2
mode = logreg
seed = 3
samples = 64
dim = 8
"""
    result = phub.run_experiment(text, single_thread=True)
    assert result.passed(), [(c.name, c.detail) for c in result.checks if not c.passed]
    oracle = phub.train_single_process(3, 64, 8, 2, 0.05, 5)
    assert result.final_model == oracle.weights
    assert len(result.rows) == 5

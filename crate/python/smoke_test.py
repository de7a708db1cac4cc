"""Smoke test for the Python bindings.

Build first:  pip install --no-build-isolation ./crates/py
Then run:     python3 python/smoke_test.py
"""

import json
from pathlib import Path

import itflow

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = ROOT / "crates" / "core" / "tests" / "golden"


def check_converter():
    # 16x8 f32 tensor in 2x4 tiles, row-major, read back column-major.
    src = itflow.ITensorType([16, 8], [2, 4], [8, 2], [2, 4], [0, 1])
    dst = itflow.ITensorType([16, 8], [2, 4], [2, 8], [4, 2], [1, 0])
    spec = itflow.infer_converter(src, dst)
    itflow.verify_converter(src, dst, spec)
    # No loop is shared, so the whole tensor is buffered.
    assert spec.buf_shape == [16, 8] and spec.shared_loop_depth == 0
    rt = itflow.ITensorType.from_json(src.to_json())
    assert rt == src
    assert len(src.access_sequence()) == src.token_count() == 16
    print("converter", spec)


def check_pack():
    layout = itflow.pack([64, 64], [16, 16], kind="u8", bus_bits=512)
    assert layout.packed_shape == [4, 4, 16, 16]
    assert layout.vector_group == 64
    data = [i % 256 for i in range(64 * 64)]
    golden = (GOLDEN / "pack_u8_64x64_t16x16_bus512.bin").read_bytes()
    assert bytes(layout.pack_u8(data)) == golden
    print("pack", layout.packed_shape, "matches golden")


def check_sizing():
    assert itflow.max_tokens(5, 1, 5, 2, 5) == 3
    compiled = itflow.compile("demo")
    latency = compiled.verify()
    graph = json.loads(compiled.graph_json())
    trace = json.loads(itflow.simulate(itflow.size_fifos(json.dumps(graph), "conservative")))
    assert trace["outcome"] == "completed"
    print("demo", compiled.groups, "latency", latency, "conservative", trace["totalLatency"])


def check_transformer():
    compiled = itflow.compile("transformer")
    assert len(compiled.groups) == 1
    assert compiled.memory_ratio <= 0.25
    compiled.verify()
    print("transformer memory ratio %.3f" % compiled.memory_ratio)
    try:
        itflow.compile("demo", cmax=16)
    except ValueError as e:
        print("over budget:", str(e).splitlines()[0])
    else:
        raise AssertionError("tiny budget should fail")


if __name__ == "__main__":
    check_converter()
    check_pack()
    check_sizing()
    check_transformer()
    print("ok")

import struct
import zlib

import numpy as np
import pytest

import refeval
from bnnkit.convert import (
    ConvertOptions,
    convert_model,
    pack_conv_weight,
    parse_interchange,
)
from bnnkit.modelfile import (
    FORMAT_VERSION,
    MAGIC,
    ModelFormatError,
    deserialize_model,
    load_model,
    save_model,
    serialize_model,
)
from bnnkit.runtime import (
    Graph,
    GraphInput,
    Node,
    NodeAttrs,
    OpKind,
    PackedModel,
    PackedWeight,
)


def tiny_model():
    graph = Graph(
        nodes=(Node(OpKind.SIGN, "s", ("input",), "out"),),
        inputs=(GraphInput("input", (1, 1, 2, 2)),),
        initializers={},
        output="out",
    )
    return PackedModel(graph)


def rich_model(rng):
    """One node of every kind, float and packed weights, and an orphan initializer."""
    wv = rng.choice(np.array([-1.0, 1.0], np.float32), size=(4, 6, 3, 3))
    inits = {
        "conv.w": pack_conv_weight(wv, 16),
        "fconv.w": rng.standard_normal((6, 6, 1, 1)).astype(np.float32),
        "fconv.b": rng.standard_normal(6).astype(np.float32),
        "bn.g": rng.uniform(0.5, 1.5, 4).astype(np.float32),
        "bn.b": rng.standard_normal(4).astype(np.float32),
        "bn.mu": rng.standard_normal(4).astype(np.float32),
        "bn.var": rng.uniform(0.5, 1.5, 4).astype(np.float32),
        "ts.k": rng.integers(0, 2**32, 4, dtype=np.uint32).view(np.float32),
        "ts.i": rng.integers(0, 2, 4).astype(np.float32),
        "fc.w": rng.standard_normal((3, 4)).astype(np.float32),
        "orphan Δ": rng.standard_normal(2).astype(np.float32),
    }
    nodes = (
        Node(
            OpKind.FLOAT_CONV,
            "fconv",
            ("input",),
            "fconv.out",
            NodeAttrs(kernel=(1, 1), stride=(1, 1), padding=(0, 0)),
            ("fconv.w", "fconv.b"),
        ),
        Node(OpKind.SIGN, "sign", ("fconv.out",), "sign.out"),
        Node(
            OpKind.BINARY_CONV,
            "conv",
            ("sign.out",),
            "conv.out",
            NodeAttrs(kernel=(3, 3), stride=(1, 1), padding=(1, 1)),
            ("conv.w",),
        ),
        Node(
            OpKind.BATCH_NORM,
            "bn",
            ("conv.out",),
            "bn.out",
            NodeAttrs(epsilon=1e-4),
            ("bn.g", "bn.b", "bn.mu", "bn.var"),
        ),
        Node(OpKind.THRESHOLD_SIGN, "ts", ("bn.out",), "ts.out", weights=("ts.k", "ts.i")),
        Node(OpKind.RELU, "relu", ("ts.out",), "relu.out"),
        Node(
            OpKind.MAX_POOL,
            "mp",
            ("relu.out",),
            "mp.out",
            NodeAttrs(kernel=(2, 2), stride=(2, 2), padding=(0, 0)),
        ),
        Node(
            OpKind.AVG_POOL,
            "ap",
            ("mp.out",),
            "ap.out",
            NodeAttrs(kernel=(2, 2), stride=(1, 1), padding=(1, 1)),
        ),
        Node(OpKind.ADD, "add", ("ap.out", "ap.out"), "add.out"),
        Node(OpKind.GLOBAL_AVG_POOL, "gap", ("add.out",), "gap.out"),
        Node(OpKind.FLATTEN, "flat", ("gap.out",), "flat.out"),
        Node(OpKind.FULLY_CONNECTED, "fc", ("flat.out",), "out", weights=("fc.w",)),
    )
    graph = Graph(
        nodes=nodes,
        inputs=(GraphInput("input", (1, 6, 8, 8)),),
        initializers=inits,
        output="out",
    )
    return PackedModel(graph)


def assert_graphs_equal(a: Graph, b: Graph) -> None:
    assert a.nodes == b.nodes
    assert a.inputs == b.inputs
    assert a.output == b.output
    assert set(a.initializers) == set(b.initializers)
    for name, init in a.initializers.items():
        other = b.initializers[name]
        if isinstance(init, PackedWeight):
            assert init == other
        else:
            assert isinstance(other, np.ndarray)
            assert init.shape == other.shape
            assert init.tobytes() == other.tobytes()


class TestRoundTrip:
    def test_tiny(self):
        raw = serialize_model(tiny_model())
        model = deserialize_model(raw)
        assert serialize_model(model) == raw

    def test_every_op_kind(self, rng):
        original = rich_model(rng)
        raw = serialize_model(original)
        model = deserialize_model(raw)
        assert serialize_model(model) == raw
        assert_graphs_equal(original.graph, model.graph)

    def test_converted_model_with_fusion(self, rng):
        text = refeval.random_interchange_doc(
            np.random.default_rng(11), force_fusable=True
        )
        model, _ = convert_model(
            parse_interchange(text), ConvertOptions(c2=16, fuse_bn_sign=True)
        )
        raw = serialize_model(model)
        assert serialize_model(deserialize_model(raw)) == raw

    def test_serialization_is_deterministic(self, rng):
        model = rich_model(rng)
        assert serialize_model(model) == serialize_model(model)

    def test_save_load_files(self, tmp_path, rng):
        model = rich_model(rng)
        path = tmp_path / "model.dabn"
        save_model(model, path)
        loaded = load_model(path)
        assert_graphs_equal(model.graph, loaded.graph)
        save_model(loaded, tmp_path / "again.dabn")
        assert path.read_bytes() == (tmp_path / "again.dabn").read_bytes()

    def test_header_fields(self):
        raw = serialize_model(tiny_model())
        magic, version, graph_len, weight_len = struct.unpack_from("<4sIIQ", raw)
        assert magic == MAGIC
        assert version == FORMAT_VERSION
        assert len(raw) == 20 + graph_len + weight_len + 4


class TestCorruption:
    def test_bad_magic(self):
        raw = bytearray(serialize_model(tiny_model()))
        raw[:4] = b"NOPE"
        with pytest.raises(ModelFormatError, match="bad magic"):
            deserialize_model(bytes(raw))

    def test_unsupported_version(self):
        raw = bytearray(serialize_model(tiny_model()))
        raw[4:8] = struct.pack("<I", 2)
        with pytest.raises(ModelFormatError, match="unsupported version"):
            deserialize_model(bytes(raw))

    def test_checksum_mismatch(self):
        raw = bytearray(serialize_model(tiny_model()))
        raw[24] ^= 0xFF
        with pytest.raises(ModelFormatError, match="checksum mismatch"):
            deserialize_model(bytes(raw))

    def test_truncated(self):
        raw = serialize_model(tiny_model())
        with pytest.raises(ModelFormatError, match="truncated payload"):
            deserialize_model(raw[:-3])

    def test_trailing_bytes(self):
        raw = serialize_model(tiny_model())
        with pytest.raises(ModelFormatError, match="trailing bytes"):
            deserialize_model(raw + b"\x00")

    def test_unknown_op_code(self):
        raw = bytearray(serialize_model(tiny_model()))
        # first node record starts right after the header and the node count
        assert raw[24] == 0  # Sign op code
        raw[24] = 200
        body = bytes(raw[:-4])
        with pytest.raises(ModelFormatError, match="unknown op code 200"):
            deserialize_model(body + struct.pack("<I", zlib.crc32(body)))

    def test_errors_are_distinct(self):
        raw = serialize_model(tiny_model())
        seen = set()
        for mutate in ("magic", "version", "crc"):
            data = bytearray(raw)
            if mutate == "magic":
                data[:4] = b"XXXX"
            elif mutate == "version":
                data[4:8] = struct.pack("<I", 9)
            else:
                data[-1] ^= 0x01
            with pytest.raises(ModelFormatError) as err:
                deserialize_model(bytes(data))
            seen.add(str(err.value))
        assert len(seen) == 3

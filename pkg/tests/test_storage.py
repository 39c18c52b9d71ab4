import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shapereg.storage import (
    MAGIC,
    CsvLog,
    FormatError,
    decode_tensor,
    encode_tensor,
    load_generator,
    load_optimizer,
    load_params,
    read_csv,
    read_manifest,
    read_tensor,
    save_checkpoint,
    write_csv,
    write_tensor,
)

shapes = hnp.array_shapes(min_dims=0, max_dims=5, min_side=0, max_side=5)


class TestTensorFormat:
    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float32, shapes, elements=st.floats(width=32, allow_nan=True)))
    def test_float_roundtrip_bitwise(self, a):
        b = decode_tensor(encode_tensor(a))
        assert b.shape == a.shape and b.dtype == np.float32
        assert b.tobytes() == a.tobytes()

    @settings(max_examples=20, deadline=None)
    @given(hnp.arrays(np.uint8, shapes))
    def test_uint8_roundtrip(self, a):
        b = decode_tensor(encode_tensor(a))
        assert b.dtype == np.uint8 and np.array_equal(a, b)

    def test_header_layout(self):
        data = encode_tensor(np.zeros((2, 3), np.uint8))
        assert data[:4] == MAGIC
        assert struct.unpack_from("<BB2I", data, 4) == (1, 2, 2, 3)
        assert len(data) == 4 + 2 + 8 + 6

    def test_little_endian_payload(self):
        data = encode_tensor(np.array([1.0], np.float32))
        assert data[-4:] == struct.pack("<f", 1.0)

    def test_bad_magic(self):
        data = bytearray(encode_tensor(np.zeros(3, np.float32)))
        data[:4] = b"XXXX"
        with pytest.raises(FormatError, match="magic"):
            decode_tensor(bytes(data))

    def test_truncated(self):
        data = encode_tensor(np.zeros((4, 4), np.float32))
        with pytest.raises(FormatError, match="payload"):
            decode_tensor(data[:-1])
        with pytest.raises(FormatError, match="payload"):
            decode_tensor(data + b"\0")

    def test_unsupported_dtype(self):
        with pytest.raises(FormatError):
            encode_tensor(np.zeros(3, np.float64))

    def test_file(self, tmp_path):
        a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        write_tensor(tmp_path / "a.cmk", a)
        assert np.array_equal(read_tensor(tmp_path / "a.cmk"), a)


class TestCsv:
    def test_roundtrip(self, tmp_path):
        rows = [{"a": 1, "b": 0.1, "c": None, "d": "x"}, {"a": 2, "b": float("nan"), "c": 1e-300, "d": "y"}]
        write_csv(tmp_path / "r.csv", rows, ["a", "b", "c", "d"])
        back = read_csv(tmp_path / "r.csv")
        assert back[0] == rows[0]
        assert math.isnan(back[1]["b"]) and back[1]["c"] == 1e-300

    def test_float_repr_exact(self, tmp_path):
        x = 0.1 + 0.2
        write_csv(tmp_path / "r.csv", [{"v": x}], ["v"])
        assert read_csv(tmp_path / "r.csv")[0]["v"] == x

    def test_log_append(self, tmp_path):
        path = tmp_path / "log.csv"
        log = CsvLog(path, ["step", "loss"])
        log.write({"step": 0, "loss": 1.5})
        log.close()
        log = CsvLog(path, ["step", "loss"], append=True)
        log.write({"step": 1, "loss": 1.0})
        log.close()
        assert path.read_text() == "step,loss\n0,1.5\n1,1.0\n"


class TestCheckpoint:
    def model(self, seed=0):
        torch.manual_seed(seed)
        return torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Tanh(), torch.nn.Linear(4, 2))

    def trained(self):
        m = self.model()
        opt = torch.optim.Adam(m.parameters(), lr=1e-2)
        for _ in range(3):
            opt.zero_grad()
            m(torch.ones(5, 3)).pow(2).sum().backward()
            opt.step()
        return m, opt

    def test_params_roundtrip(self, tmp_path):
        m, opt = self.trained()
        m[2].bias.requires_grad_(False)
        save_checkpoint(tmp_path, m, opt, extra={"phase": 1})
        other = self.model(seed=5)
        manifest = load_params(tmp_path, other, apply_frozen=True)
        assert manifest["extra"]["phase"] == 1
        for a, b in zip(m.parameters(), other.parameters()):
            assert torch.equal(a, b)
        assert not other[2].bias.requires_grad and other[0].weight.requires_grad
        entry = next(e for e in manifest["params"] if e["name"] == "2.bias")
        assert entry["frozen"] and entry["dtype"] == "f32"

    def test_optimizer_resume_matches(self, tmp_path):
        m, opt = self.trained()
        save_checkpoint(tmp_path, m, opt)
        m2 = self.model(seed=9)
        load_params(tmp_path, m2)
        opt2 = torch.optim.Adam(m2.parameters(), lr=1e-2)
        load_optimizer(tmp_path, m2, opt2)
        for model, o in ((m, opt), (m2, opt2)):
            o.zero_grad()
            model(torch.ones(5, 3)).pow(2).sum().backward()
            o.step()
        for a, b in zip(m.parameters(), m2.parameters()):
            assert torch.equal(a, b)

    def test_generator_roundtrip(self, tmp_path):
        g = torch.Generator().manual_seed(3)
        torch.rand(7, generator=g)
        save_checkpoint(tmp_path, self.model(), generator=g)
        expected = torch.rand(4, generator=g)
        g2 = torch.Generator()
        load_generator(tmp_path, g2)
        assert torch.equal(torch.rand(4, generator=g2), expected)

    def test_byte_identical(self, tmp_path):
        m, opt = self.trained()
        save_checkpoint(tmp_path / "a", m, opt)
        save_checkpoint(tmp_path / "b", m, opt)
        for name in ("params.bin", "optimizer.bin", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_incompatible(self, tmp_path):
        save_checkpoint(tmp_path, self.model())
        wider = torch.nn.Sequential(torch.nn.Linear(3, 5), torch.nn.Tanh(), torch.nn.Linear(5, 2))
        with pytest.raises(FormatError, match="shape mismatch"):
            load_params(tmp_path, wider)
        deeper = torch.nn.Sequential(*self.model(), torch.nn.Linear(2, 2))
        with pytest.raises(FormatError, match="lacks"):
            load_params(tmp_path, deeper)

    def test_prefix_only(self, tmp_path):
        save_checkpoint(tmp_path, self.model(0))
        other = self.model(1)
        before = other[2].weight.detach().clone()
        load_params(tmp_path, other, prefix="0.")
        assert torch.equal(other[0].weight, self.model(0)[0].weight)
        assert torch.equal(other[2].weight, before)

    def test_missing_and_bad_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path)
        (tmp_path / "manifest.json").write_text('{"format": "other/9"}')
        with pytest.raises(FormatError):
            read_manifest(tmp_path)

import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ttedit import cache as cachefmt
from ttedit.backbone.base import TextEmbedding
from ttedit.cache import CacheFile, pack, read_cache, unpack, write_cache
from ttedit.diffusion import Trajectory
from ttedit.errors import (
    CacheChecksumError,
    CacheError,
    CacheMagicError,
    CacheTruncatedError,
    CacheVersionError,
)
from ttedit.ttis import FineTunedSchedule, InversionMode


def make_cache(steps=4, shape=(4, 3, 3), emb=(5, 6), seed=0):
    g = torch.Generator().manual_seed(seed)
    lat = lambda: [torch.randn(shape, generator=g) for _ in range(steps + 1)]
    tok = lambda: torch.randn(emb, generator=g)
    schedule = FineTunedSchedule(
        [TextEmbedding(tok()) for _ in range(steps)], [0.1 * s for s in range(steps)], [s % 3 for s in range(steps)],
        InversionMode.TARGET_TEXT, TextEmbedding(tok(), is_null=True),
    )
    return CacheFile(
        prompt="red circle", mode=InversionMode.TARGET_TEXT, sampler={"guidance_scale": 7.5, "steps": steps, "eta": 0.0},
        optimizer={"learning_rate": 0.001}, backbone={"kind": "toy", "digest": "abc"}, seed=seed,
        inversion=Trajectory(lat(), 1.0, "inversion"), initial=Trajectory(lat(), 7.5, "initial"), schedule=schedule,
        phi_cond=TextEmbedding(tok()), image=np.arange(27, dtype=np.uint8).reshape(3, 3, 3), extra={"note": "x"},
    )


def assert_same(a: CacheFile, b: CacheFile):
    assert a.prompt == b.prompt and a.mode == b.mode and a.seed == b.seed
    assert a.sampler == b.sampler and a.optimizer == b.optimizer and a.backbone == b.backbone and a.extra == b.extra
    assert torch.equal(a.inversion.stacked(), b.inversion.stacked())
    assert torch.equal(a.initial.stacked(), b.initial.stacked())
    assert a.inversion.guidance_scale == b.inversion.guidance_scale
    for x, y in zip(a.schedule.embeddings, b.schedule.embeddings):
        assert torch.equal(x.tokens, y.tokens)
    assert torch.equal(a.schedule.fixed.tokens, b.schedule.fixed.tokens)
    assert a.schedule.iterations_used == b.schedule.iterations_used
    assert np.array_equal(np.float32(a.schedule.per_step_loss), np.float32(b.schedule.per_step_loss))
    assert torch.equal(a.phi_cond.tokens, b.phi_cond.tokens)
    assert np.array_equal(a.image, b.image)


class TestRoundTrip:
    def test_file_round_trip(self, tmp_path):
        c = make_cache()
        path = write_cache(c, tmp_path / "x.brtc")
        back = read_cache(path)
        assert_same(c, back)
        assert back.to_bytes() == c.to_bytes()
        assert not list(tmp_path.glob("*.tmp"))

    @given(st.dictionaries(st.text(min_size=1, max_size=8),
                           hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=4),
                                      elements=st.floats(width=32, allow_nan=False)),
                           max_size=4))
    @settings(max_examples=40, deadline=None)
    def test_pack_round_trip(self, arrays):
        kind, meta, back = unpack(pack("test", {"k": 1}, arrays))
        assert kind == "test" and meta == {"k": 1}
        assert list(back) == list(arrays)
        for name, a in arrays.items():
            assert back[name].shape == a.shape
            assert np.array_equal(back[name].view(np.uint32), a.astype("<f4").view(np.uint32))

    def test_wrong_kind(self):
        with pytest.raises(CacheError):
            unpack(pack("toy-weights", {}, {}), "inversion")


class TestCorruption:
    """Each corruption class maps to its own error type and code."""

    @pytest.fixture
    def blob(self):
        return make_cache().to_bytes()

    def test_bad_magic(self, blob):
        with pytest.raises(CacheMagicError) as e:
            CacheFile.from_bytes(b"XXXX" + blob[4:])
        assert e.value.code == "bad-magic"

    def test_bad_version(self, blob):
        with pytest.raises(CacheVersionError) as e:
            CacheFile.from_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
        assert e.value.code == "bad-version"
        assert "99" in str(e.value)

    def test_flipped_payload_byte(self, blob):
        data = bytearray(blob)
        data[-20] ^= 0x01
        with pytest.raises(CacheChecksumError) as e:
            CacheFile.from_bytes(bytes(data))
        assert type(e.value) is CacheChecksumError and e.value.code == "bad-checksum"

    @pytest.mark.parametrize("cut", [6, 10, 40, -100, -1])
    def test_truncated(self, blob, cut):
        with pytest.raises(CacheTruncatedError) as e:
            CacheFile.from_bytes(blob[:cut])
        assert e.value.code == "truncated"

    def test_codes_distinct(self):
        codes = {c.code for c in (CacheMagicError, CacheVersionError, CacheChecksumError, CacheTruncatedError)}
        assert len(codes) == 4
        assert all(c.exit_code == 2 for c in (CacheMagicError, CacheVersionError, CacheChecksumError))

    def test_trailing_bytes(self, blob):
        with pytest.raises(CacheError):
            CacheFile.from_bytes(blob + b"\0")

    def test_garbled_header(self, blob):
        (n,) = struct.unpack("<I", blob[8:12])
        data = blob[:12] + b"{" * n + blob[12 + n:]
        with pytest.raises(CacheError):
            CacheFile.from_bytes(data)


def test_cache_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("TTEDIT_CACHE_DIR", str(tmp_path))
    assert cachefmt.cache_dir() == tmp_path

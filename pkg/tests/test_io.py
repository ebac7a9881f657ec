import json
import struct

import numpy as np
import pytest

from duolift.corpus import FILES, corpus_digest, generate_corpus, load_corpus, read_manifest
from duolift.volio import load_volume, save_volume


def test_float_volume_round_trip_bit_exact(tmp_path):
    data = np.random.default_rng(0).random((4, 8, 12)).astype(np.float32)
    save_volume(tmp_path / "v.dlv", data, (0.5, 1.0, 2.5))
    back, spacing = load_volume(tmp_path / "v.dlv")
    assert back.dtype == np.float32
    assert back.tobytes() == data.tobytes()
    assert spacing == (0.5, 1.0, 2.5)


def test_mask_round_trip_and_header_layout(tmp_path):
    mask = (np.random.default_rng(1).random((4, 4, 8)) > 0.5).astype(np.uint8)
    path = save_volume(tmp_path / "m.dlv", mask)
    raw = path.read_bytes()
    assert raw[:6] == b"DLVOL1"
    assert raw[6] == 2
    assert struct.unpack_from("<3I", raw, 7) == (4, 4, 8)
    assert struct.unpack_from("<3d", raw, 19) == (1.0, 1.0, 1.0)
    assert len(raw) == 43 + mask.size
    back, _ = load_volume(path)
    np.testing.assert_array_equal(back, mask)


def test_float_voxels_are_little_endian_depth_major(tmp_path):
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4) / 100
    raw = save_volume(tmp_path / "v.dlv", data).read_bytes()
    vox = struct.unpack_from("<24f", raw, 43)
    assert vox[1] == data[0, 0, 1] and vox[4] == data[0, 1, 0] and vox[12] == data[1, 0, 0]


def test_bad_files_rejected(tmp_path):
    (tmp_path / "bad.dlv").write_bytes(b"NOTVOL" + bytes(60))
    with pytest.raises(ValueError, match="magic"):
        load_volume(tmp_path / "bad.dlv")
    path = save_volume(tmp_path / "t.dlv", np.zeros((4, 4, 4), np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError, match="voxel bytes"):
        load_volume(path)


def test_corpus_layout_and_recount(tmp_path):
    m = generate_corpus(tmp_path / "c", 4, (32, 32, 32), seed=3)
    dirs = [p for p in (tmp_path / "c").iterdir() if p.is_dir()]
    assert len(m["samples"]) == len(dirs) == 4
    for rec in read_manifest(tmp_path / "c")["samples"]:
        for name in FILES:
            assert (tmp_path / "c" / rec[name]).exists()
    s = load_corpus(tmp_path / "c")[0]
    assert s.volume.shape == (32, 32, 32) and s.frontal.shape == (32, 32) and s.lateral.shape == (32, 32)


def test_corpus_is_deterministic(tmp_path):
    generate_corpus(tmp_path / "a", 2, (16, 16, 16), seed=9)
    generate_corpus(tmp_path / "b", 2, (16, 16, 16), seed=9)
    assert corpus_digest(tmp_path / "a") == corpus_digest(tmp_path / "b")
    generate_corpus(tmp_path / "c", 2, (16, 16, 16), seed=10)
    assert corpus_digest(tmp_path / "a") != corpus_digest(tmp_path / "c")
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 9

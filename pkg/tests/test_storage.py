import struct

import numpy as np
import pytest

from guidelab.errors import (
    ArchitectureMismatchError,
    BadMagicError,
    GuidelabError,
    TruncatedCheckpointError,
    VersionError,
)
from guidelab.net import default_widths, net_init, param_list
from guidelab.storage import (
    MAGIC,
    CheckpointMeta,
    LOSS_HEADER,
    emit_scatter_svg,
    load_checkpoint,
    read_csv,
    read_points,
    save_checkpoint,
    write_csv,
    write_points,
)
from guidelab.streams import RngStream


@pytest.fixture
def net():
    return net_init(default_widths((32, 16)), 2, seed=0)


def test_round_trip_exact_at_32_bit(net, tmp_path):
    path = tmp_path / "net.ckpt"
    meta = CheckpointMeta(step=123, seed=7, p_train=0.1)
    save_checkpoint(net, meta, path)
    loaded, meta2 = load_checkpoint(path)
    assert loaded.widths == net.widths
    assert loaded.num_classes == net.num_classes
    assert loaded.dropout_sites == net.dropout_sites
    assert loaded.sigma_data == net.sigma_data
    assert (meta2.step, meta2.seed, meta2.p_train) == (123, 7, 0.1)
    for a, b in zip(param_list(loaded), param_list(net)):
        assert np.array_equal(a, b.astype(np.float32).astype(float))


def test_save_is_byte_deterministic(net, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(net, CheckpointMeta(), a)
    save_checkpoint(net, CheckpointMeta(), b)
    assert a.read_bytes() == b.read_bytes()


def test_double_round_trip_is_stable(net, tmp_path):
    # after the first 64->32 bit cast the values are exactly representable
    p1 = tmp_path / "1.ckpt"
    p2 = tmp_path / "2.ckpt"
    save_checkpoint(net, CheckpointMeta(), p1)
    first, _ = load_checkpoint(p1)
    save_checkpoint(first, CheckpointMeta(), p2)
    assert p1.read_bytes() == p2.read_bytes()
    second, _ = load_checkpoint(p2)
    for a, b in zip(param_list(first), param_list(second)):
        assert np.array_equal(a, b)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(BadMagicError):
        load_checkpoint(path)


def test_bad_version(net, tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(net, CheckpointMeta(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_truncated_file(net, tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(net, CheckpointMeta(), path)
    raw = path.read_bytes()
    for cut in (2, 9, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises((BadMagicError, TruncatedCheckpointError)):
            load_checkpoint(path)


def test_inconsistent_blob_length(net, tmp_path):
    path = tmp_path / "b.ckpt"
    save_checkpoint(net, CheckpointMeta(), path)
    raw = bytearray(path.read_bytes())
    # shrink the declared blob length by one value and drop the matching bytes,
    # so the read succeeds but the count disagrees with the architecture
    n = sum(p.size for p in param_list(net))
    off = len(raw) - 4 * n - 8
    assert struct.unpack_from("<Q", raw, off)[0] == n
    struct.pack_into("<Q", raw, off, n - 1)
    path.write_bytes(bytes(raw[:-4]))
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(path)


def test_num_classes_mismatch(net, tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(net, CheckpointMeta(), path)
    with pytest.raises(ArchitectureMismatchError):
        load_checkpoint(path, expect_num_classes=5)
    load_checkpoint(path, expect_num_classes=2)


def test_csv_round_trip(tmp_path):
    path = tmp_path / "loss.csv"
    rows = [(0, 1.5, 0.001), (1, 0.1 + 0.2, 0.0009)]
    write_csv(path, LOSS_HEADER, rows)
    header, back = read_csv(path)
    assert tuple(header) == LOSS_HEADER
    # repr round-trips floats exactly through the text form
    assert float(back[1][1]) == 0.1 + 0.2


def test_csv_malformed_row_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n3\n")
    with pytest.raises(GuidelabError, match="3"):
        read_csv(path)
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(GuidelabError, match="empty"):
        read_csv(tmp_path / "empty.csv")


def test_points_round_trip(tmp_path):
    pts = RngStream(0, "p").gaussian(20).reshape(10, 2)
    labels = np.arange(10) % 2
    path = tmp_path / "points.csv"
    write_points(path, pts, labels)
    back, back_labels = read_points(path)
    assert np.array_equal(back, pts)
    assert np.array_equal(back_labels, labels)


def test_points_reject_wrong_header(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("a,b,c\n1,2,0\n")
    with pytest.raises(GuidelabError):
        read_points(path)


def test_svg_byte_deterministic(tmp_path):
    pts = RngStream(1, "p").gaussian(400).reshape(200, 2)
    panels = [("panel a", pts, None), ("panel b", pts * 0.5, np.arange(200) % 2)]
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    bbox = ((-3.0, -3.0), (3.0, 3.0))
    emit_scatter_svg(panels, a, bbox)
    emit_scatter_svg(panels, b, bbox)
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert text.startswith("<svg")
    assert text.count("<circle") <= 400


def test_svg_limits(tmp_path):
    pts = np.zeros((2, 2))
    with pytest.raises(GuidelabError):
        emit_scatter_svg([("p", pts, None)] * 9, tmp_path / "x.svg", ((-1, -1), (1, 1)))
    with pytest.raises(GuidelabError):
        emit_scatter_svg([("p", pts, None)], tmp_path / "x.svg", ((1, -1), (1, 1)))


def test_svg_clips_out_of_bbox_points(tmp_path):
    pts = np.array([[0.0, 0.0], [99.0, 99.0]])
    path = tmp_path / "c.svg"
    emit_scatter_svg([("p", pts, None)], path, ((-1.0, -1.0), (1.0, 1.0)))
    assert path.read_text().count("<circle") == 1

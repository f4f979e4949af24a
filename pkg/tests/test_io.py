import numpy as np
import pytest

from amil.checkpoint import load_model, read_tensors, save_model, write_tensors
from amil.errors import CheckpointError, ContractError, IngestionError
from amil.imageio import read_image, read_ppm, write_image, write_ppm
from amil.model import AmilModel


@pytest.fixture
def pixels():
    return np.random.default_rng(0).integers(0, 256, size=(7, 11, 3), dtype=np.uint8)


@pytest.mark.parametrize("ext", [".ppm", ".png"])
def test_image_round_trip(tmp_path, pixels, ext):
    path = tmp_path / f"x{ext}"
    write_image(path, pixels)
    np.testing.assert_array_equal(read_image(path), pixels)


def test_ppm_header_with_comment(tmp_path, pixels):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# made by hand\n11 7\n255\n" + pixels.tobytes())
    np.testing.assert_array_equal(read_ppm(path), pixels)


@pytest.mark.parametrize(
    "blob",
    [b"P3\n1 1\n255\n0 0 0", b"P6\n2 2\n65535\n" + bytes(24), b"P6\n2 2\n255\n" + bytes(5), b"P6\n2"],
)
def test_bad_ppm(tmp_path, blob):
    path = tmp_path / "bad.ppm"
    path.write_bytes(blob)
    with pytest.raises(IngestionError):
        read_ppm(path)


def test_unknown_extension(tmp_path, pixels):
    with pytest.raises(ContractError):
        write_image(tmp_path / "x.gif", pixels)
    (tmp_path / "y.bmp").write_bytes(b"")
    with pytest.raises(IngestionError):
        read_image(tmp_path / "y.bmp")


def test_ppm_bytes_are_canonical(tmp_path, pixels):
    write_ppm(tmp_path / "a.ppm", pixels)
    assert (tmp_path / "a.ppm").read_bytes() == b"P6\n11 7\n255\n" + pixels.tobytes()


# ----------------------------------------------------------------------------
# checkpoints


def test_model_round_trip_bit_exact(tmp_path):
    model = AmilModel.init(3, pooling_mode="max")
    extra = {"opt.m0": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save_model(tmp_path / "ck", model, extra=extra, meta={"epoch": 4})
    loaded, other, meta = load_model(tmp_path / "ck")
    assert loaded.pooling_mode == "max" and loaded.patch_size == 28
    assert meta["epoch"] == "4"
    for (n, a), (m, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n == m
        assert a.data.dtype == b.data.dtype == np.float32
        assert a.data.tobytes() == b.data.tobytes()
    np.testing.assert_array_equal(other["opt.m0"], extra["opt.m0"])


def test_manifest_layout(tmp_path):
    write_tensors(tmp_path / "t", {"a": np.ones((2, 3)), "b": np.zeros(4)}, {"k": "v"})
    lines = (tmp_path / "t.manifest").read_text().splitlines()
    assert lines == ["amil-checkpoint 1", "meta k v", "tensor a 2x3 0", "tensor b 4 24"]
    assert (tmp_path / "t.bin").stat().st_size == 40


def test_truncated_payload(tmp_path):
    save_model(tmp_path / "ck", AmilModel.init(0))
    data = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "ck.bin").write_bytes(data[:-4])
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "ck")


def test_trailing_bytes(tmp_path):
    write_tensors(tmp_path / "t", {"a": np.ones(2)})
    with open(tmp_path / "t.bin", "ab") as fh:
        fh.write(b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "t")


def test_bad_magic_and_lines(tmp_path):
    write_tensors(tmp_path / "t", {"a": np.ones(2)})
    text = (tmp_path / "t.manifest").read_text()
    (tmp_path / "t.manifest").write_text(text.replace("amil-checkpoint 1", "other"))
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "t")
    (tmp_path / "t.manifest").write_text(text + "garbage\n")
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "t")


def test_missing_tensor_and_shape_mismatch(tmp_path):
    model = AmilModel.init(0)
    tensors = {n: p.data for n, p in model.named_parameters()}
    del tensors["head.bias"]
    write_tensors(tmp_path / "a", tensors, model.config())
    with pytest.raises(CheckpointError, match="head.bias"):
        load_model(tmp_path / "a")
    write_tensors(tmp_path / "b", {n: p.data for n, p in model.named_parameters()}, {**model.config(), "patch_size": 32})
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "b")


def test_missing_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "nothing")

"""Extraction behavior: geometry, determinism, channel cap, error paths."""

import numpy as np
import pytest

from featex import (
    DataError,
    ExtractorSpec,
    LayerRangeError,
    MissingWeightsError,
    UnknownModelError,
    extract,
    init_weights,
    list_layers,
    read_mha,
    write_mha,
)
from featex.cli import main

_SPACING = (2.0, 1.5, 2.5)
_ORIGIN = (-10.0, 5.25, 0.5)


@pytest.fixture(scope="module")
def scalar_image(tmp_path_factory):
    rng = np.random.default_rng(12)
    arr = rng.normal(size=(24, 20, 18)).astype(np.float32) * 300.0 + 40.0
    path = str(tmp_path_factory.mktemp("img") / "scan.mha")
    write_mha(path, arr, spacing=_SPACING, origin=_ORIGIN)
    return path


def test_default_spec_matches_input_geometry(scalar_image, weights_dir, tmp_path):
    out = str(tmp_path / "feat.mha")
    summary = extract(scalar_image, ExtractorSpec(), out, weights_dir=weights_dir)
    assert summary["channels"] == 32
    assert summary["resampled"] is True
    vol = read_mha(out)
    assert vol.channels == 32
    assert vol.dims == (18, 20, 24)
    assert vol.spacing == _SPACING
    assert vol.origin == _ORIGIN
    assert np.array_equal(vol.direction, np.eye(3))
    assert np.isfinite(vol.data).all()


# interior = beyond the receptive-field halo of the volume border; at the
# 8x-downsampled layer 7 that halo spans ~20 input voxels per side.
@pytest.mark.parametrize("layer,size,margin", [(2, 16, 3), (7, 64, 22)])
def test_constant_input_is_flat_per_channel(weights_dir, tmp_path, layer, size, margin):
    img = str(tmp_path / "flat.mha")
    write_mha(img, np.full((size,) * 3, 37.0, dtype=np.float32), spacing=(1.0, 1.0, 1.0))
    out = str(tmp_path / f"flat_feat_{layer}.mha")
    extract(img, ExtractorSpec(layer_index=layer), out, weights_dir=weights_dir)
    data = read_mha(out).data
    interior = data[margin:-margin, margin:-margin, margin:-margin, :]
    mean = interior.mean(axis=(0, 1, 2))
    std = interior.std(axis=(0, 1, 2))
    cv = std / np.maximum(np.abs(mean), 1e-12)
    assert (cv < 0.1).all()


def test_repeat_extraction_is_bit_identical(scalar_image, weights_dir, tmp_path):
    spec = ExtractorSpec(layer_index=5, channel_cap=16)
    a = str(tmp_path / "a.mha")
    b = str(tmp_path / "b.mha")
    extract(scalar_image, spec, a, weights_dir=weights_dir)
    extract(scalar_image, spec, b, weights_dir=weights_dir)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_regenerated_weights_give_identical_features(scalar_image, weights_dir, tmp_path):
    fresh = str(tmp_path / "fresh_weights")
    init_weights("m730", weights_dir=fresh)
    spec = ExtractorSpec(layer_index=4, channel_cap=8)
    a = str(tmp_path / "a.mha")
    b = str(tmp_path / "b.mha")
    extract(scalar_image, spec, a, weights_dir=weights_dir)
    extract(scalar_image, spec, b, weights_dir=fresh)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_channel_cap_subsamples_uniformly(scalar_image, weights_dir, tmp_path):
    full_path = str(tmp_path / "full.mha")
    capped_path = str(tmp_path / "capped.mha")
    extract(scalar_image, ExtractorSpec(layer_index=7, channel_cap=1000),
            full_path, weights_dir=weights_dir)
    extract(scalar_image, ExtractorSpec(layer_index=7, channel_cap=8),
            capped_path, weights_dir=weights_dir)
    full = read_mha(full_path).data
    capped = read_mha(capped_path).data
    assert full.shape[3] == 64
    assert capped.shape[3] == 8
    expected = np.floor(np.linspace(0.0, 64.0, num=8, endpoint=False)).astype(int)
    for i, j in enumerate(expected):
        assert np.allclose(capped[..., i], full[..., j], atol=1e-6)


def test_native_grid_output(scalar_image, weights_dir, tmp_path):
    out = str(tmp_path / "native.mha")
    spec = ExtractorSpec(layer_index=3, channel_cap=1000, resample_to_input=False)
    summary = extract(scalar_image, spec, out, weights_dir=weights_dir)
    assert summary["resampled"] is False
    vol = read_mha(out)
    assert vol.dims == (9, 10, 12)
    assert vol.spacing == (4.0, 3.0, 5.0)
    assert vol.origin == _ORIGIN
    assert vol.channels == 32


def test_vit_native_patch_grid(scalar_image, weights_dir, tmp_path):
    out = str(tmp_path / "vit_native.mha")
    spec = ExtractorSpec(model_id="vit2d", layer_index=2, resample_to_input=False)
    extract(scalar_image, spec, out, weights_dir=weights_dir)
    vol = read_mha(out)
    # patches cover ceil(18/16) x ceil(20/16) positions per slice, z untouched
    assert vol.dims == (2, 2, 24)
    assert vol.spacing == (32.0, 24.0, 2.5)
    # native voxel 0 sits mid-patch: 7.5 input voxels into the volume
    assert vol.origin == (_ORIGIN[0] + 7.5 * 2.0, _ORIGIN[1] + 7.5 * 1.5, _ORIGIN[2])
    assert vol.channels == 32


def test_vit_resampled_matches_input_geometry(scalar_image, weights_dir, tmp_path):
    out = str(tmp_path / "vit.mha")
    spec = ExtractorSpec(model_id="vit2d", layer_index=3, channel_cap=16)
    extract(scalar_image, spec, out, weights_dir=weights_dir)
    vol = read_mha(out)
    assert vol.dims == (18, 20, 24)
    assert vol.spacing == _SPACING
    assert vol.origin == _ORIGIN
    assert vol.channels == 16
    assert np.isfinite(vol.data).all()


def test_missing_weights_error_names_the_fix(scalar_image, tmp_path):
    with pytest.raises(MissingWeightsError, match="init-weights"):
        extract(scalar_image, ExtractorSpec(), str(tmp_path / "out.mha"),
                weights_dir=str(tmp_path / "empty"))


def test_layer_out_of_range(scalar_image, weights_dir, tmp_path):
    with pytest.raises(LayerRangeError):
        extract(scalar_image, ExtractorSpec(layer_index=11),
                str(tmp_path / "out.mha"), weights_dir=weights_dir)
    with pytest.raises(LayerRangeError):
        ExtractorSpec(layer_index=0)


def test_unknown_model(scalar_image, weights_dir, tmp_path):
    with pytest.raises(UnknownModelError):
        extract(scalar_image, ExtractorSpec(model_id="resnet"),
                str(tmp_path / "out.mha"), weights_dir=weights_dir)


def test_multichannel_input_rejected(weights_dir, tmp_path):
    img = str(tmp_path / "two.mha")
    write_mha(img, np.zeros((4, 4, 4, 2), dtype=np.float32), spacing=(1.0, 1.0, 1.0))
    with pytest.raises(DataError, match="scalar"):
        extract(img, ExtractorSpec(), str(tmp_path / "out.mha"), weights_dir=weights_dir)


def test_layer_tables_enumerate_all_layers():
    rows = list_layers("m730")
    assert [r["index"] for r in rows] == list(range(1, 11))
    assert rows[6]["channels"] == 64
    assert rows[6]["downsample"] == (8, 8, 8)
    vit = list_layers("vit2d")
    assert [r["index"] for r in vit] == [1, 2, 3]
    assert all(r["downsample"] == (16, 16, 1) for r in vit)


# ---------------------------------------------------------------- CLI


def test_cli_round_trip(scalar_image, tmp_path, capsys):
    wdir = str(tmp_path / "weights")
    assert main(["init-weights", "--model", "m730", "--weights-dir", wdir]) == 0
    out = str(tmp_path / "feat.mha")
    rc = main([
        "extract", "--model", "m730", "--layer", "7", "--image", scalar_image,
        "--out", out, "--channel-cap", "32", "--weights-dir", wdir,
    ])
    captured = capsys.readouterr()
    assert rc == 0
    assert "wrote" in captured.out and "channels 32" in captured.out
    assert read_mha(out).channels == 32


def test_cli_list_layers(capsys):
    assert main(["list-layers", "--model", "m730"]) == 0
    out = capsys.readouterr().out
    assert "layer  7" in out and "downsample x8 y8 z8" in out


def test_cli_usage_errors(capsys):
    assert main([]) == 1
    assert main(["extract", "--image", "x.mha"]) == 1
    err = capsys.readouterr().err
    assert "--out" in err


def test_cli_runtime_errors(scalar_image, tmp_path, capsys):
    wdir = str(tmp_path / "weights")
    main(["init-weights", "--weights-dir", wdir])
    rc = main(["extract", "--model", "resnet", "--image", scalar_image,
               "--out", str(tmp_path / "o.mha"), "--weights-dir", wdir])
    assert rc == 2
    rc = main(["extract", "--image", str(tmp_path / "absent.mha"),
               "--out", str(tmp_path / "o.mha"), "--weights-dir", wdir])
    assert rc == 2
    assert "error:" in capsys.readouterr().err

import json
import os

import numpy as np
import pytest
from PIL import Image

from posekit_extractor import ModelLoadError
from posekit_extractor.backends import build_backend
from posekit_extractor.cli import main
from posekit_extractor.config import ExtractorConfig, load_config
from posekit_extractor.pipeline import (
    export_matches,
    letterbox_masked_crop,
    load_image_gray,
    run_extraction,
)


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    """Two synthetic frames of a textured square plus a bright blob."""
    root = tmp_path_factory.mktemp("imgs")
    rng = np.random.default_rng(0)
    texture = rng.uniform(120, 255, size=(60, 60)).astype(np.uint8)
    for i, (dx, dy) in enumerate([(0, 0), (12, 6)]):
        img = np.full((160, 200), 40, dtype=np.uint8)
        img[50 + dy : 110 + dy, 70 + dx : 130 + dx] = texture
        img[20:45, 20:50] = 200
        Image.fromarray(img).save(root / f"im{i}.png")
    return str(root)


@pytest.fixture(scope="module")
def cfg():
    return ExtractorConfig(grid_points_per_axis=8, crop_size=96, max_proposals=5)


@pytest.fixture(scope="module")
def bundle(image_dir, cfg, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("bundle"))
    return run_extraction(image_dir, out, cfg)


def test_manifest_passes_core_validation(bundle):
    from posekit import tensorio

    manifest = tensorio.load_manifest(bundle)
    assert len(manifest.views) == 2
    assert manifest.prompts[0].prompt_id == "prompt0"
    assert len(manifest.proposals) >= 1
    assert any(m.view_b is not None for m in manifest.matchsets)
    assert any(m.prompt_id is not None for m in manifest.matchsets)


def test_masks_are_binary_u8(bundle):
    from posekit import tensorio

    manifest = tensorio.load_manifest(bundle)
    for prop in manifest.proposals:
        mask = manifest.load_tensor(prop.mask_path)
        assert mask.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 1}
        x, y, w, h = prop.bbox_px
        view = manifest.view(prop.view_id)
        assert 0 <= x and 0 <= y and x + w <= view.image_size[0] and y + h <= view.image_size[1]


def test_embedding_width_constant_and_finite(bundle, cfg):
    from posekit import tensorio

    embedder = build_backend(cfg.embedder, cfg)
    manifest = tensorio.load_manifest(bundle)
    widths = set()
    for prop in manifest.proposals:
        emb = manifest.load_tensor(prop.embedding_path)
        widths.add(emb.shape[0])
        assert np.all(np.isfinite(emb))
        assert np.linalg.norm(emb) > 0
    assert widths == {embedder.token_width}


def test_embeddings_deterministic_across_runs(image_dir, cfg, tmp_path):
    p1 = run_extraction(image_dir, str(tmp_path / "a"), cfg)
    p2 = run_extraction(image_dir, str(tmp_path / "b"), cfg)
    t1, t2 = os.path.dirname(p1), os.path.dirname(p2)
    names = sorted(os.listdir(os.path.join(t1, "tensors")))
    assert names == sorted(os.listdir(os.path.join(t2, "tensors")))
    for n in names:
        b1 = open(os.path.join(t1, "tensors", n), "rb").read()
        b2 = open(os.path.join(t2, "tensors", n), "rb").read()
        assert b1 == b2, n


def test_self_match_near_identity(image_dir, cfg):
    """Identical crops must match near the diagonal (median shift < 2 px)."""
    image = load_image_gray(os.path.join(image_dir, "im0.png"))
    crop, chain = letterbox_masked_crop(image, None, cfg.crop_size)
    matcher = build_backend(cfg.matcher, cfg)
    pa, pb, conf = export_matches(crop, chain, crop, chain, matcher)
    assert len(pa) >= 10
    disp = np.linalg.norm(pa - pb, axis=1)
    assert np.median(disp) < 2.0
    assert np.all((conf >= 0.0) & (conf <= 1.0))


def test_match_coordinates_inside_images(bundle):
    from posekit import tensorio

    manifest = tensorio.load_manifest(bundle)
    for ref in manifest.matchsets:
        pa, pb, conf, _ = manifest.matchset_arrays(ref)
        w_a, h_a = manifest.view(ref.view_a).image_size
        if len(pa):
            assert pa[:, 0].min() >= 0 and pa[:, 0].max() <= w_a
            assert pa[:, 1].min() >= 0 and pa[:, 1].max() <= h_a
        assert np.all((conf >= 0.0) & (conf <= 1.0))


def test_crop_chain_round_trip():
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(120, 180))
    mask = np.zeros((120, 180), dtype=np.uint8)
    mask[30:80, 50:140] = 1
    crop, chain = letterbox_masked_crop(image, mask, 96)
    assert crop.shape == (96, 96)
    pts = np.array([[chain.pad_x, chain.pad_y], [chain.pad_x + 10, chain.pad_y + 5]])
    full = chain.to_full(pts)
    back = np.stack(
        [(full[:, 0] - chain.origin_x) * chain.scale + chain.pad_x,
         (full[:, 1] - chain.origin_y) * chain.scale + chain.pad_y],
        axis=1,
    )
    assert np.allclose(back, pts)


def test_blank_image_still_yields_valid_manifest(cfg, tmp_path):
    from posekit import tensorio

    imgdir = tmp_path / "blank"
    imgdir.mkdir()
    for i in range(2):
        Image.fromarray(np.full((80, 100), 128, dtype=np.uint8)).save(imgdir / f"b{i}.png")
    manifest = run_extraction(str(imgdir), str(tmp_path / "out"), cfg)
    loaded = tensorio.load_manifest(manifest)
    assert len(loaded.views) == 2


def test_unknown_model_identifier(cfg):
    with pytest.raises(ModelLoadError):
        build_backend("hub:some/pretrained-checkpoint", cfg)


def test_config_yaml_round_trip(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("crop_size: 64\ngrid_points_per_axis: 4\nfuture_knob: 3\n")
    cfg = load_config(str(path))
    assert cfg.crop_size == 64
    assert cfg.grid_points_per_axis == 4
    assert cfg.extra == {"future_knob": 3}


def test_cli_end_to_end(image_dir, tmp_path, capsys):
    code = main(["--images", image_dir, "--out", str(tmp_path / "cli_out")])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert os.path.isfile(doc["manifest_path"])


def test_cli_missing_dir_exits_2(tmp_path, capsys):
    code = main(["--images", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 2

import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossview.imageio import decode_ppm, encode_ppm, write_ppm
from crossview.synthworld import (
    CLASS_NAMES,
    ImageSizeError,
    Landmark,
    MalformedManifestError,
    MissingAssetError,
    WorldField,
    WorldSpec,
    generate_dataset,
    generate_world_field,
    ground_depth_at,
    load_manifest,
    render_aerial,
    render_ground,
    render_pair,
)

W = WorldSpec()


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    return generate_dataset(W, 10, 2, 2, out, side=32)


def test_spec_validation():
    with pytest.raises(ValueError):
        WorldSpec(tile_meters=((18, 200.0), (16, 700.0), (14, 3200.0)))
    with pytest.raises(ValueError):
        WorldSpec(extent=20000.0)
    with pytest.raises(ValueError):
        WorldSpec(ground_depth=(400.0, 100.0))
    spec = WorldSpec(seed=5, ground_depth=(100.0, 400.0), landmarks=(Landmark(1000.0, 2000.0, 50.0, 6),))
    assert WorldSpec.from_text(spec.to_text()) == spec


def test_field_deterministic_and_balanced():
    f = generate_world_field(W)
    rng = np.random.default_rng(0)
    x, y = rng.uniform(0, W.extent, (2, 100_000))
    cls = f.classes(x, y)
    assert np.array_equal(cls, WorldField(WorldSpec()).classes(x, y))  # uncached rebuild
    freq = np.bincount(cls, minlength=8) / len(cls)
    assert freq.min() >= 0.02, freq


def test_ground_pixels_carry_class_signal():
    # a plain linear classifier on raw pixels must already separate the classes
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(5)
    m = W.margin
    pts = rng.uniform(m, W.extent - m, (4000, 2))
    x = np.stack([render_ground(W, a, b).reshape(-1) for a, b in pts]).astype(np.float32) / 255
    y = generate_world_field(W).classes(pts[:, 0], pts[:, 1])
    clf = LogisticRegression(max_iter=300).fit(x[:2000], y[:2000])
    assert clf.score(x[2000:], y[2000:]) >= 0.70


def test_field_spatially_coherent():
    f = generate_world_field(W)
    rng = np.random.default_rng(1)
    x, y = rng.uniform(10, W.extent - 10, (2, 100_000))
    theta = rng.uniform(0, 2 * np.pi, len(x))
    same = f.classes(x, y) == f.classes(x + np.cos(theta), y + np.sin(theta))
    assert same.mean() >= 0.99


def test_coast_band_adjacent_to_water():
    assert CLASS_NAMES[0] == "water" and CLASS_NAMES[1] == "coast"


def test_render_pair_deterministic():
    a = render_pair(W, (12000.0, 9000.0), 32)
    b = render_pair(W, (12000.0, 9000.0), 32)
    assert a.ground_image.tobytes() == b.ground_image.tobytes()
    for z in (18, 16, 14):
        assert a.aerial_tiles[z].tobytes() == b.aerial_tiles[z].tobytes()
        assert a.aerial_tiles[z].shape == (3, 32, 32)
    assert a.scene_class == int(generate_world_field(W).classes(np.array([12000.0]), np.array([9000.0]))[0])


def test_render_boundary_error():
    with pytest.raises(ValueError):
        render_pair(W, (100.0, 5000.0), 32)


def test_distant_classes_have_different_aerial_colour():
    f = generate_world_field(W)
    rng = np.random.default_rng(2)
    found = 0
    for _ in range(200):
        p = rng.uniform(3000, W.extent - 13000, 2)
        q = p + np.array([10000.0, 0.0])
        cp, cq = f.classes(p[:1], p[1:]), f.classes(q[:1], q[1:])
        if cp[0] == cq[0]:
            continue
        ta = render_aerial(W, *p, 18, 32).reshape(3, -1).mean(1)
        tb = render_aerial(W, *q, 18, 32).reshape(3, -1).mean(1)
        assert np.abs(ta - tb).max() > 1
        found += 1
        if found == 5:
            break
    assert found == 5


def test_zoom_pyramid_consistency():
    rng = np.random.default_rng(3)
    fine, coarse = [], []
    for _ in range(30):
        x, y = rng.uniform(W.margin, W.extent - W.margin, 2)
        for z_fine, z_coarse in ((18, 16), (16, 14)):
            a = render_aerial(W, x, y, z_fine, 64).astype(float)
            b = render_aerial(W, x, y, z_coarse, 64).astype(float)
            crop = b[:, 24:40, 24:40]
            down = a.reshape(3, 16, 4, 16, 4).mean(axis=(2, 4))
            fine.append(down.ravel())
            coarse.append(crop.ravel())
    r = np.corrcoef(np.concatenate(fine), np.concatenate(coarse))[0, 1]
    assert r > 0.5, r


def test_ground_differs_from_aerial():
    s = render_pair(W, (15000.0, 15000.0), 32)
    assert s.ground_image.tobytes() != s.aerial_tiles[18].tobytes()
    img = s.ground_image.astype(float)
    # sky band on top is brighter/bluer than the ground at the bottom
    assert img[2, :4].mean() > img[2, -4:].mean()


def test_ground_depth_range():
    spec = WorldSpec(ground_depth=(100.0, 400.0))
    rng = np.random.default_rng(4)
    d = [ground_depth_at(spec, *rng.uniform(2000, 30000, 2)) for _ in range(200)]
    assert min(d) >= 100 and max(d) <= 400 and np.std(d) > 50
    assert ground_depth_at(W, 5000.0, 5000.0) == 100.0
    assert render_ground(spec, 9000.0, 9000.0, 32).tobytes() == render_ground(spec, 9000.0, 9000.0, 32).tobytes()


# ---------------------------------------------------------------- datasets and manifests

def test_dataset_split_arithmetic(small_set):
    m = small_set
    assert len(m) == 10
    assert [len(m.split(s)) for s in ("train", "val", "test")] == [6, 2, 2]
    ids = [set(r.id for r in m.split(s)) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1]) and not (ids[1] & ids[2]) and not (ids[0] & ids[2])
    root = m.path.parent
    assert len(list((root / "ground").glob("*.ppm"))) == 10
    assert sum(len(list((root / f"aerial_z{z}").glob("*.ppm"))) for z in (18, 16, 14)) == 30
    assert m.path.read_text().splitlines()[0] == "id,x,y,class,split,ground,aerial_z18,aerial_z16,aerial_z14"


def test_dataset_bytes_deterministic(small_set, tmp_path):
    again = generate_dataset(W, 10, 2, 2, tmp_path, side=32)
    assert again.path.read_bytes() == small_set.path.read_bytes()
    for a, b in zip(again.records, small_set.records):
        assert a.ground.read_bytes() == b.ground.read_bytes()
        assert a.aerial[14].read_bytes() == b.aerial[14].read_bytes()


def test_dataset_preconditions(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(W, 2, 1, 2, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(W, 5, 1, 1, blocker / "sub")


def test_manifest_round_trip_and_blocklist(small_set):
    m = load_manifest(small_set.path)
    assert [r.id for r in m.records] == list(range(10))
    assert m.side == 32 and m.zooms == (18, 16, 14)
    classes = {r.scene_class for r in m.records}
    some = next(iter(classes))
    filtered = load_manifest(small_set.path, class_blocklist=[some])
    assert all(r.scene_class != some for r in filtered.records)


def copy_set(small_set, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(small_set.path.parent, dst)
    return dst / "manifest.csv"


def test_manifest_missing_asset_names_path(small_set, tmp_path):
    path = copy_set(small_set, tmp_path)
    victim = path.parent / "ground" / "000003.ppm"
    victim.unlink()
    with pytest.raises(MissingAssetError) as e:
        load_manifest(path)
    assert "000003.ppm" in str(e.value)
    with pytest.raises(MissingAssetError):
        load_manifest(tmp_path / "nope.csv")


def test_manifest_malformed(small_set, tmp_path):
    path = copy_set(small_set, tmp_path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:3] + [lines[3] + ",extra"] + lines[4:]) + "\n")
    with pytest.raises(MalformedManifestError):
        load_manifest(path)
    path.write_text("\n".join(lines[:2] + [lines[2].replace(",train,", ",holdout,").replace(",val,", ",holdout,").replace(",test,", ",holdout,")] + lines[3:]) + "\n")
    with pytest.raises(MalformedManifestError):
        load_manifest(path)
    path.write_text("a,b,c\n")
    with pytest.raises(MalformedManifestError):
        load_manifest(path)


def test_manifest_image_size_mismatch(small_set, tmp_path):
    path = copy_set(small_set, tmp_path)
    write_ppm(path.parent / "aerial_z16" / "000001.ppm", np.zeros((3, 16, 16), np.uint8))
    with pytest.raises(ImageSizeError):
        load_manifest(path)
    with pytest.raises(ImageSizeError):
        load_manifest(small_set.path, side=64)


def test_external_two_record_manifest_trains(tmp_path):
    from crossview.models import ArchSpec
    from crossview.trainer import TrainConfig, precompute_targets, pretrain_ground, train_crossview_single

    rng = np.random.default_rng(5)
    rows = ["id,x,y,class,split,ground,aerial_z18"]
    for i, split in enumerate(["train", "val"]):
        for kind in ("g", "a"):
            write_ppm(tmp_path / f"{kind}{i}.ppm", rng.integers(0, 256, (3, 16, 16), dtype=np.uint8))
        rows.append(f"{100 + i},{i}.5,2.0,{i},{split},g{i}.ppm,a{i}.ppm")
    (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
    m = load_manifest(tmp_path / "m.csv")
    assert m.zooms == (18,)
    arch = ArchSpec(input_side=16, conv_blocks=(4, 8), fc_hidden=16, feature_dim=8, class_count=2)
    cfg = TrainConfig(lr=0.01, epochs=2, batch_size=1, eval_every=1)
    f_g, _ = pretrain_ground(m, arch, cfg)
    f_a, log = train_crossview_single(m, precompute_targets(f_g, m), f_g, TrainConfig(lr=1e-3, epochs=2, batch_size=1, eval_every=1))
    assert np.isfinite(f_a.features(m.aerial_stack(m.records, 18))).all()
    assert len(log.losses) == 2


# ---------------------------------------------------------------- PPM

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 31))
def test_ppm_round_trip(h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, (3, h, w), dtype=np.uint8)
    assert decode_ppm(encode_ppm(img)).tobytes() == img.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.floats(1700, 30300), st.floats(1700, 30300))
def test_render_anywhere_valid(x, y):
    t = render_aerial(W, x, y, 14, 16)
    assert t.shape == (3, 16, 16) and t.dtype == np.uint8

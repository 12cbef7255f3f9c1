import shutil

import numpy as np
import pytest

from crossview.models import ArchSpec, MultiScaleNet, checkpoint_bytes, extract_ground
from crossview.synthworld import WorldSpec, generate_dataset, load_manifest
from crossview.trainer import (
    FeatureTable,
    TrainConfig,
    TrainingDiverged,
    precompute_targets,
    pretrain_ground,
    train_crossview_multi,
    train_crossview_single,
    validation_distance,
)

ARCH = ArchSpec(input_side=16, conv_blocks=(4, 8), fc_hidden=16, feature_dim=8, class_count=8)
FAST = dict(batch_size=8, eval_every=5)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    return generate_dataset(WorldSpec(seed=3), 60, 12, 8, tmp_path_factory.mktemp("tiny"), side=16)


@pytest.fixture(scope="module")
def f_g(tiny):
    net, _ = pretrain_ground(tiny, ARCH, TrainConfig(lr=0.01, epochs=2, **FAST))
    return net


@pytest.fixture(scope="module")
def targets(f_g, tiny):
    return precompute_targets(f_g, tiny)


def rewrite_manifest(src, dst, edit):
    shutil.copytree(src.path.parent, dst)
    path = dst / "manifest.csv"
    lines = path.read_text().splitlines()
    rows = [lines[0]] + [edit(l.split(",")) for l in lines[1:]]
    path.write_text("\n".join(",".join(r) if isinstance(r, list) else r for r in rows) + "\n")
    return load_manifest(path)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_single_class_collapse(tiny, tmp_path):
    def one_class(row):
        row[3] = "0"
        return row

    m = rewrite_manifest(tiny, tmp_path / "one", one_class)
    net, log = pretrain_ground(m, ARCH, TrainConfig(lr=0.05, epochs=3, **FAST))
    assert dict(log.accuracy)[log.best_step] == 1.0
    assert log.best_metric < 0.05


def test_pretrain_deterministic_and_selects_best(tiny):
    cfg = TrainConfig(lr=0.01, epochs=2, **FAST)
    a, log_a = pretrain_ground(tiny, ARCH, cfg)
    b, log_b = pretrain_ground(tiny, ARCH, cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert log_a.losses == log_b.losses
    assert log_a.best_metric == min(v for _, v in log_a.evals)
    assert a.mode == "eval"
    steps = [s for s, _ in log_a.evals]
    assert steps[0] == 0 and all(s % 5 == 0 for s in steps[1:-1])


def test_pretrain_rejects_bad_labels(tiny):
    with pytest.raises(ValueError):
        pretrain_ground(tiny, ArchSpec(input_side=16, conv_blocks=(4, 8), feature_dim=8, class_count=2),
                        TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        pretrain_ground(tiny, ArchSpec(input_side=16, conv_blocks=(4, 8), feature_dim=8), TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_lr_and_step(tiny):
    with pytest.raises(TrainingDiverged, match=r"lr=1e\+30"):
        pretrain_ground(tiny, ARCH, TrainConfig(lr=1e30, epochs=1, **FAST))


def test_targets_contract(f_g, tiny, targets, tmp_path):
    assert targets.features.shape == (len(tiny), 8)
    again = precompute_targets(f_g, tiny)
    assert again.features.tobytes() == targets.features.tobytes()
    r = tiny.records[7]
    single = extract_ground(f_g, tiny.ground(r)[None])[0]
    np.testing.assert_allclose(targets[r.id], single, rtol=1e-5, atol=1e-6)
    targets.save(tmp_path / "t.cvft")
    back = FeatureTable.load(tmp_path / "t.cvft")
    assert back.features.tobytes() == targets.features.tobytes()
    assert back.ids.tolist() == targets.ids.tolist()
    with pytest.raises(KeyError):
        targets.rows([99999])


def test_crossview_selects_best_and_freezes_ground(f_g, tiny, targets):
    before = checkpoint_bytes(f_g)
    f_a, log = train_crossview_single(tiny, targets, f_g, TrainConfig(lr=3e-4, epochs=3, **FAST))
    assert checkpoint_bytes(f_g) == before
    assert log.best_metric == min(v for _, v in log.evals)
    val = tiny.split("val")
    got = validation_distance(f_a.features(tiny.aerial_stack(val, 18)), targets.rows([r.id for r in val]))
    assert got == pytest.approx(log.best_metric, rel=1e-6)
    assert log.best_metric <= log.initial_metric


def test_crossview_identical_views_stay_at_zero(tiny, tmp_path):
    # aerial tile files replaced by the ground images: with the shared
    # initialisation the distance starts at zero and selection keeps it there
    def same(row):
        row[6] = row[5]
        return row

    m = rewrite_manifest(tiny, tmp_path / "same", same)
    net, _ = pretrain_ground(m, ARCH, TrainConfig(lr=0.01, epochs=1, **FAST))
    t = precompute_targets(net, m)
    f_a, log = train_crossview_single(m, t, net, TrainConfig(lr=1e-3, epochs=2, **FAST))
    assert log.initial_metric < 1e-5
    assert log.best_metric <= 0.1 * log.initial_metric + 1e-6


def test_crossview_null_optimizer(f_g, tiny, targets):
    n_train = len(tiny.split("train"))
    f_a, log = train_crossview_single(tiny, targets, f_g, TrainConfig(lr=0.0, epochs=3, batch_size=n_train, eval_every=1))
    losses = np.array([v for _, v in log.losses])
    np.testing.assert_allclose(losses, losses[0], rtol=1e-6)
    assert len({v for _, v in log.evals}) == 1
    assert f_a.params.equal(f_g.params)


def test_crossview_missing_zoom(f_g, tiny, targets):
    with pytest.raises(ValueError):
        train_crossview_single(tiny, targets, f_g, TrainConfig(target_zoom=17, epochs=1))


def test_multi_containment_and_training(f_g, tiny, targets):
    f_a, slog = train_crossview_single(tiny, targets, f_g, TrainConfig(lr=3e-4, epochs=2, **FAST))
    pinned, plog = train_crossview_multi(tiny, targets, f_a, TrainConfig(lr=0.0, epochs=1, **FAST),
                                         fusion_init="fine", train_subnets=False)
    assert plog.initial_metric == pytest.approx(slog.best_metric, rel=1e-5)
    net, log = train_crossview_multi(tiny, targets, f_a, TrainConfig(lr=3e-4, epochs=2, **FAST))
    assert isinstance(net, MultiScaleNet)
    for z in (18, 16, 14):
        assert not net.params[f"z{z}.conv1.weight"].data.tobytes() == f_a.params["conv1.weight"].data.tobytes()
    assert log.best_metric == min(v for _, v in log.evals)


def test_multi_fusion_only(f_g, tiny, targets):
    net, _ = train_crossview_multi(tiny, targets, f_g, TrainConfig(lr=3e-4, epochs=1, **FAST), train_subnets=False)
    for z in (18, 16, 14):
        assert net.params[f"z{z}.conv1.weight"].data.tobytes() == f_g.params["conv1.weight"].data.tobytes()


def test_multi_needs_three_zooms(f_g, tiny, targets, tmp_path):
    shutil.copytree(tiny.path.parent, tmp_path / "two")
    path = tmp_path / "two" / "manifest.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(",".join(l.split(",")[:8]) for l in lines) + "\n")
    m = load_manifest(path)
    with pytest.raises(ValueError):
        train_crossview_multi(m, targets, f_g, TrainConfig(epochs=1))


def test_log_csv_headers(f_g, tiny, targets, tmp_path):
    _, log = train_crossview_single(tiny, targets, f_g, TrainConfig(lr=3e-4, epochs=1, **FAST))
    log.write_csv(tmp_path)
    assert (tmp_path / "loss.csv").read_text().startswith("step,loss\n")
    assert (tmp_path / "val.csv").read_text().startswith("step,val_distance\n")

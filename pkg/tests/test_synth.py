import json

import numpy as np
import pytest
import torch

from geosim.dataset import CrossViewDataset
from geosim.errors import ConfigError
from geosim.harness.runs import emit_synthetic, raw_cosine_report
from geosim.numerics import load_tns
from geosim.synth import (SyntheticConfig, distortion_matrix, distortion_oracle, generate,
                          principal_angles)

SMALL = SyntheticConfig(n_ids=20, samples_per_id_per_view=3)


def test_generation_is_bit_deterministic():
    a_tr, a_te = generate(SMALL)
    b_tr, b_te = generate(SMALL)
    for a, b in ((a_tr, b_tr), (a_te, b_te)):
        assert torch.equal(a.patches, b.patches)
        assert a.ids == b.ids and a.views == b.views and a.records == b.records
    c_tr, _ = generate(SyntheticConfig(n_ids=20, samples_per_id_per_view=3, seed=1))
    assert not torch.equal(a_tr.patches, c_tr.patches)


def test_split_is_identity_disjoint_and_complete():
    tr, te = generate(SMALL)
    assert tr.id_set().isdisjoint(te.id_set())
    assert tr.id_set() | te.id_set() == set(range(20))
    for data in (tr, te):
        for pid in data.id_set():
            views = [v for i, v in zip(data.ids, data.views) if i == pid]
            assert views.count("A") == views.count("G") == 3


def test_geometry_and_cameras_by_view():
    tr, _ = generate(SMALL)
    for r, v in zip(tr.records, tr.views):
        if v == "A":
            assert r.altitude_m > 0 and r.camera_id in SMALL.aerial_cameras
        else:
            assert r.altitude_m <= 3.0 and r.camera_id in SMALL.ground_cameras


def test_aerial_bins_round_robin():
    tr, _ = generate(SyntheticConfig(n_ids=18, samples_per_id_per_view=9))
    cells = {b.cell for b, v in zip(tr.bins(SMALL.scheme), tr.views) if v == "A"}
    assert cells == {(a, g) for a in range(3) for g in range(3)}


def test_holdout_cell_only_at_test_time():
    cfg = SyntheticConfig(n_ids=20, samples_per_id_per_view=3, holdout_cell=(1, 1))
    tr, te = generate(cfg)
    aerial = lambda d: {b.cell for b, v in zip(d.bins(cfg.scheme), d.views) if v == "A"}
    assert (1, 1) not in aerial(tr)
    assert (1, 1) in aerial(te)


def test_zero_strength_zero_noise_duplicates():
    cfg = SyntheticConfig(n_ids=10, distortion_strength=0.0, noise_std=0.0)
    _, te = generate(cfg)
    rep = raw_cosine_report(te, cfg.scheme)
    assert rep.rank1 == 1.0


def test_zero_strength_near_perfect():
    cfg = SyntheticConfig(distortion_strength=0.0)
    rep = raw_cosine_report(generate(cfg)[1], cfg.scheme)
    assert rep.rank1 >= 0.99


def test_reference_strength_is_calibrated():
    cfg = SyntheticConfig(distortion_strength=2.0, distortion_rank=4, noise_std=0.1)
    rep = raw_cosine_report(generate(cfg)[1], cfg.scheme)
    assert rep.rank1 < 0.60


def test_raw_map_monotone_in_strength():
    means = []
    for s in (0.0, 0.5, 1.0, 2.0):
        maps = []
        for seed in range(5):
            cfg = SyntheticConfig(distortion_strength=s, seed=seed)
            maps.append(raw_cosine_report(generate(cfg)[1], cfg.scheme).map)
        means.append(np.mean(maps))
    assert all(a >= b for a, b in zip(means, means[1:])), means


def test_oracle_factors():
    cfg = SyntheticConfig()
    a, b = distortion_oracle(cfg), distortion_oracle(cfg)
    assert a.keys() == b.keys() and len(a) == 9
    for cell, (u, v) in a.items():
        assert np.array_equal(u, b[cell][0]) and np.array_equal(v, b[cell][1])
        assert u.shape == v.shape == (cfg.latent_dim, cfg.distortion_rank)
        assert np.linalg.svd(u, compute_uv=False).min() > 1e-8
        assert np.linalg.svd(v, compute_uv=False).min() > 1e-8
        assert np.allclose(principal_angles(u, u.copy()), 0.0, atol=1e-7)


def test_reference_strength_preserves_norm():
    # at s=2 every distorted plane is rotated by 90 degrees
    cfg = SyntheticConfig()
    for cell in distortion_oracle(cfg):
        m = distortion_matrix(cfg, cell)
        assert np.allclose(m.T @ m, np.eye(cfg.latent_dim), atol=1e-12)


def test_principal_angles_orthogonal_spaces():
    e = np.eye(4)
    assert np.allclose(principal_angles(e[:, :2], e[:, 2:]), np.pi / 2)


@pytest.mark.parametrize("bad", [dict(distortion_rank=1), dict(distortion_rank=9),
                                 dict(distortion_strength=-1.0), dict(noise_std=-0.1),
                                 dict(n_ids=3), dict(holdout_cell=(3, 0)), dict(n_cams=1)])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        SyntheticConfig(**bad)


def test_emit_round_trip(tmp_path):
    summary = emit_synthetic(SMALL, tmp_path)
    tr, _ = generate(SMALL)
    loaded = CrossViewDataset.load(tmp_path / "train")
    assert torch.equal(loaded.patches, tr.patches)
    assert loaded.ids == tr.ids and loaded.views == tr.views
    u = load_tns(tmp_path / "factors" / "U_1_2.tns")
    assert np.array_equal(u.numpy(), distortion_oracle(SMALL)[(1, 2)][0])
    doc = json.loads((tmp_path / "synthetic.json").read_text())
    assert doc["n_train"] == summary["n_train"] == len(tr)
    assert SyntheticConfig.from_dict(doc["config"]) == SMALL

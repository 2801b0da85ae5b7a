import numpy as np
import pytest

from violin_hpr.envelope import HARMONIC_WIDTH, K_RESIDUAL, FrameFeatures
from violin_hpr.eval import (conditioning_study, dump_envelopes, mse_report, mse_rows, read_xy_csv, silhouette,
                             tsne_embed, write_embedding_csv, write_mse_csv)
from violin_hpr.hpr import HarmonicFrame
from violin_hpr.models import ArchSpec, harmonic_valid_mask, train


def blobs(seed=0, k=3, per=40, dim=5, sep=10.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, sep, (k, dim))
    x = np.vstack([c + rng.normal(size=(per, dim)) for c in centers])
    return x, np.repeat(np.arange(k), per)


def test_mse_rows_by_note_order():
    h = np.zeros((4, 2))
    r = np.zeros((4, 3))
    rows = mse_rows("X", ["Pa", "Sa", "Pa", "Sa"], h, h + np.array([[1.0], [2.0], [1.0], [2.0]]), r, r)
    assert [(x.note, x.component) for x in rows] == [("Sa", "harmonic"), ("Sa", "residual"),
                                                     ("Pa", "harmonic"), ("Pa", "residual")]
    assert rows[0].mse == 4.0 and rows[2].mse == 1.0 and rows[1].mse == 0.0
    assert rows[0].n_frames == 2


def test_mse_csv(tmp_path):
    rows = mse_rows("INet", ["Sa"], np.zeros((1, 2)), np.ones((1, 2)), np.zeros((1, 1)), np.zeros((1, 1)))
    write_mse_csv(tmp_path / "m.csv", rows)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == ["architecture,note,component,mse,n_frames", "INet,Sa,harmonic,1,1", "INet,Sa,residual,0,1"]


def test_mse_report_normalized_space():
    rng = np.random.default_rng(0)
    f0 = np.full(40, 440.0)
    h = rng.normal(size=(40, HARMONIC_WIDTH))
    h[~harmonic_valid_mask(f0)] = 0
    r = rng.normal(size=(40, K_RESIDUAL))
    m = train(f0, h, r, ArchSpec(latent_dim=3, hidden=(8,), epochs=2), 0)
    rows = mse_report(m, f0, h, r, ["Sa"] * 40)
    assert len(rows) == 2 and all(np.isfinite(x.mse) for x in rows)
    with pytest.raises(ValueError):
        mse_report(m, f0[:0], h[:0], r[:0], [])


def test_silhouette_reference():
    # two points per cluster on a line, computed by hand
    x = np.array([[0.0], [1.0], [10.0], [11.0]])
    lab = [0, 0, 1, 1]
    # point 0: a=1, b=10.5 -> 0.9048; point 1: a=1, b=9.5 -> 0.8947
    expect = np.mean([1 - 1 / 10.5, 1 - 1 / 9.5, 1 - 1 / 9.5, 1 - 1 / 10.5])
    assert silhouette(x, lab) == pytest.approx(expect)
    with pytest.raises(ValueError):
        silhouette(x, [0, 0, 0, 0])


def test_silhouette_singleton_zero():
    assert silhouette(np.array([[0.0], [1.0], [5.0]]), [0, 0, 1]) == pytest.approx(
        np.mean([1 - 1 / 5, 1 - 1 / 4, 0]))


def test_tsne_separates_blobs_and_is_deterministic():
    x, lab = blobs()
    a = tsne_embed(x, perplexity=10)
    b = tsne_embed(x, perplexity=10)
    assert np.array_equal(a, b)
    assert a.shape == (120, 2)
    assert silhouette(a, lab) > 0.6


def test_tsne_kl_decreases_after_exaggeration():
    x, _ = blobs(1)
    res = tsne_embed(x, perplexity=10, n_iter=500, return_history=True)
    kl = np.array(res.kl_history)
    assert kl[-1] < kl[260]


def test_tsne_perplexity_calibration():
    from violin_hpr.eval import _conditional_p
    from scipy.spatial.distance import pdist, squareform
    x, _ = blobs(2)
    p = _conditional_p(squareform(pdist(x, "sqeuclidean")), 15.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-10)
    ent = -np.sum(np.where(p > 0, p * np.log2(np.maximum(p, 1e-300)), 0), axis=1)
    np.testing.assert_allclose(2 ** ent, 15.0, rtol=1e-3)


def test_tsne_too_few_points():
    with pytest.raises(ValueError):
        tsne_embed(np.zeros((20, 3)), perplexity=30)


def test_embedding_csv(tmp_path):
    write_embedding_csv(tmp_path / "e.csv", np.array([[0.5, -1.0]]), [3])
    assert (tmp_path / "e.csv").read_text().splitlines() == ["x,y,c", "0.5,-1,3"]


def test_dump_envelopes(tmp_path):
    c = np.zeros(HARMONIC_WIDTH)
    c[0] = -30.0
    ft = FrameFeatures("02_M_Sa_Sm_So", 7, 328.0, c, np.full(K_RESIDUAL, 0.0))
    ft.cc_r[0] = -80.0
    h = HarmonicFrame(328.0, np.array([328.0, 656.0]), np.array([-30.0, -40.0]), np.zeros(2))
    paths = dump_envelopes(tmp_path, "02_M_Sa_Sm_So", [ft], [h])
    assert sorted(p.name for p in paths) == ["02_M_Sa_Sm_So_f0007_harm.csv", "02_M_Sa_Sm_So_f0007_taeH.csv",
                                             "02_M_Sa_Sm_So_f0007_taeR.csv"]
    head, vals = read_xy_csv(tmp_path / "02_M_Sa_Sm_So_f0007_taeH.csv")
    assert head == ["f", "taeH"] and vals.shape == (1025, 2)
    np.testing.assert_allclose(vals[:, 1], -30.0)
    head, vals = read_xy_csv(tmp_path / "02_M_Sa_Sm_So_f0007_harm.csv")
    assert head == ["nF", "nM"]
    np.testing.assert_allclose(vals, [[328, -30], [656, -40]])


def test_conditioning_study_small():
    rng = np.random.default_rng(0)
    f0 = np.repeat([330.0, 495.0, 660.0], 40)
    labels = np.repeat([0, 7, 11], 40)
    h = rng.normal(size=(120, HARMONIC_WIDTH)) + labels[:, None] * 0.3
    h[~harmonic_valid_mask(f0)] = 0.0
    r = rng.normal(size=(120, K_RESIDUAL))
    rep = conditioning_study(f0, h, r, labels, ArchSpec(latent_dim=3, hidden=(8,), epochs=2), seed=1,
                             max_points=100, perplexity=10, tsne_iters=300)
    assert set(rep.embeddings) == {"unconditioned", "conditioned"}
    assert rep.embeddings["conditioned"].shape == (100, 2)
    assert rep.labels.shape == (100,)
    assert rep.residual_embedding.shape == (100, 2)
    assert -1 <= rep.residual_silhouette <= 1

import math

import numpy as np
import pytest
from scipy.signal import convolve2d

import refimpl
from bifuse import metrics as M
from bifuse.data import write_image
from bifuse.errors import DataError, ShapeError


def random_triples(count, size=16, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        yield rng.random((3, size, size))


# ---------------------------------------------------------------------------
# mutual information


def test_mi_bimodal_hand_case():
    """Half-0/half-1 image against itself: 1 bit per source, 2 total."""
    img = np.zeros((4, 4))
    img[:2] = 1.0
    assert M.mi_fusion(img, img, img) == pytest.approx(2.0, abs=1e-12)
    assert M.mutual_information(img, img) == pytest.approx(1.0, abs=1e-12)


def test_mi_constant_partner_is_zero():
    rng = np.random.default_rng(1)
    f = rng.random((8, 8))
    const = np.full((8, 8), 0.25)
    assert M.mutual_information(f, const) == pytest.approx(0.0, abs=1e-12)


def test_mi_symmetry():
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 8, 8))
    assert M.mutual_information(a, b) == pytest.approx(M.mutual_information(b, a), abs=1e-9)


# ---------------------------------------------------------------------------
# psnr


def test_psnr_identical_is_inf_marker():
    img = np.random.default_rng(3).random((8, 8))
    assert math.isinf(M.psnr(img, img))


def test_psnr_unit_mse_is_zero_db():
    assert M.psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_quarter_mse():
    val = M.psnr(np.zeros((4, 4)), np.full((4, 4), 0.5))
    assert val == pytest.approx(10.0 * math.log10(4.0), abs=1e-9)
    assert val == pytest.approx(6.0206, abs=1e-3)


# ---------------------------------------------------------------------------
# correlation


def test_cc_self_fusion_is_exactly_one():
    for triple in random_triples(5, seed=4):
        img = triple[0]
        assert M.cc_fusion(img, img, img) == 1.0


def test_cc_perfect_anticorrelation():
    img = np.random.default_rng(5).random((8, 8))
    assert M.cc_fusion(1.0 - img, img, img) == pytest.approx(-1.0, abs=1e-12)


def test_cc_undefined_markers():
    const = np.full((8, 8), 0.5)
    varied = np.random.default_rng(6).random((8, 8))
    assert math.isnan(M.cc_fusion(varied, const, const))
    # one defined partner keeps the metric defined
    assert M.cc_fusion(varied, const, varied) == 1.0


def test_cc_matches_scalar_oracle():
    for triple in random_triples(5, size=8, seed=7):
        f, a, b = triple
        assert M.cc_fusion(f, a, b) == pytest.approx(refimpl.cc_ref(f, a, b), abs=1e-9)


# ---------------------------------------------------------------------------
# vif


def test_vif_self_fusion_is_two():
    img = np.random.default_rng(8).random((16, 16))
    assert M.vif_fusion(img, img, img) == pytest.approx(2.0, abs=1e-8)


def test_vif_blurred_fused_term_below_one():
    rng = np.random.default_rng(9)
    sharp = rng.random((16, 16))
    blurred = convolve2d(sharp, np.ones((3, 3)) / 9.0, mode="same", boundary="symm")
    term = M._vif_pair(sharp * 255.0, blurred * 255.0)
    want = refimpl.vif_pair_ref(sharp * 255.0, blurred * 255.0)
    assert term < 1.0
    assert term == pytest.approx(want, abs=1e-9)


def test_vif_noise_lowers_score():
    rng = np.random.default_rng(10)
    yy, xx = np.mgrid[0:16, 0:16] / 16.0
    a = 0.5 + 0.3 * np.sin(2 * np.pi * 2 * xx) * np.cos(2 * np.pi * yy)
    b = np.clip(0.3 + 0.5 * (yy > 0.5) + 0.1 * rng.random((16, 16)), 0, 1)
    f = np.clip(0.5 * a + 0.5 * b, 0, 1)
    noisy = np.clip(f + rng.normal(0.0, 0.1, f.shape), 0, 1)
    assert M.vif_fusion(noisy, a, b) < M.vif_fusion(f, a, b)


def test_vif_small_image_warns_but_computes():
    rng = np.random.default_rng(11)
    f, a, b = rng.random((3, 4, 4))
    with pytest.warns(UserWarning, match="VIF scales"):
        value = M.vif_fusion(f, a, b)
    assert math.isfinite(value)


# ---------------------------------------------------------------------------
# qabf


def test_qabf_self_fusion_pinned_by_oracle():
    rng = np.random.default_rng(12)
    yy, xx = np.mgrid[0:16, 0:16] / 16.0
    texture = np.clip(0.4 + 0.3 * np.sin(2 * np.pi * 3 * xx) + 0.2 * rng.random((16, 16)), 0, 1)
    got = M.qabf(texture, texture, texture)
    want = refimpl.qabf_ref(texture, texture, texture)
    assert got == pytest.approx(want, abs=1e-9)
    assert 0.9 < got <= 1.0  # near the sigmoid-bounded maximum


def test_qabf_constant_fused_is_near_zero():
    rng = np.random.default_rng(13)
    a, b = rng.random((2, 16, 16))
    const = np.full((16, 16), 0.5)
    assert M.qabf(const, a, b) < 0.01


def test_qabf_source_swap_invariant():
    rng = np.random.default_rng(14)
    f, a, b = rng.random((3, 16, 16))
    assert M.qabf(f, a, b) == pytest.approx(M.qabf(f, b, a), abs=1e-12)


# ---------------------------------------------------------------------------
# qy


def test_qy_self_fusion_is_exactly_one():
    img = np.random.default_rng(15).random((16, 16))
    assert M.qy(img, img, img) == 1.0


def test_qy_max_branch_with_independent_noise():
    rng = np.random.default_rng(16)
    a = rng.random((16, 16))
    b = rng.random((16, 16))
    value = M.qy(a, a, b)
    assert value == pytest.approx(refimpl.qy_ref(a, a, b), abs=1e-9)
    assert value > 0.9  # max branch keeps the matching-source SSIM of 1


def test_qy_window_too_small_raises():
    with pytest.raises(ShapeError):
        M.qy(np.zeros((5, 5)), np.zeros((5, 5)), np.zeros((5, 5)))


# ---------------------------------------------------------------------------
# oracle equivalence sweep (the core metric contract)


@pytest.mark.parametrize("seed", [100, 101])
def test_all_metrics_match_oracles_on_random_triples(seed):
    for triple in random_triples(10, size=16, seed=seed):
        f, a, b = triple
        assert M.mi_fusion(f, a, b) == pytest.approx(
            refimpl.mi_ref(f, a) + refimpl.mi_ref(f, b), abs=1e-6
        )
        assert M.psnr_fusion(f, a, b) == pytest.approx(
            refimpl.psnr_fusion_ref(f, a, b), abs=1e-6
        )
        assert M.cc_fusion(f, a, b) == pytest.approx(refimpl.cc_ref(f, a, b), abs=1e-6)
        assert M.ssim_value(f, a) == pytest.approx(refimpl.ssim_ref(f, a), abs=1e-6)
        assert M.qy(f, a, b) == pytest.approx(refimpl.qy_ref(f, a, b), abs=1e-6)
        assert M.qabf(f, a, b) == pytest.approx(refimpl.qabf_ref(f, a, b), abs=1e-4)
        assert M.vif_fusion(f, a, b) == pytest.approx(
            refimpl.vif_fusion_ref(f, a, b), abs=1e-4
        )


def test_source_order_symmetry_all_metrics():
    rng = np.random.default_rng(17)
    f, a, b = rng.random((3, 16, 16))
    for name in M.METRIC_NAMES:
        fn = M._METRIC_FNS[name]
        assert fn(f, a, b) == pytest.approx(fn(f, b, a), abs=1e-9), name


def test_determinism_bit_identical_reports():
    rng = np.random.default_rng(18)
    f, a, b = rng.random((3, 16, 16))
    first = M.compute_fusion_metrics(f, a, b)
    second = M.compute_fusion_metrics(f, a, b)
    assert first == second


# ---------------------------------------------------------------------------
# dataset protocol


def _write_triple_dirs(root, images):
    for sub in ("fused", "a", "b"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for name, (f, a, b) in images.items():
        write_image(root / "fused" / f"{name}.png", f)
        write_image(root / "a" / f"{name}.png", a)
        write_image(root / "b" / f"{name}.png", b)


def test_evaluate_dataset_self_fusion(tmp_path):
    rng = np.random.default_rng(19)
    images = {f"s{i}": ((img := rng.random((16, 16))), img, img) for i in range(3)}
    _write_triple_dirs(tmp_path, images)
    with pytest.warns(UserWarning):
        report = M.evaluate_dataset(tmp_path / "fused", tmp_path / "a", tmp_path / "b")
    assert len(report.per_sample) == 3
    assert report.aggregate["cc"]["mean"] == pytest.approx(1.0, abs=1e-12)
    assert all(math.isinf(row["psnr"]) for row in report.per_sample)
    assert report.aggregate["psnr"]["excluded"] == 3
    assert math.isnan(report.aggregate["psnr"]["mean"])


def test_evaluate_dataset_empty_intersection(tmp_path):
    rng = np.random.default_rng(20)
    (tmp_path / "fused").mkdir()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    write_image(tmp_path / "fused" / "x.png", rng.random((8, 8)))
    write_image(tmp_path / "a" / "y.png", rng.random((8, 8)))
    write_image(tmp_path / "b" / "z.png", rng.random((8, 8)))
    with pytest.raises(DataError):
        M.evaluate_dataset(tmp_path / "fused", tmp_path / "a", tmp_path / "b")


def test_evaluate_dataset_aggregates_recompute(tmp_path):
    rng = np.random.default_rng(21)
    images = {
        f"s{i}": (rng.random((16, 16)), rng.random((16, 16)), rng.random((16, 16)))
        for i in range(5)
    }
    _write_triple_dirs(tmp_path, images)
    report = M.evaluate_dataset(tmp_path / "fused", tmp_path / "a", tmp_path / "b")
    assert len(report.per_sample) == 5
    for name in report.metrics:
        values = np.array([row[name] for row in report.per_sample])
        finite = values[np.isfinite(values)]
        assert report.aggregate[name]["mean"] == pytest.approx(float(np.mean(finite)), abs=1e-9)
        assert report.aggregate[name]["median"] == pytest.approx(
            float(np.median(finite)), abs=1e-9
        )


def test_report_text_format(tmp_path):
    rng = np.random.default_rng(22)
    images = {"only": (rng.random((16, 16)),) * 3}
    _write_triple_dirs(tmp_path, images)
    with pytest.warns(UserWarning):
        report = M.evaluate_dataset(tmp_path / "fused", tmp_path / "a", tmp_path / "b")
    text = report.to_text()
    header = text.splitlines()[0].split("\t")
    assert header == ["sample_id", *M.METRIC_NAMES]
    assert "inf" in text
    assert "# aggregate" in text


def test_skipped_samples_are_listed(tmp_path):
    rng = np.random.default_rng(23)
    images = {"both": (rng.random((16, 16)),) * 3}
    _write_triple_dirs(tmp_path, images)
    write_image(tmp_path / "a" / "lonely.png", rng.random((16, 16)))
    with pytest.warns(UserWarning):
        report = M.evaluate_dataset(tmp_path / "fused", tmp_path / "a", tmp_path / "b")
    assert report.skipped == ["lonely"]

import json
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from lfstego.errors import ContractError, UndefinedMetricError
from lfstego.imaging import null_image
from lfstego.metrics import MetricReport, ncc, psnr, residue, ssim, success_rate

from conftest import rand_image
from oracles import ncc_loop, psnr_loop, ssim_loop


def test_psnr_zero_db_at_max_difference():
    a = torch.zeros(3, 8, 8, dtype=torch.float64)
    b = torch.full((3, 8, 8), 255.0, dtype=torch.float64)
    assert psnr(a, b, max_value=255) == 0.0


def test_psnr_uniform_one_level():
    a = torch.full((3, 8, 8), 100.0, dtype=torch.float64)
    assert psnr(a, a + 1, max_value=255) == pytest.approx(48.1308, abs=1e-3)
    assert psnr(a / 255, (a + 1) / 255) == pytest.approx(48.1308, abs=1e-3)


def test_psnr_identical_is_inf():
    a = rand_image(0)
    assert psnr(a, a) == math.inf


def test_psnr_decreases_with_offset():
    a = torch.full((3, 8, 8), 0.2, dtype=torch.float64)
    vals = [psnr(a, a + off) for off in (0.001, 0.01, 0.05, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_shape_mismatch():
    with pytest.raises(ContractError):
        psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
    with pytest.raises(ContractError):
        ssim(torch.zeros(3, 4, 4), torch.zeros(3, 5, 4))


def test_ssim_identity():
    a = rand_image(1)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images():
    a = torch.full((3, 8, 8), 0.25, dtype=torch.float64)
    b = torch.full((3, 8, 8), 0.75, dtype=torch.float64)
    expect = (2 * 0.25 * 0.75 + 1e-4) / (0.25**2 + 0.75**2 + 1e-4)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-6)
    assert expect == pytest.approx(0.6001, abs=1e-4)
    zero, one = torch.zeros(3, 8, 8, dtype=torch.float64), torch.ones(3, 8, 8, dtype=torch.float64)
    assert ssim(zero, one) == pytest.approx(1e-4 / (1 + 1e-4), abs=1e-6)


def test_ssim_windowed_identity():
    a = rand_image(2, 16)
    assert ssim(a, a, windowed=True) == pytest.approx(1.0)
    assert ssim(a, 1 - a, windowed=True) < 0.5


def test_ncc_cases():
    s = rand_image(3)
    assert ncc(s, s) == pytest.approx(1.0, abs=1e-12)
    assert ncc(s, 2 * s) == pytest.approx(1.0, abs=1e-12)
    left = torch.zeros(3, 8, 8, dtype=torch.float64)
    right = torch.zeros(3, 8, 8, dtype=torch.float64)
    left[..., :4] = 0.7
    right[..., 4:] = 0.3
    assert ncc(left, right) == 0.0


def test_ncc_zero_norm_is_an_error():
    with pytest.raises(UndefinedMetricError):
        ncc(rand_image(4), null_image(16, torch.float64))


def test_success_rate():
    assert success_rate([0.96, 0.94]) == 0.5
    assert success_rate([0.95]) == 0.0
    s = rand_image(5)
    assert success_rate([ncc(s, s)] * 3) == 1.0
    with pytest.raises(ContractError):
        success_rate([])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_success_rate_monotone_in_threshold(values, t1, t2):
    lo, hi = sorted((t1, t2))
    assert success_rate(values, hi) <= success_rate(values, lo)


def test_residue():
    a = torch.full((3, 4, 4), 0.5, dtype=torch.float64)
    assert residue(a, a).abs().max() == 0
    assert torch.allclose(residue(a, a + 0.05), torch.full_like(a, 0.5))
    assert torch.allclose(residue(a, a - 0.2), torch.ones_like(a))
    assert torch.allclose(residue(a, a + 0.01, gain=20), torch.full_like(a, 0.2))


@pytest.mark.parametrize("seed", range(0, 100, 9))
def test_metrics_match_loop_oracles(seed):
    a, b = rand_image(seed), rand_image(seed + 1000)
    assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-9)
    assert ncc(a, b) == pytest.approx(ncc_loop(a, b), abs=1e-9)


def test_symmetry_and_scale_invariance():
    a, b = rand_image(6), rand_image(7)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert ncc(a, b) == pytest.approx(ncc(b, a), abs=1e-15)
    for k in (0.1, 3.0, 17.0):
        assert ncc(a, k * b) == pytest.approx(ncc(a, b), abs=1e-12)


def test_report_serialization(tmp_path):
    rep = MetricReport()
    rep.add("b", 30.0, 0.9, 0.97)
    rep.add("a", math.inf, 1.0, 0.5)
    agg = rep.aggregate()
    assert agg["sr"] == 0.5
    assert agg["mean_ncc"] == pytest.approx(0.735)
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,psnr_db,ssim,ncc,valid"
    assert lines[1].startswith("a,inf,")
    rep.to_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert [r["id"] for r in data["rows"]] == ["a", "b"]
    assert data["rows"][1]["valid"] is True
    with pytest.raises(ContractError):
        MetricReport().aggregate()

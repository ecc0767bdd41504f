import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from lorapatch.errors import ConfigError, ShapeError
from lorapatch.metrics import (
    DsrConfig,
    MetricRow,
    best_rows,
    build_report,
    dsr,
    dsr_from_distances,
    evaluate_pair,
    external_metric,
    fid,
    frechet_distance,
    l2_distance,
    save_contact_sheet,
    ssim,
)
from lorapatch.model_zoo import build_feature_extractor


def _img(seed, shape=(3, 32, 32)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g) * 2 - 1


def test_l2_identities():
    a = _img(0)
    assert l2_distance(a, a) == 0.0
    assert l2_distance(a, a + 0.1) == pytest.approx(0.01, rel=1e-5)
    with pytest.raises(ShapeError):
        l2_distance(a, a[:, :16])


def test_ssim_self_and_symmetry(faces32):
    a, b = faces32.images[0], faces32.images[1]
    assert abs(ssim(a, a) - 1.0) <= 1e-9
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9


def test_ssim_matches_skimage(faces32):
    a, b = faces32.images[2], faces32.images[3]
    ours = ssim(a, b)
    ref = np.mean([
        structural_similarity(((a[c] + 1) / 2).double().numpy(), ((b[c] + 1) / 2).double().numpy(),
                              data_range=1.0, gaussian_weights=True, sigma=1.5,
                              use_sample_covariance=False, full=True)[1][5:-5, 5:-5].mean()
        for c in range(3)
    ])
    assert ours == pytest.approx(ref, abs=1e-6)


def test_ssim_inverted_high_contrast():
    checker = ((torch.arange(32).view(-1, 1) // 4 + torch.arange(32) // 4) % 2).float() * 2 - 1
    a = checker.expand(3, 32, 32)
    # 1 - a on the [0, 1] scale is -a on the [-1, 1] scale
    assert ssim(a, -a) < 0.1


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeError):
        ssim(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8))


def test_dsr_two_thirds_exact():
    assert dsr_from_distances([0.01, 0.06, 0.20], 0.05) == 2 / 3
    desired = torch.zeros(3, 3, 16, 16)
    outputs = torch.stack([torch.full((3, 16, 16), v ** 0.5) for v in (0.01, 0.06, 0.20)])
    assert dsr(outputs, desired, DsrConfig(0.05)) == pytest.approx(2 / 3, abs=1e-12)


def test_dsr_zero_when_equal_and_empty_errors():
    x = torch.rand(4, 3, 16, 16)
    assert dsr(x, x) == 0.0
    with pytest.raises(ShapeError):
        dsr_from_distances([], 0.05)
    with pytest.raises(ConfigError):
        DsrConfig(0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=30), st.floats(1e-4, 1), st.floats(1e-4, 1))
def test_dsr_tau_monotone(distances, t1, t2):
    lo, hi = sorted((t1, t2))
    assert dsr_from_distances(distances, lo) >= dsr_from_distances(distances, hi)


def test_fid_self_zero_and_symmetric(faces32):
    enc = build_feature_extractor(out_dim=8, seed=3)
    s = faces32.images
    assert fid(s, s, enc).value <= 1e-4
    other = s.flip(-1) * 0.5
    assert abs(fid(s, other, enc).value - fid(other, s, enc).value) <= 1e-6


def test_frechet_distance_closed_form():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4000, 2))
    b = rng.normal(size=(4000, 2)) * 2 + 1
    # N(0, I) vs N(1, 4I): |mu|^2 = 2, trace term = 2 * (1 + 4 - 2*2) = 2
    assert frechet_distance(a, b).value == pytest.approx(4.0, rel=0.05)
    assert frechet_distance(a[:3], a[3:6]).undersampled


def test_fid_halves_smaller_than_noised():
    from lorapatch.dataio import synth_faces

    ds = synth_faces(64, 32, seed=2)
    enc = build_feature_extractor(out_dim=8, seed=3)
    x = ds.images
    g = torch.Generator().manual_seed(0)
    noised = (x + torch.randn(x.shape, generator=g) * 0.6).clamp(-1, 1)
    assert fid(x[:32], x[32:], enc).value < fid(x[:32], noised[32:], enc).value


def test_external_metric_hook():
    with pytest.raises(NotImplementedError):
        external_metric("brisque", torch.zeros(1, 3, 8, 8))


def test_metric_row_invariants():
    with pytest.raises(ConfigError):
        MetricRow("pgd", "none", "toy", "standard", l2=0.1, ssim=0.5, dsr=1.5)
    with pytest.raises(ConfigError):
        MetricRow("pgd", "none", "toy", "weird", l2=0.1, ssim=0.5, dsr=0.5)


def test_candidate_equals_desired_row(faces32):
    x = faces32.images
    row = evaluate_pair(x, x, "pgd", "none", "toy", "standard")
    assert row.l2 == 0 and row.dsr == 0 and abs(row.ssim - 1) < 1e-9


def _rows():
    return [
        MetricRow("pgd", "none", "toy", "standard", l2=0.31, ssim=0.42, dsr=1.0, n_images=8),
        MetricRow("pgd", "jpeg", "toy", "standard", l2=0.12, ssim=0.61, dsr=0.75, n_images=8),
        MetricRow("pgd", "patch", "toy", "standard", l2=0.004, ssim=0.97, dsr=0.0, n_images=8),
    ]


def test_report_best_and_deterministic(tmp_path):
    rep = build_report(_rows(), title="toy")
    assert [r.bypass for r in best_rows(rep, "dsr")] == ["patch"]
    assert "**0**" in rep.markdown
    assert build_report(_rows(), title="toy").markdown == rep.markdown
    assert rep.csv == build_report(_rows(), title="toy").csv
    csv_path, md_path = rep.write(tmp_path / "table")
    assert csv_path.read_text().count("\n") == 4 and md_path.exists()


def test_single_row_report():
    rep = build_report(_rows()[:1])
    body = [l for l in rep.markdown.splitlines() if l.startswith("| pgd")]
    assert len(body) == 1
    with pytest.raises(ConfigError):
        build_report([])


def test_contact_sheet(tmp_path, faces32):
    from PIL import Image

    x = faces32.images[:4]
    path = save_contact_sheet([x, -x, x], tmp_path / "grid.png", scale=1)
    with Image.open(path) as img:
        assert img.size == (3 * 32, 4 * 32)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossda.raster import BANDS, Domain
from crossda.synth import (
    DegradationSpec,
    degrade,
    make_benchmark,
    make_pair,
    make_source_scene,
)

BLUE = BANDS.index("BLUE")
NIR = BANDS.index("NIR")


def test_scene_is_deterministic():
    a, ma = make_source_scene(7)
    b, mb = make_source_scene(7)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(ma.labels, mb.labels)
    c, _ = make_source_scene(8)
    assert not np.array_equal(a.data, c.data)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_cloud_fraction_within_band(seed):
    _, mask = make_source_scene(seed, size=64)
    assert 0.2 <= mask.labels.mean() <= 0.6


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_clouds_are_bright_and_above_clear_nir(seed):
    image, mask = make_source_scene(seed, size=64)
    cloud = mask.labels.astype(bool)
    assert (image.data[:, cloud] >= 0.6).all()
    assert image.data[NIR][cloud].min() > np.percentile(image.data[NIR][~cloud], 99)


def test_scene_metadata():
    image, mask = make_source_scene(0, size=96)
    assert image.domain == Domain.LU_333M
    assert image.shape == mask.shape == (96, 96)
    assert set(np.unique(mask.labels)) <= {0, 1}


def test_scene_size_minimum():
    with pytest.raises(ValueError):
        make_source_scene(0, size=32)


def test_degrade_identity_spec():
    image, _ = make_source_scene(3, size=64)
    spec = DegradationSpec(blue_clip=2.0, noise_sigma=0.0, blur_sigma=0.0, gain=(1, 1, 1, 1), offset=(0, 0, 0, 0))
    out, q = degrade(image, spec)
    np.testing.assert_array_equal(out.data, image.data)
    assert not q.flags.any()
    assert out.domain == Domain.PV_333M


def test_degrade_clips_and_flags_blue():
    image, _ = make_source_scene(4, size=64)
    spec = DegradationSpec(noise_sigma=0.0, blur_sigma=0.0, gain=(1, 1, 1, 1), offset=(0, 0, 0, 0))
    out, q = degrade(image, spec)
    above = image.data[BLUE] >= spec.blue_clip
    assert above.any()
    assert (out.data[BLUE][above] == np.float32(spec.blue_clip)).all()
    np.testing.assert_array_equal(q.flags[BLUE], above)
    np.testing.assert_array_equal(out.data[BLUE][~above], image.data[BLUE][~above])
    # only BLUE is ever flagged
    assert not q.flags[1:].any()


def test_noise_sigma_statistics():
    sigma = 0.02
    spec = DegradationSpec(blue_clip=2.0, noise_sigma=sigma, blur_sigma=0.0, gain=(1, 1, 1, 1), offset=(0, 0, 0, 0), seed=11)
    image, _ = make_source_scene(5, size=512)
    out, _ = degrade(image, spec)
    d = (out.data.astype(np.float64) - image.data).ravel()
    assert d.size >= 10**6
    assert abs(d.std() - sigma) / sigma < 0.05


def test_degradation_spec_validation():
    with pytest.raises(ValueError):
        DegradationSpec(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        DegradationSpec(blur_sigma=-1)
    with pytest.raises(ValueError):
        DegradationSpec(blue_clip=0.0)
    with pytest.raises(ValueError):
        DegradationSpec(gain=(1.0, 1.0))


def test_pairs_are_deterministic_and_aligned():
    a = make_benchmark(3, size=64, seed=2)
    b = make_benchmark(3, size=64, seed=2)
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.target.data, pb.target.data)
        assert pa.source.shape == pa.target.shape == pa.labels.shape == pa.quality.shape
    assert a[0].source.name == "scene_0000"
    assert not np.array_equal(make_pair(0, 64, seed=3).source.data, a[0].source.data)


def test_target_blue_never_exceeds_clip():
    p = make_pair(1, 64)
    assert p.target.data[BLUE].max() <= np.float32(DegradationSpec().blue_clip)
    assert p.quality.flags[BLUE][p.labels.labels.astype(bool)].all()

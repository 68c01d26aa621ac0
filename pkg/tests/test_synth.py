import numpy as np
import pytest

from tubekit import tensor as T
from tubekit.dsu import bilinear_upsample2x
from tubekit.errors import ParameterError
from tubekit.synth import (
    TubeSpec,
    draw_tube,
    expected_ratio,
    generate_mask,
    pool2,
    render_and_degrade,
    spec_for_ratio,
    write_dataset,
)


def test_zero_tubes_empty():
    assert not generate_mask(TubeSpec(16, 16, tubes=0)).any()


def test_same_seed_identical():
    s = TubeSpec(40, 40, seed=17)
    assert np.array_equal(generate_mask(s), generate_mask(s))
    assert not np.array_equal(generate_mask(s), generate_mask(TubeSpec(40, 40, seed=18)))


def test_straight_tube_has_constant_width():
    m = np.zeros((20, 30), bool)
    draw_tube(m, "h", (9.3, 0.0, 0.0, 0.0), 0.0, 29.0, 3, 3)
    counts = m.sum(axis=0)
    assert np.all(counts[counts > 0] == 3) and counts.all()
    v = np.zeros((30, 20), bool)
    draw_tube(v, "v", (9.3, 0.0, 0.0, 0.0), 0.0, 29.0, 3, 3)
    assert np.array_equal(v, m.T)


@pytest.mark.parametrize("seed", range(10))
def test_tubes_are_4_connected(seed):
    from scipy import ndimage

    m = generate_mask(TubeSpec(48, 48, tubes=1, branch_prob=0.0, seed=seed))
    if m.any():
        assert ndimage.label(m)[1] == 1


def test_sigma_zero_target_equals_mask_and_pooling():
    m = generate_mask(TubeSpec(16, 16, seed=2))
    low, target = render_and_degrade(m, TubeSpec(16, 16, noise_sigma=0.0))
    assert np.array_equal(target, m.astype(float))
    assert low.shape == (8, 8)
    assert np.all(pool2(np.full((6, 4), 0.75)) == 0.75)


def test_degraded_input_loses_information():
    m = generate_mask(TubeSpec(32, 32, seed=4))
    low, target = render_and_degrade(m, TubeSpec(32, 32, noise_sigma=0.0))
    up = bilinear_upsample2x(T.Tape().constant(low[None, None])).value[0, 0]
    assert np.mean((up - target) ** 2) > 0


def test_spec_validation():
    for kw in (dict(height=1), dict(tubes=-1), dict(width_min=3, width_max=2), dict(branch_prob=2.0),
               dict(noise_sigma=-1.0)):
        with pytest.raises(ParameterError):
            TubeSpec(**kw)
    with pytest.raises(ParameterError):
        render_and_degrade(np.zeros((5, 4), bool), TubeSpec())


@pytest.mark.parametrize("target", [0.05, 0.1, 0.2])
def test_ratio_control_over_100_seeds(target):
    spec = spec_for_ratio(target, TubeSpec(64, 64))
    ratios = [generate_mask(TubeSpec(**{**spec.__dict__, "seed": s})).mean() for s in range(100)]
    assert abs(np.mean(ratios) / target - 1) <= 0.3
    assert abs(expected_ratio(spec) / target - 1) <= 0.3


def test_write_dataset(tmp_path):
    stems = write_dataset(tmp_path, TubeSpec(16, 16, seed=3), 3)
    assert stems == ["0000", "0001", "0002"]
    assert sorted(p.name for p in (tmp_path / "masks").iterdir()) == [f"{s}.png" for s in stems]
    assert (tmp_path / "manifest.txt").read_text().startswith("count = 3\n")

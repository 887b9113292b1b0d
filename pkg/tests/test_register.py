"""Registration cost and recovery tests."""

import numpy as np
import pytest

from stdreg.errors import DataError, EmptyForegroundError
from stdreg.phantom import PhantomSpec, generate_phantom_pair
from stdreg.pipeline import make_target
from stdreg.register import RegistrationConfig, register, ssd
from stdreg.scene import Scene, foreground_bounding_box
from stdreg.transform import AffineParams, cell_by_id, matrix, rmse_corners


@pytest.fixture(scope="module")
def phantom():
    spec = PhantomSpec(dims=(64, 64, 64), noise_sigma=6.0, bias_amplitude=0.0, seed=11)
    scene, _ = generate_phantom_pair(spec)
    return scene


class TestSsd:
    def test_equal_scenes_zero(self, phantom):
        assert ssd(phantom, phantom, AffineParams()) == 0.0

    def test_constant_difference_counts_mask(self):
        a = np.zeros((8, 8, 8), dtype=np.int32)
        a[2:6, 2:6, 2:6] = 10
        b = a.copy()
        b[b > 0] = 11
        source, target = Scene(values=a), Scene(values=b)
        n_mask = int((b > 0).sum())
        assert ssd(source, target, AffineParams()) == pytest.approx(n_mask)

    def test_truth_ssd_below_quantization_floor(self, phantom):
        cell = cell_by_id("r1t1s1h0")
        target = make_target(phantom, cell.params, phantom.values > 0)
        n_mask = int((target.values > 0).sum())
        value = ssd(phantom, target, cell.params)
        assert value <= n_mask  # per-voxel quantization error is at most 1

    def test_dims_mismatch_rejected(self, phantom):
        other = Scene(values=np.ones((8, 8, 8), dtype=np.int32))
        with pytest.raises(DataError):
            ssd(phantom, other, AffineParams())

    def test_out_of_domain_contributes_target_squared(self):
        a = np.zeros((8, 8, 8), dtype=np.int32)
        a[3:5, 3:5, 3:5] = 7
        scene = Scene(values=a)
        value = ssd(scene, scene, AffineParams(translation=(100, 0, 0)))
        assert value == pytest.approx(float((a.astype(float) ** 2).sum()))


class TestRegister:
    def test_self_registration_stays_identity(self, phantom):
        result = register(phantom, phantom)
        assert result.converged
        dev = np.abs(matrix(result.params, phantom.center()) - np.eye(4)).max()
        assert dev < 1e-3

    def test_medium_cell_recovery(self, phantom):
        cell = cell_by_id("r1t1s1h0")
        target = make_target(phantom, cell.params, phantom.values > 0)
        result = register(phantom, target)
        box = foreground_bounding_box(phantom)
        err = rmse_corners(cell.params, result.params, box, phantom.voxel_size, phantom.center())
        assert err < 1.0

    def test_warm_start_recovery(self, phantom):
        cell = cell_by_id("r2t2s1h0")
        target = make_target(phantom, cell.params, phantom.values > 0)
        config = RegistrationConfig(initial_params=cell.params, coarse_search_range=0.0)
        result = register(phantom, target, config)
        box = foreground_bounding_box(phantom)
        err = rmse_corners(cell.params, result.params, box, phantom.voxel_size, phantom.center())
        assert err < 0.1

    def test_deterministic_trace(self, phantom):
        cell = cell_by_id("r1t1s0h0")
        target = make_target(phantom, cell.params, phantom.values > 0)
        r1 = register(phantom, target)
        r2 = register(phantom, target)
        assert r1.per_level_trace == r2.per_level_trace
        assert r1.params == r2.params
        assert r1.final_ssd == r2.final_ssd

    def test_trace_non_increasing_within_levels(self, phantom):
        cell = cell_by_id("r1t1s1h0")
        target = make_target(phantom, cell.params, phantom.values > 0)
        result = register(phantom, target)
        by_level = {}
        for level, _, value in result.per_level_trace:
            by_level.setdefault(level, []).append(value)
        for level, values in by_level.items():
            assert all(b <= a for a, b in zip(values, values[1:])), level

    def test_empty_foreground_rejected(self, phantom):
        empty = Scene(values=np.zeros(phantom.dims, dtype=np.int32))
        with pytest.raises(EmptyForegroundError):
            register(phantom, empty)
        with pytest.raises(EmptyForegroundError):
            register(empty, phantom)

    def test_config_validation(self):
        with pytest.raises(DataError):
            RegistrationConfig(pyramid_levels=0)
        with pytest.raises(DataError):
            RegistrationConfig(max_iters=0)
        with pytest.raises(DataError):
            RegistrationConfig(convergence_tol=0.0)
        with pytest.raises(DataError):
            RegistrationConfig(coarse_search_range=-1.0)

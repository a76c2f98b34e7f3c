import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgmgan.envfile import environment_hash, load_environment, save_environment
from cgmgan.grid import RegionSpec, cell_centers
from cgmgan.radiosim import ChannelParams
from cgmgan.urbangen import (Building, PlacementError, UrbanParams, environment_from_buildings,
                             generate_environment, rasterize, rayleigh_cdf, sample_height)
from oracles import ks_statistic


class TestSampleHeight:
    def test_scale_at_known_quantile(self):
        u = 1 - math.exp(-0.5)
        assert sample_height(50, u) == pytest.approx(50, rel=1e-12)

    def test_small_u_gives_small_height(self):
        assert 0 < sample_height(50, 1e-12) < 1e-4

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.1, 1.5])
    def test_rejects_closed_interval(self, u):
        with pytest.raises(ValueError):
            sample_height(50, u)

    def test_clamps_to_max_height(self):
        assert sample_height(50, 1 - 1e-12, max_height=128) == 128

    def test_monte_carlo_mean(self):
        u = np.random.default_rng(3).random(100_000)
        h = np.array([sample_height(50, v) for v in u if v > 0])
        assert h.mean() == pytest.approx(50 * math.sqrt(math.pi / 2), rel=0.02)

    def test_distribution_matches_cdf(self):
        u = np.random.default_rng(4).random(100_000)
        h = [sample_height(50, v) for v in u]
        assert ks_statistic(h, lambda x: rayleigh_cdf(x, 50)) < 0.01

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-9, 1 - 1e-9), st.floats(1, 100))
    def test_inverse_of_cdf(self, u, gamma):
        assert float(rayleigh_cdf(sample_height(gamma, u), gamma)) == pytest.approx(u, abs=1e-9)


class TestRasterize:
    def test_empty(self, full_spec):
        assert not rasterize(full_spec, []).any()

    def test_block_cell_count(self, full_spec):
        # cells (1..4, 1..4) in plan, roof at 32 m covers layers 1..8 on a 4 m grid
        mask = rasterize(full_spec, [Building(0, 0, 32, 32, 32)])
        assert mask.sum() == 4 * 4 * 8
        assert mask[:4, :4, :8].all()

    def test_full_region(self, full_spec):
        assert rasterize(full_spec, [Building(0, 0, 256, 256, 128)]).all()

    def test_center_must_be_strictly_inside(self, full_spec):
        # footprint edge exactly through a center row excludes that row
        mask = rasterize(full_spec, [Building(0, 0, 12, 8, 10)])
        assert mask[:, :, 0].sum() == 1


class TestGenerateEnvironment:
    def test_count_mode_full_scale(self, full_spec):
        params = UrbanParams(alpha=0.5, beta=300, gamma_h=50, building_count=20, seed=11)
        a = generate_environment(full_spec, params)
        b = generate_environment(full_spec, params)
        assert len(a.buildings) == 20
        assert a.buildings == b.buildings
        assert np.array_equal(a.mask, b.mask)

    def test_zero_count(self, full_spec):
        env = generate_environment(full_spec, UrbanParams(building_count=0))
        assert env.buildings == ()
        assert not env.mask.any()

    def test_seed_sensitivity(self, full_spec):
        a = generate_environment(full_spec, UrbanParams(building_count=20, seed=1))
        b = generate_environment(full_spec, UrbanParams(building_count=20, seed=2))
        assert a.buildings != b.buildings

    @pytest.mark.parametrize("seed", range(8))
    def test_structural_invariants(self, full_spec, seed):
        env = generate_environment(full_spec, UrbanParams(seed=seed))
        spec = env.spec
        for i, b in enumerate(env.buildings):
            assert 0 <= b.x_min < b.x_max <= spec.length
            assert 0 <= b.y_min < b.y_max <= spec.width
            assert 0 < b.height <= spec.height
            # grid-snapped footprints
            for v, d in ((b.x_min, spec.dx), (b.x_max, spec.dx), (b.y_min, spec.dy), (b.y_max, spec.dy)):
                assert v / d == pytest.approx(round(v / d))
            for other in env.buildings[i + 1:]:
                assert not b.overlaps(other)
        assert np.array_equal(env.mask, rasterize(spec, env.buildings))
        assert abs(env.footprint_ratio - 0.5) <= 0.05

    def test_mask_definition_by_brute_force(self, small_env):
        centers = cell_centers(small_env.spec)
        for idx in np.ndindex(small_env.spec.shape):
            x, y, z = centers[idx]
            inside = any(b.x_min < x < b.x_max and b.y_min < y < b.y_max and z <= b.height
                         for b in small_env.buildings)
            assert small_env.mask[idx] == inside

    def test_crowded_region_fails(self):
        spec = RegionSpec(16, 16, 16, 1, 1, 1)
        with pytest.raises(PlacementError):
            generate_environment(spec, UrbanParams(building_count=200, min_side=4, max_side=4))

    @pytest.mark.parametrize("kwargs", [dict(alpha=0), dict(alpha=1), dict(beta=0), dict(gamma_h=-1),
                                        dict(building_count=-1), dict(min_side=3, max_side=2)])
    def test_param_validation(self, kwargs):
        with pytest.raises(ValueError):
            UrbanParams(**kwargs)


class TestEnvironmentFile:
    def test_round_trip(self, small_env, tmp_path):
        channel = ChannelParams(sigma_sh_los=3.5)
        digest = save_environment(tmp_path / "env.json", small_env, channel)
        env, block = load_environment(tmp_path / "env.json")
        assert env.buildings == small_env.buildings
        assert env.spec == small_env.spec and env.params == small_env.params
        assert env.shadow_seed == small_env.shadow_seed
        assert np.array_equal(env.mask, small_env.mask)
        assert ChannelParams.from_dict(block) == channel
        assert digest == environment_hash(env, channel)
        assert "mask" not in (tmp_path / "env.json").read_text()

    def test_hash_tracks_content(self, small_env):
        h = environment_hash(small_env, ChannelParams())
        assert h == environment_hash(small_env, ChannelParams())
        assert h != environment_hash(small_env, ChannelParams(k_db_los=-41))
        moved = environment_from_buildings(small_env.spec, small_env.params, small_env.buildings[1:])
        assert h != environment_hash(moved, ChannelParams())

    def test_rejects_foreign_documents(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_environment(tmp_path / "x.json")
        (tmp_path / "y.json").write_text("{not json")
        with pytest.raises(ValueError):
            load_environment(tmp_path / "y.json")

    def test_explicit_buildings_validated(self, desk_spec):
        params = UrbanParams()
        with pytest.raises(ValueError):
            environment_from_buildings(desk_spec, params, [Building(0, 0, 16, 16, 10),
                                                           Building(8, 8, 24, 24, 10)])
        with pytest.raises(ValueError):
            environment_from_buildings(desk_spec, params, [Building(120, 0, 136, 8, 10)])

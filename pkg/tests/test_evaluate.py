import json

import numpy as np
import pytest

from cgmgan.cgan import GanModel, Hyper, Normalizer, save_checkpoint, train
from cgmgan.dataset import build_dataset, open_dataset, sample_bs_locations, split_dataset
from cgmgan.evaluate import (amse, build_report, export_slices, gan_test_amse, k_sweep, read_plane_csv,
                             read_ppm, size_sweep, slice_plane, write_csv, write_report)
from cgmgan.grid import RegionSpec
from cgmgan.radiosim import Cgm


@pytest.fixture(scope="module")
def ds(small_env, channel, tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    built = build_dataset(small_env, channel, sample_bs_locations(small_env, 30, seed=6), root)
    return split_dataset(built, 20, seed=0, test_count=6)


@pytest.fixture(scope="module")
def small_gan(ds):
    norm = Normalizer(extents=(128, 128, 64))
    hyper = Hyper(width=4, epochs=2, seed=1)
    trained, trace = train(GanModel.create(16, norm, hyper, ds.env_ref),
                           ds.coords(ds.train), ds.stack(ds.train))
    return trained, trace


class TestAmse:
    def test_identical_is_zero(self, rng):
        maps = [rng.standard_normal((3, 3, 3)) for _ in range(3)]
        assert amse(maps, maps) == 0

    def test_hand_example(self):
        assert amse([np.array([[[0.0, 0.0]]])], [np.array([[[1.0, 3.0]]])]) == 5.0

    def test_symmetric_and_decomposes(self, rng):
        a = [rng.standard_normal((4, 4, 4)) for _ in range(5)]
        b = [rng.standard_normal((4, 4, 4)) for _ in range(5)]
        assert amse(a, b) == pytest.approx(amse(b, a))
        assert amse(a, b) == pytest.approx(np.mean([amse([x], [y]) for x, y in zip(a, b)]))

    def test_mask_restricts(self, rng):
        a, b = rng.standard_normal((2, 4, 4, 4))
        mask = rng.random((4, 4, 4)) < 0.5
        assert amse([a], [b], mask) == pytest.approx(((a - b)[mask] ** 2).mean())

    def test_misaligned(self):
        g = np.zeros((2, 2, 2))
        with pytest.raises(ValueError):
            amse([Cgm((0, 0, 0), g)], [Cgm((1, 0, 0), g)])
        with pytest.raises(ValueError):
            amse([g], [])
        with pytest.raises(ValueError):
            amse([g], [np.zeros((2, 2, 3))])


class TestSweeps:
    def test_k_sweep(self, ds, small_env):
        rows = k_sweep(ds, range(1, 6), 2.0, ~small_env.mask)
        assert [r["k"] for r in rows] == [1, 2, 3, 4, 5]
        assert all(r["amse"] >= 0 and r["amse_free"] >= 0 for r in rows)
        # k=1 is nearest neighbor
        coords = ds.coords(ds.train)
        nn_maps = []
        for i in ds.test:
            d = np.linalg.norm(coords - ds.samples[i].bs, axis=1)
            nn_maps.append(ds.load(ds.train[int(np.argmin(d))]).gains_db)
        assert rows[0]["amse"] == pytest.approx(amse(ds.stack(ds.test), nn_maps))
        assert rows == k_sweep(ds, range(1, 6), 2.0, ~small_env.mask)

    def test_k_sweep_stops_at_train_size(self, ds):
        assert len(k_sweep(ds, range(1, 100))) == len(ds.train)

    def test_gan_amse_fields(self, ds, small_gan, small_env):
        out = gan_test_amse(small_gan[0], ds, ~small_env.mask)
        assert set(out) == {"amse", "amse_free", "amse_building"}

    def test_size_sweep(self, ds, small_gan):
        model = small_gan[0]
        hyper = Hyper(width=4, epochs=1, seed=2)
        rows, models = size_sweep(ds, 16, model.normalizer, hyper, [5, 20], seed=0, k_range=range(1, 4))
        assert [r["train_count"] for r in rows] == [5, 20]
        again, _ = size_sweep(ds, 16, model.normalizer, hyper, [5, 20], seed=0, k_range=range(1, 4))
        assert rows == again
        # the full-size row reproduces a single run on the same split
        single, _ = train(GanModel.create(16, model.normalizer, hyper, ds.env_ref),
                          ds.coords(ds.train), ds.stack(ds.train), hyper)
        assert rows[1]["amse_gan"] == gan_test_amse(single, ds)["amse"]

    def test_csv(self, tmp_path):
        write_csv([{"k": 1, "amse": 0.1 + 0.2}], tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text().splitlines() == ["k,amse", "1,0.30000000000000004"]


class TestSlices:
    def test_full_scale_plane_selection(self):
        spec = RegionSpec(256, 256, 128, 8, 8, 4)
        g = np.arange(32 ** 3, dtype=np.float32).reshape(32, 32, 32)
        plane, layer = slice_plane(g, spec, "z", 82)
        assert layer == 21 and np.array_equal(plane, g[:, :, 20])
        plane, layer = slice_plane(g, spec, "x", 124)
        assert layer == 16 and np.array_equal(plane, g[15])
        with pytest.raises(ValueError):
            slice_plane(g, spec, "w", 1)
        with pytest.raises(ValueError):
            slice_plane(g, spec, "z", 200)

    def test_constant_map_gives_uniform_image(self, tmp_path):
        spec = RegionSpec(128, 128, 64, 8, 8, 4)
        cgm = Cgm((0, 0, 0), np.full((16, 16, 16), -120.0))
        info = export_slices(cgm, spec, "y", 30, tmp_path / "s")
        img = read_ppm(info["ppm"])
        assert img.shape == (16, 16, 3)
        assert (img == img[0, 0]).all()

    def test_csv_round_trip_and_ramp_ends(self, rng, tmp_path):
        spec = RegionSpec(128, 128, 64, 8, 8, 4)
        g = rng.uniform(-250, -70, (16, 16, 16)).astype(np.float32)
        g[0, 0, 5], g[1, 0, 5] = -250, -70
        info = export_slices(Cgm((0, 0, 0), g), spec, "z", 22, tmp_path / "s")
        assert info["layer"] == 6
        assert np.array_equal(read_plane_csv(info["csv"]), g[:, :, 5])
        img = read_ppm(info["ppm"])
        # first plane axis runs left to right, second bottom to top
        assert tuple(img[-1, 0]) != tuple(img[-1, 1])


class TestReport:
    def test_regenerates_identically(self, ds, small_gan, tmp_path):
        model, trace = small_gan
        save_checkpoint(tmp_path / "m.ckpt", model)
        (tmp_path / "trace.json").write_text(json.dumps([vars(s) for s in trace]))
        (tmp_path / "eval.json").write_text(json.dumps({"gan": {"amse": 1.0, "amse_free": 2.0}}))
        a = build_report(ds.root, tmp_path / "m.ckpt", tmp_path / "eval.json", tmp_path / "trace.json")
        b = build_report(ds.root, tmp_path / "m.ckpt", tmp_path / "eval.json", tmp_path / "trace.json")
        write_report(tmp_path / "a.json", a)
        write_report(tmp_path / "b.json", b)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert a["storage_ratio"] == (tmp_path / "m.ckpt").stat().st_size / open_dataset(ds.root).byte_size()
        assert {"amse", "amse_free"} <= set(a["evaluation"]["gan"])
        assert a["model"]["param_counts"]["generator"] > 0
        assert len(a["loss_trace"]) == 2

"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so a failing criterion still reports its measured values.
"""

import json
import math
import time

import numpy as np
import pytest

from cgmgan.baseline import idw_infer
from cgmgan.cgan import GanModel, Hyper, Normalizer, discriminator_forward, encode_cgm, generator_forward
from cgmgan.cli import main
from cgmgan.dataset import (CgmDataset, BsType, CorruptCgmError, EnvHashMismatchError, Sample,
                            load_cgm, open_dataset, save_cgm)
from cgmgan.envfile import load_environment
from cgmgan.radiosim import Cgm, segments_blocked
from cgmgan.urbangen import UrbanParams, generate_environment, rayleigh_cdf, sample_height
from conftest import ACCEPTANCE_RESULTS
from gradcheck import CASES, run_case
from oracles import brute_force_idw, ks_statistic, occupied_chord, sampled_blocked

# Desk-scale run: 16^3 cells over 128 x 128 x 64 m, 220 maps, 20 held out.
DESK_ENV = ["--size", "128x128x64", "--cells", "16x16x16", "--gamma-h", "25", "--seed", "7"]
DESK_DATA = ["--count", "220", "--test-count", "20", "--seed", "1"]
DESK_TRAIN = ["--epochs", "300", "--width", "32", "--batch", "8", "--lambda-re", "1000",
              "--decay-start", "0.5", "--seed", "0"]
DESK_BUDGET_S = 30 * 60


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))


def run_desk_pipeline() -> dict:
    """Run gen-env, gen-dataset, train, eval and the overfit check in the current directory."""
    t0 = time.perf_counter()
    steps = [
        ["gen-env", *DESK_ENV, "--out", "env.json"],
        ["gen-dataset", "--env", "env.json", *DESK_DATA, "--out", "ds"],
        ["train", "--dataset", "ds", "--train-count", "200", *DESK_TRAIN, "--out", "gan.ckpt"],
        ["eval", "--dataset", "ds", "--ckpt", "gan.ckpt", "--k-sweep", "1..12", "--size-sweep", "50",
         "--out", "eval"],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with {code}")
    elapsed = time.perf_counter() - t0
    # overfit sanity check: same settings, 4 training samples
    if main(["train", "--dataset", "ds", "--train-count", "4", *DESK_TRAIN, "--out", "overfit.ckpt"]) != 0:
        raise RuntimeError("overfit run failed")
    return {"elapsed": elapsed}


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_a")
    with pytest.MonkeyPatch.context() as mp:
        mp.chdir(root)
        info = run_desk_pipeline()
    info["root"] = root
    return info


class TestAcceptance:
    def test_1_gradient_suite(self):
        t0 = time.perf_counter()
        worst = {name: max(run_case(name, seed) for seed in range(20)) for name in CASES}
        elapsed = time.perf_counter() - t0
        top = max(worst.values())
        ok = top < 1e-4 and elapsed < 60
        record("1 gradient suite", ok, f"{len(CASES)} cases x 20 seeds, max rel err {top:.2e}, {elapsed:.1f}s")
        assert ok, worst

    def test_2_shape_contract(self, rng):
        details, ok = [], True
        for side, width in [(32, 64), (16, 64)]:
            model = GanModel.create(side, Normalizer(extents=(128.0, 128.0, 64.0)), Hyper(width=width))
            g = generator_forward(model, rng.uniform(-1, 1, (3, 1, 1, 1)))
            d = discriminator_forward(model, g, rng.uniform(-1, 1, (3, 1, 1, 1)))
            details.append(f"{side}^3/{int(math.log2(side))}-block g{g.shape} d{d.shape}={float(d[0]):.3f}")
            ok = ok and g.shape == (1, side, side, side) and d.shape == (1,) and 0 < d[0] < 1
        record("2 shape contract", ok, "; ".join(details))
        assert ok

    def test_3_idw_oracle(self, rng, tmp_path):
        worst = 0.0
        for case in range(20):
            n = int(rng.integers(3, 12))
            shape = tuple(int(s) for s in rng.integers(2, 6, 3))
            env_ref = rng.bytes(32)
            root = tmp_path / f"c{case}"
            root.mkdir()
            samples = []
            for i in range(n):
                bs = tuple(float(v) for v in rng.random(3) * 100)
                save_cgm(root / f"{i}.cgm", Cgm(bs, rng.uniform(-250, -70, shape), env_ref))
                samples.append(Sample(bs, BsType.GBS, f"{i}.cgm"))
            n_test = int(rng.integers(0, n - 1))
            ds = CgmDataset(root, env_ref, tuple(samples), train=tuple(range(n_test, n)),
                            test=tuple(range(n_test)), shape=shape)
            k = int(rng.integers(1, len(ds.train) + 1))
            p = float(rng.uniform(0.5, 4))
            target = rng.random(3) * 100
            got = idw_infer(ds, target, k, p).gains_db.astype(np.float64)
            want = brute_force_idw(ds.coords(ds.train), ds.stack(ds.train), target, k, p)
            worst = max(worst, float(np.abs(got - want.astype(np.float32)).max()))
        ok = worst <= 1e-9
        record("3 IDW oracle equivalence", ok, f"20 cases, max voxel difference {worst:.1e}")
        assert ok

    def test_4_dda_vs_sampling(self, desk_spec):
        agree = total = 0
        grazing_only = True
        diag = math.sqrt(sum(c * c for c in desk_spec.cell_size))
        for e in range(5):
            env = generate_environment(desk_spec, UrbanParams(gamma_h=25.0, seed=100 + e))
            r = np.random.default_rng([e, 0xDDA])
            a = r.random((200, 3)) * desk_spec.extents
            b = r.random((200, 3)) * desk_spec.extents
            fast = segments_blocked(env.mask, desk_spec, a, b)
            for n in range(len(a)):
                total += 1
                if fast[n] == sampled_blocked(env.mask, desk_spec, a[n], b[n]):
                    agree += 1
                elif occupied_chord(env.mask, desk_spec, a[n], b[n]) >= diag:
                    grazing_only = False
        ok = agree >= 0.99 * total and grazing_only
        record("4 DDA vs sampling oracle", ok,
               f"{agree}/{total} agree, disagreements all grazing: {grazing_only}")
        assert ok

    def test_5_urban_generator(self, full_spec):
        u = np.random.default_rng(55).random(100_000)
        ks = ks_statistic([sample_height(50.0, v) for v in u], lambda h: rayleigh_cdf(h, 50.0))
        ratios = np.array([generate_environment(full_spec, UrbanParams(alpha=0.5, seed=s)).footprint_ratio
                           for s in range(100)])
        off = float(np.abs(ratios - 0.5).max())
        ok = ks < 0.01 and off <= 0.05
        record("5 urban generator", ok, f"KS {ks:.4f}; footprint ratio in "
               f"[{ratios.min():.3f}, {ratios.max():.3f}] over 100 seeds")
        assert ok

    def test_6_dataset_round_trip(self, rng, tmp_path):
        identical = 0
        env_ref = rng.bytes(32)
        for i in range(50):
            g = rng.uniform(-250, -70, (16, 16, 16)).astype(np.float32)
            cgm = Cgm(tuple(rng.random(3) * 100), g, env_ref)
            save_cgm(tmp_path / f"{i}.cgm", cgm)
            back = load_cgm(tmp_path / f"{i}.cgm", expected_env=env_ref)
            identical += back.gains_db.tobytes() == g.tobytes() and back.bs == cgm.bs and back.env_ref == env_ref
        blob = (tmp_path / "0.cgm").read_bytes()
        (tmp_path / "cut.cgm").write_bytes(blob[:-7])
        errors = []
        for path, expect in [(tmp_path / "cut.cgm", None), (tmp_path / "0.cgm", rng.bytes(32))]:
            try:
                load_cgm(path, expected_env=expect)
                errors.append(None)
            except (CorruptCgmError, EnvHashMismatchError) as exc:
                errors.append(type(exc))
        ok = identical == 50 and errors == [CorruptCgmError, EnvHashMismatchError]
        record("6 dataset round trip", ok, f"{identical}/50 bit-identical; errors "
               f"{[e.__name__ if e else None for e in errors]}")
        assert ok

    @pytest.mark.slow
    def test_7_desk_scale(self, desk):
        root = desk["root"]
        evaluation = json.loads((root / "eval" / "evaluation.json").read_text())
        gan = evaluation["gan"]["amse"]
        idw = evaluation["idw_best"]
        sweep = evaluation["size_sweep"][0]
        ok_a = gan < idw["amse"]
        ok_b = sweep["train_count"] == 50 and gan < sweep["amse_gan"]

        ds = open_dataset(root / "ds")
        env, _ = load_environment(root / "ds" / "environment.json")
        from cgmgan.cgan import infer_many, load_checkpoint

        model = load_checkpoint(root / "gan.ckpt")
        inferred = np.stack([c.gains_db for c in infer_many(model, ds.coords(ds.test))])
        unit = encode_cgm(inferred[:, env.mask], model.normalizer)
        frac = float((np.abs(unit + 1) <= 0.1).mean())
        ok_c = frac >= 0.95

        trace = json.loads((root / "overfit.ckpt.trace.json").read_text())
        drop = trace[0]["recon"] / min(s["recon"] for s in trace)
        ok_d = drop >= 10
        ok_t = desk["elapsed"] <= DESK_BUDGET_S and model.hyper.epochs <= 300
        detail = {"a": f"GAN {gan:.2f} vs IDW K={idw['k']} {idw['amse']:.2f} dB^2",
                  "b": f"train=200 {gan:.2f} vs train=50 {sweep['amse_gan']:.2f}",
                  "c": f"{100 * frac:.1f}% building voxels at floor",
                  "d": f"overfit recon drop {drop:.0f}x",
                  "time": f"{desk['elapsed'] / 60:.1f} min"}
        for key, ok in [("a", ok_a), ("b", ok_b), ("c", ok_c), ("d", ok_d), ("time", ok_t)]:
            record(f"7{key} desk scale", ok, detail[key])
        assert ok_a and ok_b and ok_c and ok_d and ok_t, detail

    @pytest.mark.slow
    def test_8_determinism(self, desk, tmp_path_factory):
        first = desk["root"]
        second = tmp_path_factory.mktemp("desk_b")
        with pytest.MonkeyPatch.context() as mp:
            mp.chdir(second)
            run_desk_pipeline()
        files = ["gan.ckpt", "overfit.ckpt", "eval/k_sweep.csv", "eval/size_sweep.csv",
                 "eval/evaluation.json", "eval/report.json"]
        same = [f for f in files if (first / f).read_bytes() == (second / f).read_bytes()]
        ok = len(same) == len(files)
        record("8 determinism", ok, f"{len(same)}/{len(files)} artifacts byte-identical")
        assert ok, sorted(set(files) - set(same))

import csv

import numpy as np
import pytest

from expomamba import checkpoint, cli, config, model
from expomamba.imageio import read_image, to_bytes, write_image


def write_ppm(path, arr):
    h, w = arr.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.astype(np.uint8).tobytes())


@pytest.fixture
def dataset(tmp_path):
    rng = np.random.default_rng(3)
    for i in range(3):
        low = rng.integers(10, 100, (16, 20, 3))
        write_ppm(tmp_path / "data" / "low" / f"im{i}.ppm", low)
        write_ppm(tmp_path / "data" / "high" / f"im{i}.ppm", np.minimum(low * 2, 255))
    return tmp_path


def run_cfg(root, **extra):
    raw = {"data_low_dir": str(root / "data" / "low"), "data_high_dir": str(root / "data" / "high"),
           "out_dir": str(root / "out"), "resolutions": "16", "batches_per_epoch": "2", "epochs": "2"}
    raw.update({k: str(v) for k, v in extra.items()})
    return config.build(raw)


def quiet(*_):
    pass


def read_csv(path):
    data = path.read_bytes()
    assert b"\r" not in data
    return list(csv.reader(data.decode().splitlines()))


class TestPairs:
    def test_sorted_pairs(self, dataset):
        pairs = cli.load_pairs(dataset / "data" / "low", dataset / "data" / "high")
        assert [p[0] for p in pairs] == ["im0.ppm", "im1.ppm", "im2.ppm"]

    def test_missing_partner_named(self, dataset):
        (dataset / "data" / "high" / "im1.ppm").unlink()
        with pytest.raises(cli.CliError, match=r"im1\.ppm \(missing in high\)"):
            cli.load_pairs(dataset / "data" / "low", dataset / "data" / "high")

    def test_missing_dir(self, tmp_path):
        with pytest.raises(cli.CliError, match="not found"):
            cli.load_pairs(tmp_path / "a", tmp_path / "b")


class TestTrain:
    def test_zero_epochs_writes_initial(self, dataset):
        cfg = run_cfg(dataset, epochs=0, seed=4)
        assert cli.cmd_train(cfg, log=quiet) == 0
        _, w = checkpoint.load_checkpoint(cfg.checkpoint_path, cfg.model)
        init = model.init_weights(cfg.model, 4)
        assert all(w[k].tobytes() == init[k].tobytes() for k in init)
        assert read_csv(dataset / "out" / "train_log.csv") == [
            ["epoch", "lr", "total", "l1", "ssim", "over", "wall-ms"]]

    def test_reproducible_bytes(self, dataset):
        a = run_cfg(dataset, checkpoint=dataset / "a.xpmb")
        b = run_cfg(dataset, checkpoint=dataset / "b.xpmb")
        cli.cmd_train(a, log=quiet)
        cli.cmd_train(b, log=quiet)
        assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
        init = checkpoint.encode(a.model, model.init_weights(a.model, a.seed))
        assert a.checkpoint_path.read_bytes() != init

    def test_log_rows(self, dataset):
        cli.cmd_train(run_cfg(dataset, epochs=3), log=quiet)
        rows = read_csv(dataset / "out" / "train_log.csv")
        assert len(rows) == 4 and [r[0] for r in rows[1:]] == ["0", "1", "2"]
        for r in rows[1:]:
            assert all(np.isfinite(float(v)) for v in r[1:])

    def test_resolution_too_large(self, dataset):
        with pytest.raises(cli.CliError, match="exceeds"):
            cli.cmd_train(run_cfg(dataset, resolutions=32), log=quiet)

    def test_size_mismatch(self, dataset):
        write_ppm(dataset / "data" / "high" / "im0.ppm", np.zeros((16, 16, 3)))
        with pytest.raises(cli.CliError, match="differ in size"):
            cli.cmd_train(run_cfg(dataset), log=quiet)


class TestEnhance:
    @pytest.fixture
    def trained(self, dataset):
        cfg = run_cfg(dataset, epochs=0, checkpoint=dataset / "m.xpmb")
        cli.cmd_train(cfg, log=quiet)
        return cfg

    def test_outputs_match_inputs(self, dataset, trained):
        inputs = sorted((dataset / "data" / "low").iterdir())
        cfg = config.replace(trained, out_dir=str(dataset / "enh"))
        assert cli.cmd_enhance(cfg, inputs, log=quiet) == 0
        outs = sorted((dataset / "enh").iterdir())
        assert [p.name for p in outs] == [p.name for p in inputs]
        for a, b in zip(inputs, outs):
            assert read_image(a).shape == read_image(b).shape

    def test_da_strength_zero_is_noop(self, dataset, trained):
        src = [dataset / "data" / "low" / "im0.ppm"]
        plain = config.replace(trained, out_dir=str(dataset / "p"))
        zero = config.replace(trained, out_dir=str(dataset / "z"), da_strength=0.0)
        cli.cmd_enhance(plain, src, log=quiet)
        cli.cmd_enhance(zero, src, da=True, log=quiet)
        assert (dataset / "p" / "im0.ppm").read_bytes() == (dataset / "z" / "im0.ppm").read_bytes()

    def test_missing_checkpoint(self, dataset):
        with pytest.raises(cli.CliError, match="checkpoint not found"):
            cli.cmd_enhance(run_cfg(dataset), [dataset / "data" / "low" / "im0.ppm"], log=quiet)

    def test_missing_input(self, dataset, trained):
        with pytest.raises(cli.CliError, match="input not found"):
            cli.cmd_enhance(trained, [dataset / "nope.ppm"], log=quiet)


class TestEval:
    def test_self_scoring(self, dataset):
        cfg = run_cfg(dataset)
        assert cli.cmd_eval(cfg, pred_dir=str(dataset / "data" / "high"), log=quiet) == 0
        rows = read_csv(dataset / "out" / "eval.csv")
        assert len(rows) == 1 + 3 + 1
        for r in rows[1:]:
            assert float(r[1]) == 99.0 and float(r[2]) == pytest.approx(1.0, abs=1e-12)
            assert float(r[3]) == 0.0

    def test_gt_mean_tag(self, dataset):
        cfg = run_cfg(dataset)
        cli.cmd_eval(cfg, gt_mean=True, pred_dir=str(dataset / "data" / "low"), log=quiet)
        rows = read_csv(dataset / "out" / "eval.csv")
        assert rows[0][-1] == "gt-mean" and all(r[-1] == "true" for r in rows[1:])

    def test_missing_prediction(self, dataset, tmp_path):
        with pytest.raises(cli.CliError, match="prediction missing"):
            cli.cmd_eval(run_cfg(dataset), pred_dir=str(tmp_path / "empty"), log=quiet)


class TestInspectFft:
    def test_planes_per_channel(self, tmp_path, rng):
        src = tmp_path / "a.ppm"
        write_image(rng.uniform(size=(3, 8, 12)), src)
        cli.cmd_inspect_fft([src], tmp_path / "o", log=quiet)
        names = sorted(p.name for p in (tmp_path / "o").iterdir())
        assert names == sorted(f"a_{k}_c{c}.ppm" for k in ("amp", "phase") for c in range(3))

    def test_uniform_phase_plane(self, tmp_path):
        src = tmp_path / "u.ppm"
        write_ppm(src, np.full((8, 8, 3), 128))
        cli.cmd_inspect_fft([src], tmp_path / "o", log=quiet)
        plane = to_bytes(read_image(tmp_path / "o" / "u_phase_c0.ppm"))
        assert np.all(plane == 128)

    def test_self_swap_is_identity(self, tmp_path, rng):
        src = tmp_path / "a.ppm"
        write_image(rng.uniform(size=(3, 8, 8)), src)
        cli.cmd_inspect_fft([src, src], tmp_path / "o", log=quiet)
        back = read_image(tmp_path / "o" / "swap_ampA_phaseB.ppm")
        assert np.abs(back - read_image(src)).max() <= 1 / 255

    def test_same_stem_kept_apart(self, tmp_path, rng):
        for sub in ("x", "y"):
            write_image(rng.uniform(size=(3, 8, 8)), tmp_path / sub / "0.ppm")
        cli.cmd_inspect_fft([tmp_path / "x" / "0.ppm", tmp_path / "y" / "0.ppm"], tmp_path / "o", log=quiet)
        names = {p.name for p in (tmp_path / "o").iterdir()}
        assert {"0_A_amp_c0.ppm", "0_B_amp_c0.ppm"} <= names

    def test_arity(self, tmp_path):
        with pytest.raises(cli.CliError):
            cli.cmd_inspect_fft([], tmp_path, log=quiet)


class TestMain:
    def test_train_via_argv(self, dataset):
        cfg_file = dataset / "run.cfg"
        cfg_file.write_text(f"data_low_dir = {dataset / 'data' / 'low'}\n"
                            f"data_high_dir = {dataset / 'data' / 'high'}\n"
                            "resolutions = 16\nbatches_per_epoch = 1\n", encoding="utf-8")
        rc = cli.main(["train", "--config", str(cfg_file), "--epochs", "1", "--seed", "2",
                       "--out", str(dataset / "m")])
        assert rc == 0 and (dataset / "m" / "model.xpmb").is_file()

    def test_error_exit_code(self, dataset, capsys):
        (dataset / "data" / "high" / "im2.ppm").unlink()
        rc = cli.main(["train", "--set", f"data_low_dir={dataset / 'data' / 'low'}",
                       "--set", f"data_high_dir={dataset / 'data' / 'high'}", "--out", str(dataset / "m")])
        assert rc == 2 and "im2.ppm" in capsys.readouterr().err

    def test_unknown_key_exit_code(self, capsys):
        assert cli.main(["train", "--set", "nonsense=1"]) == 2
        assert "nonsense" in capsys.readouterr().err

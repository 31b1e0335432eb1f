"""End-to-end CLI workflows: synth -> train -> enhance -> eval -> check."""

import json

import numpy as np
import pytest
import torch

from hupe import metrics as M
from hupe.cli import main
from hupe.config import RunConfig
from hupe.data import list_images, load_image, save_image


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    clean = root / "clean"
    clean.mkdir()
    g = torch.Generator().manual_seed(21)
    for i in range(4):
        base = torch.rand(3, 8, 8, generator=g)
        img = torch.nn.functional.interpolate(
            base[None], size=(32, 32), mode="bicubic", align_corners=False
        )[0].clamp(0, 1)
        # interior intensity range keeps near-identity model outputs inside
        # [0, 1], so the PNG round trip below is quantization-limited
        save_image(0.2 + 0.6 * img, clean / f"img{i}.png")
        (clean / f"img{i}.boxes.json").write_text(
            json.dumps([[0.2, 0.2, 0.7, 0.7, 0]])
        )
    code = main([
        "synth", "--clean", str(clean), "--out", str(root / "deg"),
        "--beta-min", "0.4", "--beta-max", "0.9", "--seed", "3",
        "--size", "32", "--depth", "ramp",
    ])
    assert code == 0
    return root


def desk_config_file(root, out_name, **kwargs):
    cfg = dict(
        train_degraded=str(root / "deg"),
        train_reference=str(root / "clean"),
        out_dir=str(root / out_name),
        crop=32, resize=32, n_hibs=2, flow_steps=2,
        lr=1e-4, batch=1, epochs=1, max_steps=4,
        task_epochs=1, task_max_steps=2,
        joint_epochs=1, joint_max_steps=1,
        perceptual_backend="random", seed=5,
    )
    cfg.update(kwargs)
    path = root / f"{out_name}.json"
    path.write_text(json.dumps(cfg))
    return path


class TestSynth:
    def test_outputs_and_manifest(self, workspace):
        deg = workspace / "deg"
        assert len(list_images(deg)) == 4
        manifest = json.loads((deg / "manifest.json").read_text())
        assert manifest["count"] == 4
        assert all(0.4 <= e["beta"] <= 0.9 for e in manifest["images"])

    def test_fixed_seed_reproducible(self, workspace, tmp_path):
        main(["synth", "--clean", str(workspace / "clean"), "--out",
              str(tmp_path / "again"), "--beta-min", "0.4", "--beta-max", "0.9",
              "--seed", "3", "--size", "32", "--depth", "ramp"])
        for path in list_images(workspace / "deg"):
            a = np.load(path.with_suffix(".npz"))["degraded"]
            b = np.load(tmp_path / "again" / path.with_suffix(".npz").name)["degraded"]
            assert np.array_equal(a, b)


class TestTrain:
    def test_desk_run_writes_artifacts(self, workspace):
        cfg_path = desk_config_file(workspace, "run_a")
        assert main(["train", "--config", str(cfg_path)]) == 0
        out = workspace / "run_a"
        assert (out / "hin_final.ckpt").is_file()
        assert (out / "train_log.jsonl").is_file()
        assert (out / "train_log.png").is_file()
        records = [json.loads(l) for l in
                   (out / "train_log.jsonl").read_text().splitlines()]
        assert any(r["phase"] == "pretrain_hin" for r in records)
        assert any(r["phase"] == "joint" for r in records)

    def test_invalid_config_key_fails_with_name(self, workspace, capsys):
        bad = workspace / "bad.json"
        bad.write_text(json.dumps({"train_degraded": "x", "learning_rate": 1}))
        assert main(["train", "--config", str(bad)]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_config_file(self, capsys):
        assert main(["train", "--config", "/no/such/config.json"]) == 2
        assert "config" in capsys.readouterr().err

    def test_seed_determinism_bit_identical(self, workspace):
        cfg_path = desk_config_file(workspace, "run_s1", joint_epochs=0)
        p1 = workspace / "run_s1" / "hin_final.ckpt"
        assert main(["train", "--config", str(cfg_path), "--seed", "7"]) == 0
        blob1 = p1.read_bytes()
        cfg_path2 = desk_config_file(workspace, "run_s2", joint_epochs=0)
        assert main(["train", "--config", str(cfg_path2), "--seed", "7"]) == 0
        blob2 = (workspace / "run_s2" / "hin_final.ckpt").read_bytes()
        assert blob1 == blob2


class TestEnhance:
    @pytest.fixture(scope="class")
    def trained(self, workspace):
        cfg_path = desk_config_file(workspace, "run_e", joint_epochs=0)
        assert main(["train", "--config", str(cfg_path)]) == 0
        return workspace / "run_e" / "hin_final.ckpt"

    def test_output_count_matches_input(self, workspace, trained):
        out = workspace / "enhanced"
        assert main(["enhance", "--in", str(workspace / "deg"),
                     "--out", str(out), "--ckpt", str(trained)]) == 0
        assert len(list_images(out)) == len(list_images(workspace / "deg"))

    def test_forward_then_inverse_round_trip(self, workspace):
        # a near-identity model keeps its outputs inside [0, 1], so the PNG
        # round trip is limited by 8-bit quantization alone; states that
        # leave the export range lose information to the clamp by design
        from hupe.checkpoint import save_checkpoint
        from hupe.flow import FlowConfig
        from hupe.scl import HIN

        torch.manual_seed(0)
        hin = HIN(FlowConfig(n_hibs=2, flow_steps=2))
        hin.flow.set_identity()
        g = torch.Generator().manual_seed(1)
        with torch.no_grad():
            for hib in hin.flow.hibs:
                for step in hib.steps:
                    head = step.sfa.head
                    head.weight.add_(0.002 * torch.randn(head.weight.shape, generator=g))
                    head.bias.add_(0.02 * torch.randn(head.bias.shape, generator=g))
                    step.actnorm.scale.mul_(
                        1 + 0.01 * torch.randn(step.actnorm.scale.shape, generator=g)
                    )
        ckpt = workspace / "rt.ckpt"
        save_checkpoint(hin, ckpt)

        fwd = workspace / "rt_fwd"
        back = workspace / "rt_back"
        assert main(["enhance", "--in", str(workspace / "deg"),
                     "--out", str(fwd), "--ckpt", str(ckpt)]) == 0
        assert main(["enhance", "--in", str(fwd), "--out", str(back),
                     "--ckpt", str(ckpt), "--direction", "inverse"]) == 0
        worst = 0.0
        for path in list_images(workspace / "deg"):
            orig = load_image(path)
            rec = load_image(back / path.name)
            worst = max(worst, (orig - rec).abs().max().item())
        assert worst <= 2 / 255

    def test_empty_dir_warns_and_exits_zero(self, tmp_path, trained, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["enhance", "--in", str(empty), "--out", str(tmp_path / "o"),
                     "--ckpt", str(trained)]) == 0
        assert "warning" in capsys.readouterr().err


class TestEval:
    def test_pred_equals_ref_sentinels(self, workspace):
        report_path = workspace / "reports" / "self.json"
        assert main(["eval", "--pred", str(workspace / "clean"),
                     "--ref", str(workspace / "clean"),
                     "--report", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert report["count"] == 4
        for vals in report["images"].values():
            assert vals["psnr"] == 99.0
            assert vals["ssim"] == pytest.approx(1.0)
        assert (workspace / "reports" / "self.csv").is_file()
        assert (workspace / "reports" / "self.png").is_file()

    def test_aggregate_is_mean_of_per_image(self, workspace):
        report_path = workspace / "reports" / "noref.json"
        assert main(["eval", "--pred", str(workspace / "deg"),
                     "--report", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        for metric, agg in report["aggregate"].items():
            vals = [v[metric] for v in report["images"].values()]
            assert agg["mean"] == pytest.approx(float(np.mean(vals)), abs=1e-9)

    def test_values_match_module_calls(self, workspace):
        report_path = workspace / "reports" / "cross.json"
        main(["eval", "--pred", str(workspace / "deg"),
              "--report", str(report_path), "--no-figures"])
        report = json.loads(report_path.read_text())
        path = list_images(workspace / "deg")[0]
        x = load_image(path).permute(1, 2, 0).numpy()
        assert report["images"][path.stem]["uiqm"] == pytest.approx(M.uiqm(x), abs=1e-9)
        assert report["images"][path.stem]["uciqe"] == pytest.approx(M.uciqe(x), abs=1e-9)


class TestCheck:
    def test_losses_suite_passes(self, capsys):
        assert main(["check", "--suite", "losses"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_unknown_suite_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["check", "--suite", "nonsense"])
        assert exc.value.code == 2

    def test_corrupted_checkpoint_fails_with_named_block(self, workspace, capsys):
        from hupe.checkpoint import read_checkpoint, save_checkpoint
        from hupe.scl import hin_from_checkpoint

        cfg_path = desk_config_file(workspace, "run_c", joint_epochs=0, max_steps=1)
        assert main(["train", "--config", str(cfg_path)]) == 0
        ckpt = workspace / "run_c" / "hin_final.ckpt"
        hin = hin_from_checkpoint(ckpt)
        with torch.no_grad():
            hin.flow.hibs[1].steps[0].invconv.weight.zero_()
        corrupted = workspace / "run_c" / "hin_corrupt.ckpt"
        save_checkpoint(hin, corrupted)

        code = main(["check", "--suite", "invertibility", "--ckpt", str(corrupted)])
        out = capsys.readouterr().out
        assert code == 1
        assert "FAIL" in out
        assert "HIB 1 step 0" in out

import json
import math

import numpy as np
import pytest
import torch
from torch import nn

from cbv.data import LabeledImages, make_shapes
from cbv.errors import (BadLabel, DuplicateRecord, EmptyClass, EmptyManifest, MissingFile, ParseError,
                        ShapeMismatch, UnknownLabel)
from cbv.harness.cli import main
from cbv.harness.config import build, config_sha256, provenance
from cbv.harness.manifest import load_manifest, parse_manifest, write_dataset
from cbv.harness.metrics import (PSNR_CAP, entropy_bits, eval_asr, eval_clean, eval_quality, psnr, ssim,
                                 strip_entropy)
from cbv.harness.pipeline import PoisonConfig, derive_seed, outside_mask_equal
from cbv.harness.plan import load_plan, plan_poison, save_plan
from cbv.harness.victim import VictimConfig, train_victim
from cbv.trigger import noise_trigger


class Fixed(nn.Module):
    """Victim answering from a lookup of the image's first pixel."""

    def __init__(self, answers, num_classes=4):
        super().__init__()
        self.answers, self.num_classes = answers, num_classes

    def forward(self, x):
        keys = torch.round(x[:, 0, 0, 0] * 255).long()
        return nn.functional.one_hot(self.answers[keys], self.num_classes).float()


class Const(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


def _doc(n=10, classes=("a", "b"), **over):
    recs = [{"id": i, "path": f"images/{i:06d}.png", "label": i % len(classes),
             "caption": f"a photo of a {classes[i % len(classes)]}",
             "split": "train" if i < n - 2 else "test"} for i in range(n)]
    doc = {"classes": list(classes), "records": recs}
    doc.update(over)
    return doc


@pytest.fixture()
def dataset(tmp_path):
    train, test = make_shapes(25, seed=0), make_shapes(5, seed=1)
    return write_dataset(tmp_path / "d", train, test)


def test_manifest_round_trip(dataset, tmp_path):
    m = load_manifest(tmp_path / "d" / "manifest.json")
    assert m == dataset and len(m.records) == 120
    assert m.dumps() == dataset.dumps()
    assert torch.equal(m.load(split="train").images, make_shapes(25, seed=0).images)


def test_manifest_ten_records_parse_without_files():
    m = parse_manifest(json.dumps(_doc()), check_paths=False)
    assert len(m.records) == 10 and m.classes == ["a", "b"]
    assert parse_manifest(m.dumps(), check_paths=False) == m


def test_manifest_errors(tmp_path):
    with pytest.raises(ParseError):
        parse_manifest("{not json", check_paths=False)
    with pytest.raises(ParseError):
        parse_manifest(json.dumps({"records": []}), check_paths=False)
    with pytest.raises(EmptyManifest):
        parse_manifest(json.dumps(_doc(records=[])), check_paths=False)
    d = _doc()
    d["records"][3]["id"] = 2
    with pytest.raises(DuplicateRecord):
        parse_manifest(json.dumps(d), check_paths=False)
    d = _doc()
    d["records"][0]["label"] = 5
    with pytest.raises(BadLabel):
        parse_manifest(json.dumps(d), check_paths=False)
    d = _doc()
    del d["records"][0]["caption"]
    with pytest.raises(ParseError):
        parse_manifest(json.dumps(d), check_paths=False)
    with pytest.raises(MissingFile):
        parse_manifest(json.dumps(_doc()), root=tmp_path)
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "none.json")


def test_label_lookup(dataset):
    assert dataset.label_id("square") == 1 and dataset.label_id("2") == 2
    with pytest.raises(UnknownLabel):
        dataset.label_id("hexagon")
    with pytest.raises(UnknownLabel):
        dataset.label_id(7)


def _manifest(n_per_class, classes=("a", "b", "c")):
    recs = [{"id": i, "path": f"{i}.png", "label": i % len(classes), "caption": "", "split": "train"}
            for i in range(n_per_class * len(classes))]
    return parse_manifest(json.dumps({"classes": list(classes), "records": recs}), check_paths=False)


def test_plan_sizes_and_membership():
    m = _manifest(100)
    plan = plan_poison(m, 0, 1, 0.05, seed=3)
    assert len(plan.selected) == 5
    assert all(r.label == 1 for r in m.records if r.id in plan.selected)
    full = plan_poison(m, 0, 1, 1.0, seed=3)
    assert full.selected == [r.id for r in m.select("train", 1)]
    orig = plan_poison(m, 0, 1, 0.1, seed=3, source="original")
    assert all(i % 3 == 0 for i in orig.selected)


def test_plan_seeded_and_nested():
    m = _manifest(100)
    for seed in range(20):
        a, b = plan_poison(m, 0, 1, 0.05, seed), plan_poison(m, 0, 1, 0.05, seed)
        assert a.selected == b.selected
        assert set(a.selected) <= set(plan_poison(m, 0, 1, 0.1, seed).selected)
    assert plan_poison(m, 0, 1, 0.05, 0).selected != plan_poison(m, 0, 1, 0.05, 1).selected


def test_plan_errors(tmp_path):
    m = _manifest(10)
    for p in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            plan_poison(m, 0, 1, p)
    lonely = parse_manifest(json.dumps({"classes": ["a", "b"], "records": [
        {"id": 0, "path": "0.png", "label": 1, "caption": "", "split": "train"}]}), check_paths=False)
    with pytest.raises(EmptyClass):
        plan_poison(lonely, 0, 1, 0.5)
    plan = plan_poison(m, "a", "b", 0.5, 4)
    save_plan(tmp_path / "p.json", plan)
    assert load_plan(tmp_path / "p.json") == plan


def test_derive_seed_stable():
    assert derive_seed(0, 5) == derive_seed(0, 5)
    assert derive_seed(0, 5) != derive_seed(1, 5) != derive_seed(0, 6)
    assert 0 <= derive_seed(123, 456) < 2 ** 63


def test_poison_config_validation():
    with pytest.raises(ValueError):
        PoisonConfig(mask_mode="box")
    cfg = PoisonConfig(lambda_image=7.0).sampler(seed=3)
    assert cfg.lambda_image == 7.0 and cfg.seed == 3


def test_outside_mask_equal():
    x = torch.rand(3, 4, 4)
    m = torch.zeros(4, 4)
    m[0, 0] = 1
    y = x.clone()
    y[:, 0, 0] = 0.5
    assert outside_mask_equal(x, y, m)
    y[1, 2, 2] += 1 / 255
    assert not outside_mask_equal(x, y, m)


def _probe_set(n, label):
    imgs = torch.zeros(n, 3, 8, 8)
    imgs[:, 0, 0, 0] = torch.arange(n) / 255
    return imgs, torch.full((n,), label)


def test_eval_asr_counts():
    imgs, labels = _probe_set(20, 0)
    test = LabeledImages(imgs, labels)
    trig = noise_trigger((3, 8, 8), rho=0.0)
    answers = torch.tensor([1] * 7 + [2] * 13 + [0] * 236)
    r = eval_asr(Fixed(answers), test, trig, 0, 1)
    assert r == {"asr": 0.35, "n_success": 7, "n_total": 20, "n_other": 13}
    assert eval_asr(Const([0, 5, 0, 0]), test, trig, 0, 1)["asr"] == 1.0
    assert eval_asr(Const([5, 0, 0, 0]), test, trig, 0, 1)["asr"] == 0.0
    with pytest.raises(EmptyClass):
        eval_asr(Const([5, 0, 0, 0]), test, trig, 3, 1)


def test_eval_clean_counts():
    imgs, _ = _probe_set(10, 0)
    labels = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3, 0, 1])
    answers = torch.tensor([0, 1, 2, 0, 0, 0, 2, 3, 1, 1] + [0] * 246)
    r = eval_clean(Fixed(answers), LabeledImages(imgs, labels))
    assert r["n_correct"] == 7 and r["accuracy"] == 0.7
    assert eval_clean(Const([1, 0, 0, 0]), LabeledImages(imgs, labels))["accuracy"] == 0.3


def test_psnr_values():
    a = torch.zeros(3, 8, 8)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.5) == pytest.approx(20 * math.log10(2), abs=1e-9)
    with pytest.raises(ShapeMismatch):
        psnr(a, torch.zeros(3, 4, 4))


def _ssim_loop(a, b, w=8):
    """Direct windowed SSIM with population statistics."""
    a, b = a.double().numpy(), b.double().numpy()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for c in range(a.shape[0]):
        for i in range(a.shape[1] - w + 1):
            for j in range(a.shape[2] - w + 1):
                x, y = a[c, i:i + w, j:j + w], b[c, i:i + w, j:j + w]
                mx, my = x.mean(), y.mean()
                vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
                cxy = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2)
                            / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_loop_reference():
    gen = torch.Generator().manual_seed(0)
    a = torch.rand(3, 12, 11, generator=gen)
    b = (a + 0.1 * torch.randn(3, 12, 11, generator=gen)).clamp(0, 1)
    assert ssim(a, b) == pytest.approx(_ssim_loop(a, b), abs=1e-6)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        ssim(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4))


def test_eval_quality_shape(small_enc):
    x = make_shapes(2, seed=5).images
    q = eval_quality(x, x, small_enc)
    assert q["psnr_mean"] == PSNR_CAP and q["ssim_mean"] == pytest.approx(1.0)
    assert q["feature_distance_mean"] == pytest.approx(0.0, abs=1e-6)
    assert len(q["psnr"]) == 8


def test_entropy_bits():
    assert float(entropy_bits(torch.full((4,), 0.25))) == pytest.approx(2.0)
    assert float(entropy_bits(torch.tensor([0.0, 1.0, 0.0]))) == 0.0


def test_strip_extremes():
    imgs = torch.rand(6, 3, 8, 8)
    uniform = strip_entropy(Const([0.0, 0.0, 0.0, 0.0]), imgs, imgs, n_overlays=4, bins=5)
    assert all(e == pytest.approx(2.0) for e in uniform["entropy"])
    assert sum(uniform["histogram"]) == 6 and uniform["histogram"][-1] == 6
    peaked = strip_entropy(Const([0.0, 1e4, 0.0, 0.0]), imgs, imgs, n_overlays=4, bins=5)
    assert peaked["mean"] == 0.0 and peaked["histogram"][0] == 6
    assert peaked["bin_edges"][-1] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        strip_entropy(Const([0.0, 1.0]), imgs, imgs, n_overlays=0)


def test_victim_learns_shapes():
    data = make_shapes(40, seed=2)
    v = train_victim(data, VictimConfig(epochs=8))
    assert v.report["train_accuracy"] > 0.5
    test = make_shapes(10, seed=9)
    assert eval_clean(v, test)["accuracy"] > 0.5


def test_config_helpers():
    assert build(VictimConfig, {"epochs": 3}, seed=9) == VictimConfig(epochs=3, seed=9)
    with pytest.raises(ParseError):
        build(VictimConfig, {"epoch": 3})
    p = provenance(1, {"b": 1, "a": 2})
    assert p["config_sha256"] == config_sha256({"a": 2, "b": 1})
    assert set(p) == {"seed", "config_sha256", "tool_version"}


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train-encoders", "--data", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "o")]) == 1
    assert "MissingFile" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["gen-data"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["no-such-command", "--out", "x"])
    assert e.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"gen-data": {"n_train": 2}, "train-victim": {"epoch": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 0
    assert main(["train-victim", "--config", str(bad), "--data", str(tmp_path / "d" / "manifest.json"),
                 "--out", str(tmp_path / "v")]) == 1


def test_cli_gen_data_is_deterministic(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gen-data": {"n_train": 3, "n_test": 1}}))
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 18
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

import json
import os

import numpy as np
import pytest
import torch
from PIL import Image

from bankexport import (
    ExportError,
    ModelSpec,
    TorchHead,
    build_backbone,
    export_bank,
    export_heads,
    head_tensors,
    load_head_checkpoint,
    preprocess,
    pretrain_head,
    scan_folder,
)
from bankexport.formats import heads_payload, write_heads

SPEC = dict(arch="resnet18", seed=3, resize=64, crop=64)


class TestScan:
    def test_lexicographic_order_and_labels(self, image_root):
        index = scan_folder(image_root)
        assert index.classes == ["cat", "dog"]
        assert index.paths == sorted(index.paths)
        # the unreadable file has an image extension, so it is listed here
        # and only skipped when decoding fails
        assert "cat/broken.png" in index.paths
        for path, label in zip(index.paths, index.labels):
            assert label == index.classes.index(path.split("/")[0])

    def test_empty_folder_rejected(self, tmp_path):
        with pytest.raises(ExportError):
            scan_folder(tmp_path)
        (tmp_path / "cls").mkdir()
        (tmp_path / "cls" / "notes.txt").write_text("x")
        with pytest.raises(ExportError):
            scan_folder(tmp_path)


@pytest.fixture(scope="session")
def exported(image_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("bank") / "fixture.fbnk"
    specs = [
        ModelSpec(name="painting", **SPEC),
        ModelSpec(name="photo", **SPEC),  # same backbone, second domain
    ]
    result = export_bank(image_root, specs, out, batch_size=4)
    return out, result


class TestBank:
    def test_skips_unreadable_with_manifest(self, exported):
        out, result = exported
        assert result.skipped == ["cat/broken.png"]
        assert len(result.paths) == 10
        with open(str(out) + ".json") as f:
            sidecar = json.load(f)
        assert sidecar["skipped"] == ["cat/broken.png"]
        assert sidecar["classes"] == ["cat", "dog"]
        assert sidecar["domains"][0]["preprocessing"]["arch"] == "resnet18"

    def test_engine_reads_and_validates_bank(self, exported):
        read_bank = pytest.importorskip("ensadapt.bankio").read_bank
        out, result = exported
        bank = read_bank(out)
        bank.validate()
        assert bank.domain_names == ["painting", "photo"]
        assert bank.n_samples == 10
        assert bank.n_classes == 2
        assert np.array_equal(bank.labels, result.labels)
        # float32 on disk: loaded features match the export to f32 precision
        for disk, mem in zip(bank.features, result.features):
            assert np.allclose(disk, mem, atol=1e-5)

    def test_shared_backbone_gives_identical_blocks(self, exported):
        _, result = exported
        assert np.array_equal(result.features[0], result.features[1])

    def test_row_norms_match_reference_forward(self, exported, image_root):
        _, result = exported
        spec = ModelSpec(name="ref", **SPEC)
        backbone = build_backbone(spec)
        tf = preprocess(spec)
        index = scan_folder(image_root)
        rows = []
        for path in result.paths:
            with Image.open(os.path.join(index.root, path)) as img:
                rows.append(tf(img.convert("RGB")))
        with torch.no_grad():
            ref = backbone.features(torch.stack(rows)).double().numpy()
        got = np.linalg.norm(result.features[0], axis=1)
        want = np.linalg.norm(ref, axis=1)
        assert np.allclose(got, want, rtol=1e-4, atol=1e-4)

    def test_rerun_is_byte_identical(self, exported, image_root, tmp_path):
        out, _ = exported
        again = tmp_path / "again.fbnk"
        export_bank(image_root, [ModelSpec(name="painting", **SPEC),
                                 ModelSpec(name="photo", **SPEC)],
                    again, batch_size=4)
        assert again.read_bytes() == out.read_bytes()

    def test_batch_size_does_not_change_sample_order(self, exported, image_root,
                                                     tmp_path):
        _, result = exported
        other = tmp_path / "b3.fbnk"
        res3 = export_bank(image_root, [ModelSpec(name="painting", **SPEC)],
                           other, batch_size=3)
        assert res3.paths == result.paths
        assert np.allclose(res3.features[0], result.features[0],
                           rtol=1e-5, atol=1e-5)


class TestHeads:
    def probe_head(self, d_backbone=12, d_k=6, n_classes=3, seed=0):
        torch.manual_seed(seed)
        head = TorchHead(d_backbone, d_k, n_classes)
        # make the batch-norm statistics non-trivial
        head.bn.running_mean += torch.randn(d_k) * 0.3
        head.bn.running_var += torch.rand(d_k)
        head.eval()
        return head

    def test_default_bottleneck_width(self):
        assert TorchHead(8).bottleneck.out_features == 256

    def test_probe_batch_matches_engine_forward(self, tmp_path):
        bankio = pytest.importorskip("ensadapt.bankio")
        heads_mod = pytest.importorskip("ensadapt.heads")
        head = self.probe_head()
        out = tmp_path / "probe.shed"
        export_heads([("dom0", head)], out)
        (engine_head,) = bankio.read_heads(out)
        x = np.random.default_rng(1).normal(size=(16, 12))
        with torch.no_grad():
            reference = head(torch.from_numpy(x).float()).double().numpy()
        phi = heads_mod.bottleneck_forward(engine_head, x, "eval")
        engine_logits = heads_mod.classifier_logits(engine_head, phi)
        assert np.allclose(engine_logits, reference, rtol=1e-4, atol=1e-4)

    def test_exporter_reference_forward_matches_torch(self):
        head = self.probe_head(seed=2)
        tensors = head_tensors("d", head)
        x = np.random.default_rng(2).normal(size=(8, 12))
        with torch.no_grad():
            reference = head(torch.from_numpy(x).float()).double().numpy()
        assert np.allclose(tensors.forward(x), reference, rtol=1e-5, atol=1e-5)

    def test_zero_bias_roundtrips_as_exact_zeros(self, tmp_path):
        bankio = pytest.importorskip("ensadapt.bankio")
        head = self.probe_head(seed=3)
        with torch.no_grad():
            head.classifier.bias.zero_()
            head.bottleneck.bias.zero_()
        out = tmp_path / "zb.shed"
        export_heads([("d", head)], out)
        (engine_head,) = bankio.read_heads(out)
        assert np.array_equal(engine_head.classifier_b, np.zeros(3))
        assert np.array_equal(engine_head.bottleneck_b, np.zeros(6))

    def test_checkpoint_roundtrip(self, tmp_path):
        head = self.probe_head(seed=4)
        ckpt = tmp_path / "head.pt"
        torch.save(head.state_dict(), ckpt)
        loaded, tensors = load_head_checkpoint("d", ckpt)
        assert heads_payload([tensors]) == heads_payload([head_tensors("d", head)])

    def test_checkpoint_missing_tensor_rejected(self, tmp_path):
        head = self.probe_head()
        state = head.state_dict()
        del state["classifier.weight"]
        ckpt = tmp_path / "bad.pt"
        torch.save(state, ckpt)
        with pytest.raises(ExportError, match="classifier.weight"):
            load_head_checkpoint("d", ckpt)

    def test_pretrain_fits_separable_features(self):
        rng = np.random.default_rng(5)
        means = np.array([[4.0] * 8, [-4.0] * 8])
        labels = np.repeat([0, 1], 30)
        feats = means[labels] + rng.normal(size=(60, 8))
        head, acc = pretrain_head("d", feats, labels, d_k=4, epochs=10, seed=0)
        assert acc >= 0.99

    def test_mismatched_heads_rejected(self, tmp_path):
        a = head_tensors("a", self.probe_head())
        b = head_tensors("b", self.probe_head(n_classes=4))
        with pytest.raises(ExportError):
            write_heads(tmp_path / "x.shed", [a, b])

from __future__ import annotations

import json
import zipfile

import numpy as np
import pytest
import torch

from disreg.models import GroupwiseVAE, ResUNet
from disreg.utils.io import load_model, read_model_json

SMALL = {"num_levels": 2, "num_modalities": 2, "image_size": (16, 16), "base_channels": 4, "max_channels": 8}


class NewGroupwiseVAE(GroupwiseVAE):
    __version__ = 100000


@pytest.fixture()
def small_model():
    torch.manual_seed(0)
    model = GroupwiseVAE(**SMALL)
    # Perturb the zero-initialized heads so that the round trip is not trivially satisfied.
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.01 * torch.randn_like(p))
    return model.eval()


def test_save_layout(small_model, tmp_path):
    path = small_model.save(tmp_path / "model.dreg", metadata={"config": {"train": {"seed": 3}}})
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        d = json.loads(zf.read("model.json"))
    assert "model.json" in names
    assert all(n == "model.json" or (n.startswith("params/") and n.endswith(".npy")) for n in names)
    assert d["@class"] == "GroupwiseVAE"
    assert d["@module"] == "disreg.models._gvae"
    assert d["arch"] == "proposed"
    assert d["init_args"]["image_size"] == [16, 16]
    assert d["metadata"]["config"]["train"]["seed"] == 3
    assert read_model_json(path) == d


def test_round_trip(small_model, tmp_path):
    path = small_model.save(tmp_path / "model.dreg")
    model2 = load_model(path).eval()
    assert isinstance(model2, GroupwiseVAE)
    for (k1, v1), (k2, v2) in zip(small_model.state_dict().items(), model2.state_dict().items()):
        assert k1 == k2
        assert torch.equal(v1, v2)
    x = torch.rand(1, 2, 16, 16)
    d1 = torch.stack([t.displacement for t in small_model.register(x)])
    d2 = torch.stack([t.displacement for t in model2.register(x)])
    np.testing.assert_array_equal(d1.detach().numpy(), d2.detach().numpy())


def test_dispatch_on_class(tmp_path):
    model = ResUNet(num_modalities=2, image_size=(16, 16), base_channels=4, num_levels=3, max_channels=8)
    path = model.save(tmp_path / "ape.dreg")
    loaded = load_model(path)
    assert isinstance(loaded, ResUNet)
    assert read_model_json(path)["arch"] == "ape"


def test_model_versioning(small_model, tmp_path):
    path = small_model.save(tmp_path / "old.dreg")
    with pytest.warns(UserWarning, match="Incompatible model version detected!"):
        model2 = NewGroupwiseVAE.load(path)
    # Model still loads since nothing is incompatible; init args are restored.
    assert isinstance(model2, NewGroupwiseVAE)
    assert model2.num_levels == 2
    assert model2._init_args["base_channels"] == 4


def test_bad_archives(small_model, tmp_path):
    with pytest.raises(ValueError, match="Bad serialized model"):
        load_model(tmp_path / "missing.dreg")

    not_zip = tmp_path / "junk.dreg"
    not_zip.write_text("junk")
    with pytest.raises(ValueError, match="Bad serialized model"):
        load_model(not_zip)

    path = small_model.save(tmp_path / "model.dreg")
    stripped = tmp_path / "stripped.dreg"
    with zipfile.ZipFile(path) as src, zipfile.ZipFile(stripped, "w") as dst:
        dst.writestr("model.json", src.read("model.json"))
    with pytest.raises(ValueError, match="lacks parameters"):
        GroupwiseVAE.load(stripped)

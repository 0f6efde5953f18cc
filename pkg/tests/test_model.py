import numpy as np
import pytest
from conftest import max_rel_err

from ortho_debias import autodiff as ad
from ortho_debias import model as md
from ortho_debias import serialization as ser


@pytest.fixture
def net():
    return md.init_convnet(4, seed=5, widths=(3, 4, 5))


def batch(n=3, hw=8, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 3, hw, hw))


def test_forward_equals_split_forward_at_every_layer(net):
    x = batch()
    full = md.forward(net, x).data
    for layer in (1, 2, 3):
        split = md.forward_from(net, md.features_at(net, x, layer), layer).data
        np.testing.assert_allclose(split, full, rtol=0, atol=1e-13)


def test_feature_shapes(net):
    x = batch(hw=16)
    assert md.features_at(net, x, 1).shape == (3, 3, 8, 8)
    assert md.features_at(net, x, 3).shape == (3, 5, 2, 2)
    assert md.concept_features(net, x).shape == (3, 4)
    assert md.forward(net, x).shape == (3, 4)
    assert net.feature_dim(1) == 3


def test_bad_inputs_rejected(net):
    with pytest.raises(ad.ShapeError):
        md.forward(net, np.zeros((2, 1, 8, 8)))
    with pytest.raises(ad.ShapeError):
        md.forward(net, np.zeros((2, 3, 12, 12)))
    with pytest.raises(ValueError):
        md.features_at(net, batch(), 4)
    with pytest.raises(ValueError):
        md.class_logit_feature_gradients(net, batch(), 4, 2)


def test_samples_are_independent(net):
    x = batch(4)
    full = md.forward(net, x).data
    for i in range(4):
        np.testing.assert_allclose(md.forward(net, x[i : i + 1]).data[0], full[i], atol=1e-13)


def test_feature_gradient_matches_finite_differences(net):
    x = batch(1, seed=3)[0]
    for c in range(net.n_classes):
        g = md.class_logit_feature_gradient(net, x, c, 2)
        feats = md.features_at(net, x[None], 2).data
        # the logit is piecewise linear in the block-2 output; perturb the spatial sum uniformly
        num = np.zeros(g.shape)
        h = 1e-6
        for k in range(g.size):
            bump = np.zeros_like(feats)
            bump[0, k] = h
            up = md.forward_from(net, ad.Tensor(feats + bump), 2).data[0, c]
            dn = md.forward_from(net, ad.Tensor(feats - bump), 2).data[0, c]
            num[k] = (up - dn) / (2 * h)
        assert max_rel_err(g, num) < 1e-5


def test_batched_feature_gradients_match_single(net):
    x = batch(3, seed=4)
    many = md.class_logit_feature_gradients(net, x, 1, 2)
    for i in range(3):
        np.testing.assert_allclose(md.class_logit_feature_gradient(net, x[i], 1, 2), many[i], atol=1e-13)


def test_init_is_seeded(net):
    same = md.init_convnet(4, seed=5, widths=(3, 4, 5))
    other = md.init_convnet(4, seed=6, widths=(3, 4, 5))
    assert md.parameter_hash(same) == md.parameter_hash(net)
    assert md.parameter_hash(other) != md.parameter_hash(net)


def test_predict_matches_forward_in_chunks(net):
    x = batch(7)
    np.testing.assert_allclose(md.predict(net, x, batch_size=3), md.forward(net, x).data, atol=1e-13)
    assert md.predict(net, x[:0]).shape == (0, 4)


def test_checkpoint_round_trip(net, tmp_path):
    path = tmp_path / "c.odck"
    md.save_checkpoint(net, path)
    back = md.load_checkpoint(path)
    assert back.descriptor() == net.descriptor()
    assert md.parameter_hash(back) == md.parameter_hash(net)
    x = batch()
    np.testing.assert_array_equal(md.forward(back, x).data, md.forward(net, x).data)
    md.save_checkpoint(back, tmp_path / "d.odck")
    assert (tmp_path / "d.odck").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout(net, tmp_path):
    import struct

    path = tmp_path / "c.odck"
    md.save_checkpoint(net, path)
    buf = path.read_bytes()
    assert buf[:4] == b"ODCK"
    version, dlen = struct.unpack_from("<II", buf, 4)
    assert version == 1
    import json

    assert json.loads(buf[12 : 12 + dlen])["arch"] == "convnet"
    (count,) = struct.unpack_from("<I", buf, 12 + dlen)
    assert count == len(net.params)


def test_truncated_checkpoint_reports_offset(net, tmp_path):
    path = tmp_path / "c.odck"
    md.save_checkpoint(net, path)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ser.ContainerError, match="offset"):
        md.load_checkpoint(path)

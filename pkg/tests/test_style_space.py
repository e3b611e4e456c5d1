import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmstyle.style_space import (ContractError, CrossModalCorrector, StyleEntry, StyleFeature, StyleMatcher,
                                 StyleSet, catalog_style, cfcm_loss, correct_text_feature, cosine_distance,
                                 encode_image_style, encode_text_style, featurize, init_cfcm, load_cfcm,
                                 load_style_set, match_style, render_style_image, save_cfcm, save_style_set,
                                 split_indices, style_catalog, synthetic_pair_corpus, toy_image_encoder,
                                 toy_text_encoder, train_cfcm)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec4 = arrays(np.float64, 4, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def feat(v, modality="image", corrected=False):
    return StyleFeature(np.asarray(v, dtype=np.float64), modality, corrected)


def tiny_set(vectors, threshold=0.1):
    entries = [StyleEntry(sid, "image", "", feat(v)) for sid, v in vectors.items()]
    return StyleSet(entries, dim=len(next(iter(vectors.values()))), threshold=threshold)


# cosine distance

def test_cosine_distance_45_degrees():
    assert cosine_distance([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
    assert cosine_distance([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.29289, abs=1e-5)


def test_cosine_distance_orthogonal_and_opposite():
    assert cosine_distance([1.0, 0.0], [0.0, 3.0]) == pytest.approx(1.0)
    assert cosine_distance([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(2.0)


def test_cosine_distance_zero_vector():
    with pytest.raises(ValueError):
        cosine_distance([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(vec4, vec4, st.floats(0.01, 100))
def test_cosine_distance_scale_invariant_and_bounded(a, b, k):
    d = cosine_distance(a, b)
    assert 0.0 <= d <= 2.0
    assert cosine_distance(k * a, b) == pytest.approx(d, abs=1e-9)
    assert cosine_distance(b, a) == pytest.approx(d, abs=1e-12)


# matching

def test_match_below_threshold():
    s = tiny_set({"a": [1.0, 0.0], "b": [0.0, 1.0]})
    m = match_style(feat([1.0, 0.05]), s)
    assert m.matched and m.style_id == "a"


def test_no_match_reports_nearest():
    s = tiny_set({"a": [1.0, 0.0], "b": [0.0, 1.0]})
    m = match_style(feat([1.0, 0.9]), s)
    assert not m.matched and m.style_id == "a"
    assert m.distance == pytest.approx(cosine_distance([1.0, 0.9], [1.0, 0.0]))


def test_match_threshold_is_strict():
    s = tiny_set({"a": [1.0, 0.0]}, threshold=cosine_distance([1.0, 0.0], [1.0, 1.0]))
    assert not match_style(feat([1.0, 1.0]), s).matched


def test_match_tie_goes_to_smallest_id():
    s = tiny_set({"zeta": [1.0, 0.0], "alpha": [0.0, 1.0]})
    m = match_style(feat([1.0, 1.0]), s)
    assert m.style_id == "alpha"


def test_match_empty_set():
    with pytest.raises(ValueError):
        match_style(feat([1.0, 0.0]), StyleSet([], dim=2))


def test_matcher_estimator():
    s = tiny_set({"a": [1.0, 0.0], "b": [0.0, 1.0]})
    out = StyleMatcher(threshold=0.5).fit(s).predict([feat([0.1, 1.0]), feat([1.0, 1.0])])
    assert [r.style_id for r in out] == ["b", "a"]
    assert StyleMatcher().get_params() == {"threshold": 0.1}


# style set

def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        tiny_set({"a": [1.0, 0.0]}).__class__([StyleEntry("a", "image", ""), StyleEntry("a", "image", "")])
    s = tiny_set({"a": [1.0, 0.0]})
    with pytest.raises(ContractError):
        s.add(StyleEntry("a", "image", "", feat([0.0, 1.0])))


def test_feature_dim_checked():
    with pytest.raises(ValueError):
        StyleSet([StyleEntry("a", "image", "", feat([1.0, 0.0, 0.0]))], dim=2)


def test_feature_rejects_nonfinite():
    with pytest.raises(ValueError):
        feat([np.nan, 1.0])


def test_style_set_json_round_trip(tmp_path):
    s = tiny_set({"a": [1.0, 0.0], "b": [0.3, 0.4]}, threshold=0.2)
    save_style_set(s, tmp_path / "styles.json")
    back = load_style_set(tmp_path / "styles.json", threshold=0.2)
    assert back.ids == ["a", "b"] and back.dim == 2
    assert np.array_equal(back.get("b").feature.vector, s.get("b").feature.vector)


def test_load_style_set_missing_field(tmp_path):
    (tmp_path / "s.json").write_text('[{"id": "a", "payload": "x"}]')
    with pytest.raises(ValueError, match="modality"):
        load_style_set(tmp_path / "s.json")


# encoders

def test_image_encoder_unit_norm_and_deterministic():
    img = render_style_image(style_catalog()[0])
    a = encode_image_style(img).vector
    assert a.shape == (32,)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert np.array_equal(a, encode_image_style(img).vector)


def test_image_encoder_needs_room_for_histograms():
    with pytest.raises(ValueError):
        toy_image_encoder(np.zeros((8, 8, 3)), dim=16)


def test_text_encoder_is_a_bag_of_tokens():
    a = toy_text_encoder("blue storm at night")
    b = toy_text_encoder("Night, at STORM blue!")
    assert np.allclose(a, b)
    assert not np.allclose(a, toy_text_encoder("red storm at night"))


def test_text_encoder_repeated_token_same_direction():
    assert np.allclose(toy_text_encoder("dots"), toy_text_encoder("dots dots dots"))


@pytest.mark.parametrize("text", ["", "   ", "!!!"])
def test_text_encoder_rejects_empty(text):
    with pytest.raises(ValueError):
        encode_text_style(text)


def test_encoders_accept_custom_callables():
    f = encode_text_style("anything", encoder=lambda t: np.ones(4))
    assert f.modality == "text" and f.vector.tolist() == [1.0] * 4


# correction module

def test_untrained_cfcm_is_identity():
    p = init_cfcm(8, seed=3)
    x = torch.randn(5, 8, dtype=torch.float64)
    assert torch.equal(x + p(x), x)


def test_correction_marks_feature_and_refuses_twice():
    p = init_cfcm(32)
    f = encode_text_style("waves at sea")
    g = correct_text_feature(f, p)
    assert g.corrected and np.allclose(g.vector, f.vector)
    with pytest.raises(ContractError):
        correct_text_feature(g, p)
    with pytest.raises(ContractError):
        correct_text_feature(feat(np.ones(32)), p)


def test_loss_with_zero_lambda_ignores_magnitude():
    img = torch.randn(6, 8, dtype=torch.float64)
    total, l_c, l_m = cfcm_loss(img, 3.0 * img, 0.0)
    assert total.item() == pytest.approx(0.0, abs=1e-12)
    assert l_m.item() > 1.0


def test_zero_lambda_gradient_matches_cosine_term():
    torch.manual_seed(0)
    img = torch.randn(6, 8, dtype=torch.float64)
    x = torch.randn(6, 8, dtype=torch.float64, requires_grad=True)
    total, _, _ = cfcm_loss(img, x, 0.0)
    (g_total,) = torch.autograd.grad(total, x)
    _, l_c, _ = cfcm_loss(img, x, 0.0)
    (g_cos,) = torch.autograd.grad(l_c, x)
    assert torch.allclose(g_total, g_cos)


def test_cfcm_loss_values():
    img = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    cor = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    total, l_c, l_m = cfcm_loss(img, cor, 0.5)
    assert l_c.item() == pytest.approx(1 - 1 / math.sqrt(2))
    assert l_m.item() == pytest.approx(1.0)
    assert total.item() == pytest.approx(l_c.item() + 0.5)


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        train_cfcm([(np.ones(4), np.ones(4))], lam=-1.0)


def test_split_is_a_partition():
    parts = split_indices(100, seed=4)
    assert [len(parts[k]) for k in ("train", "val", "test")] == [60, 20, 20]
    assert sorted(np.concatenate(list(parts.values())).tolist()) == list(range(100))


@pytest.mark.slow
def test_cfcm_learns_a_constant_bias():
    pairs = synthetic_pair_corpus(600, dim=8, noise=0.0, include_catalog=False, seed=1)
    params, report = train_cfcm(pairs, 0.5, steps=1000, seed=1)
    ix = report.split["test"]
    t = torch.as_tensor(np.stack([pairs[i][0] for i in ix]))
    im = torch.as_tensor(np.stack([pairs[i][1] for i in ix]))
    with torch.no_grad():
        _, _, l_m = cfcm_loss(im, t + params(t), 0.5)
    assert l_m.item() < 1e-3
    assert report.summary()["val_cos_after"] > report.summary()["val_cos_before"]


def test_cfcm_training_is_deterministic():
    pairs = synthetic_pair_corpus(100, dim=8, include_catalog=False)
    _, r1 = train_cfcm(pairs, steps=20, seed=2)
    _, r2 = train_cfcm(pairs, steps=20, seed=2)
    assert r1.train_loss == r2.train_loss


def test_cfcm_checkpoint_round_trip(tmp_path):
    pairs = synthetic_pair_corpus(50, dim=8, include_catalog=False)
    params, _ = train_cfcm(pairs, steps=5)
    save_cfcm(params, tmp_path / "cfcm.bin")
    back = load_cfcm(tmp_path / "cfcm.bin")
    x = torch.randn(3, 8, dtype=torch.float64)
    assert torch.equal(params(x), back(x))


def test_corrector_estimator_shapes():
    pairs = synthetic_pair_corpus(60, dim=8, include_catalog=False)
    X = np.stack([a for a, _ in pairs])
    y = np.stack([b for _, b in pairs])
    est = CrossModalCorrector(steps=5).fit(X, y)
    assert est.transform(X).shape == X.shape
    with pytest.raises(ValueError):
        CrossModalCorrector(steps=1).fit(X, y[:, :4])


def test_featurize_corrects_text_only():
    s = StyleSet([StyleEntry("t", "text", "stripes at dawn"), StyleEntry("i", "image", "catalog:cubism_harbor")])
    out = featurize(s, cfcm=init_cfcm(32))
    assert out.get("t").feature.corrected
    assert not out.get("i").feature.corrected
    assert featurize(s).get("t").feature.corrected is False


# catalogue

def test_catalog_has_fifty_unique_styles():
    cat = style_catalog()
    assert len(cat) == 50
    assert len({c.style_id for c in cat}) == 50
    assert cat[0].text.startswith("a picture of")


def test_catalog_images_deterministic_and_in_range():
    c = catalog_style("cubism_harbor")
    a = render_style_image(c, 32)
    assert a.shape == (32, 32, 3)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, render_style_image(c, 32))


def test_unknown_catalog_style():
    with pytest.raises(KeyError):
        catalog_style("nope")


def test_catalog_styles_are_mutually_unmatched():
    s = StyleSet([StyleEntry(c.style_id, "image", "", encode_image_style(render_style_image(c)))
                  for c in style_catalog()[:10]])
    for e in s:
        others = StyleSet([x for x in s if x.style_id != e.style_id])
        assert not match_style(e.feature, others).matched

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsskd import autodiff as ad
from tsskd.autodiff import Tensor
from tsskd.data import IGNORE, GroundTruth, SceneSpec, collate, generate
from tsskd.errors import DimensionError, ValidationError
from tsskd.models import (
    PROPOSAL,
    SIMILARITY,
    ArchConfig,
    LayerSpec,
    TrackerOutput,
    build_model,
    fc_loss,
    halve_channels,
    load_checkpoint,
    model_size_bytes,
    param_count,
    rank_proposals,
    rpn_loss,
    save_checkpoint,
    score_geometry,
    teacher_config,
)


def closed_form_count(channels, k=3, cin=3):
    total = 0
    for c in channels:
        total += cin * c * k * k + c
        cin = c
    return total


def test_teacher_param_count_closed_form():
    cfg = teacher_config(SIMILARITY)
    assert param_count(cfg) == closed_form_count([32, 64, 64, 96])
    # Proposal heads add four 1x1 convs on the final features.
    head = 2 * (2 * 3 * 8) * (96 + 1) + 2 * (4 * 3 * 8) * (96 + 1)
    assert param_count(teacher_config(PROPOSAL)) == closed_form_count([32, 64, 64, 96]) + head == 139648
    assert model_size_bytes(teacher_config()) == 4 * 139648


def test_single_unit_conv_has_two_params():
    cfg = ArchConfig(layers=(LayerSpec(1, 1, 1),), head_kind=SIMILARITY, in_channels=1, template_size=1, search_size=1)
    assert param_count(cfg) == 2
    assert model_size_bytes(cfg, bytes_per_scalar=8) == 16


def test_halve_channels_examples():
    cfg = ArchConfig(layers=(LayerSpec(32), LayerSpec(64)), head_kind=SIMILARITY)
    assert halve_channels(cfg).channels() == [16, 32]
    odd = ArchConfig(layers=(LayerSpec(33),), head_kind=SIMILARITY)
    assert halve_channels(odd).channels() == [16]
    t = teacher_config()
    h = halve_channels(t)
    assert h.channels() == [16, 32, 32, 48] and h.head_channels == 4
    assert [l.kernel for l in h.layers] == [l.kernel for l in t.layers]
    assert param_count(h) < param_count(t)
    with pytest.raises(ValidationError):
        halve_channels(ArchConfig(layers=(LayerSpec(1),), head_kind=SIMILARITY))


def test_halving_quarters_conv_dominated_counts():
    wide = ArchConfig(layers=(LayerSpec(128), LayerSpec(256), LayerSpec(256)), head_kind=SIMILARITY)
    ratio = param_count(halve_channels(wide)) / param_count(wide)
    expected = closed_form_count([64, 128, 128]) / closed_form_count([128, 256, 256])
    assert ratio == pytest.approx(expected, abs=1e-15)
    assert abs(ratio - 0.25) < 0.01


def test_config_rejects_spatial_collapse():
    with pytest.raises(ValidationError, match="layer 2"):
        ArchConfig(layers=(LayerSpec(4, 5, 2), LayerSpec(4, 5, 2), LayerSpec(4, 7, 1)), template_size=32)
    with pytest.raises(ValidationError):
        ArchConfig(layers=(LayerSpec(4),), head_kind="mystery")
    with pytest.raises(ValidationError):
        ArchConfig(layers=())


def test_config_dict_round_trip():
    cfg = halve_channels(teacher_config())
    assert ArchConfig.from_dict(cfg.to_dict()) == cfg


def test_score_geometry_of_desk_teacher():
    assert score_geometry(teacher_config()) == (9, 4, 15.5)


def test_build_is_deterministic():
    cfg = teacher_config()
    a, b = build_model(cfg, 7), build_model(cfg, 7)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    c = build_model(cfg, 8)
    assert a.params["layer0.weight"].data.tobytes() != c.params["layer0.weight"].data.tobytes()


def test_freezing_drops_stale_gradients():
    model = build_model(teacher_config(), 0)
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    model.set_requires_grad(False)
    assert all(not p.requires_grad and p.grad is None for p in model.parameters())
    model.set_requires_grad(True)
    assert all(p.requires_grad for p in model.parameters())


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_proposal_shape_contract(k):
    cfg = ArchConfig(layers=(LayerSpec(4, 3, 2), LayerSpec(6, 3, 2)), anchors_k=k, head_channels=2)
    m = build_model(cfg, 0)
    out = m(np.zeros((3, 32, 32)), np.zeros((3, 64, 64)))
    s = score_geometry(cfg)[0]
    assert out.cls.shape == (2 * k, s, s)
    assert out.reg.shape == (4 * k, s, s)
    assert len(out.feats_x) == len(out.feats_z) == 2


def test_similarity_output_has_no_regression():
    m = build_model(teacher_config(SIMILARITY), 0)
    out = m(np.zeros((2, 3, 32, 32)), np.zeros((2, 3, 64, 64)))
    assert out.reg is None
    assert out.cls.shape == (2, 1, 9, 9)
    assert out.batched


def test_forward_rejects_wrong_sizes():
    m = build_model(teacher_config(), 0)
    with pytest.raises(DimensionError):
        m(np.zeros((3, 30, 30)), np.zeros((3, 64, 64)))
    with pytest.raises(DimensionError):
        m(np.zeros((1, 3, 32, 32)), np.zeros((3, 64, 64)))


def test_zero_final_layer_gives_zero_scores():
    for kind in (SIMILARITY, PROPOSAL):
        m = build_model(teacher_config(kind), 1)
        m.params["layer3.weight"].data[:] = 0
        m.params["layer3.bias"].data[:] = 0
        rng = np.random.default_rng(0)
        out = m(rng.standard_normal((3, 32, 32)), rng.standard_normal((3, 64, 64)))
        if kind == SIMILARITY:
            assert np.all(out.cls.data == 0)
        else:
            # Head 1x1 convs only see their biases, which start at zero.
            assert np.all(out.cls.data == 0) and np.all(out.reg.data == 0)


def _identity_net(size_z, size_x):
    cfg = ArchConfig(layers=(LayerSpec(1, 1, 1),), head_kind=SIMILARITY, in_channels=1, template_size=size_z, search_size=size_x)
    m = build_model(cfg, 0)
    m.params["layer0.weight"].data[:] = 1.0
    return m


def test_center_crop_template_peaks_at_center():
    x = np.zeros((1, 24, 24))
    x[0, 10:14, 9:15] = 1.0
    x[0, 3:5, 18:21] = 0.5
    z = x[:, 6:18, 6:18].copy()
    out = _identity_net(12, 24)(z, x).cls.data[0]
    peak = np.unravel_index(np.argmax(out), out.shape)
    assert abs(peak[0] - 6) <= 1 and abs(peak[1] - 6) <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-3, 3), st.integers(-3, 3))
def test_similarity_map_is_translation_equivariant(seed, dy, dx):
    rng = np.random.default_rng(seed)
    cfg = ArchConfig(layers=(LayerSpec(4, 3, 1), LayerSpec(4, 3, 1)), head_kind=SIMILARITY, template_size=10, search_size=26)
    m = build_model(cfg, seed)
    canvas = rng.uniform(0, 0.1, (3, 40, 40))
    canvas[:, 16:22, 17:23] += 1.0
    z = canvas[:, 14:24, 15:25]
    base = canvas[:, 7:33, 7:33]
    shifted = canvas[:, 7 - dy : 33 - dy, 7 - dx : 33 - dx]
    a = m(z, base).cls.data[0]
    b = m(z, shifted).cls.data[0]
    pa = np.array(np.unravel_index(np.argmax(a), a.shape))
    pb = np.array(np.unravel_index(np.argmax(b), b.shape))
    np.testing.assert_array_equal(pb - pa, [dy, dx])


def test_branches_share_weights():
    m = build_model(teacher_config(), 0)
    rng = np.random.default_rng(1)
    z, x = rng.standard_normal((3, 32, 32)), rng.standard_normal((3, 64, 64))
    before = m(z, x)
    m.params["layer0.weight"].data[0, 0, 0, 0] += 0.5
    after = m(z, x)
    assert not np.array_equal(before.feats_x[0].data, after.feats_x[0].data)
    assert not np.array_equal(before.feats_z[0].data, after.feats_z[0].data)


def _sample_batch(n=2):
    return collate(generate(SceneSpec(), n, seed=0))


def test_fc_loss_all_ignored_is_zero():
    m = build_model(teacher_config(SIMILARITY), 0)
    z, x, gt = _sample_batch()
    gt.score_labels = np.full_like(gt.score_labels, IGNORE)
    loss = fc_loss(m(z, x), gt)
    loss.backward()
    assert loss.item() == 0.0
    assert all(np.all(p.grad == 0) for p in m.parameters())


def test_fc_loss_on_synthetic_labels_is_positive():
    m = build_model(teacher_config(SIMILARITY), 0)
    z, x, gt = _sample_batch()
    val = fc_loss(m(z, x), gt).item()
    assert np.isfinite(val) and val > 0


def test_fc_loss_saturates():
    _, _, gt = _sample_batch(1)
    labels = gt.score_labels[0]
    scores = Tensor((50.0 * np.where(labels == IGNORE, 1, labels))[None].astype(float))
    out = TrackerOutput(scores, None, [], [], SIMILARITY)
    single = GroundTruth(gt.anchor_labels[0], gt.reg_targets[0], labels, gt.box[0])
    assert fc_loss(out, single).item() < 1e-6
    with pytest.raises(ValidationError):
        rpn_loss(out, single)


def _proposal_out(cls, reg):
    return TrackerOutput(Tensor(cls), Tensor(reg), [], [], PROPOSAL)


def test_rpn_loss_exact_fit_is_tiny():
    _, _, gt = _sample_batch(1)
    labels = gt.anchor_labels[0]
    k = labels.shape[0]
    cls = np.zeros((2 * k,) + labels.shape[1:])
    cls[1::2] = 40.0 * (labels == 1)
    cls[0::2] = 40.0 * (labels != 1)
    single = GroundTruth(labels, gt.reg_targets[0], gt.score_labels[0], gt.box[0])
    assert rpn_loss(_proposal_out(cls, gt.reg_targets[0].copy()), single).item() < 1e-6


def test_rpn_loss_uniform_logits_give_ln2():
    _, _, gt = _sample_batch(1)
    single = GroundTruth(gt.anchor_labels[0], gt.reg_targets[0], gt.score_labels[0], gt.box[0])
    cls = np.zeros((6, 9, 9))
    assert rpn_loss(_proposal_out(cls, gt.reg_targets[0].copy()), single).item() == pytest.approx(math.log(2), abs=1e-12)


def rpn_loss_reference(cls, reg, labels, targets):
    """Loop re-implementation of the multi-task anchor loss."""
    k = labels.shape[0]
    pos_terms, neg_terms, reg_terms = [], [], []
    for a in range(k):
        for i in range(labels.shape[1]):
            for j in range(labels.shape[2]):
                lab = labels[a, i, j]
                if lab == IGNORE:
                    continue
                bg, fg = cls[2 * a, i, j], cls[2 * a + 1, i, j]
                m = max(bg, fg)
                lse = m + math.log(math.exp(bg - m) + math.exp(fg - m))
                nll = lse - (fg if lab == 1 else bg)
                (pos_terms if lab == 1 else neg_terms).append(nll)
                if lab == 1:
                    for c in range(4):
                        d = abs(reg[4 * a + c, i, j] - targets[4 * a + c, i, j])
                        reg_terms.append(0.5 * d * d if d < 1 else d - 0.5)
    groups = [g for g in (pos_terms, neg_terms) if g]
    cls_loss = sum(sum(g) / len(g) for g in groups) / len(groups)
    reg_loss = sum(reg_terms) / len(reg_terms) if reg_terms else 0.0
    return cls_loss + reg_loss


def test_rpn_loss_matches_reference():
    m = build_model(teacher_config(), 3)
    z, x, gt = _sample_batch(1)
    single = GroundTruth(gt.anchor_labels[0], gt.reg_targets[0], gt.score_labels[0], gt.box[0])
    out = m(z[0], x[0])
    ref = rpn_loss_reference(out.cls.data, out.reg.data, single.anchor_labels, single.reg_targets)
    assert rpn_loss(out, single).item() == pytest.approx(ref, rel=1e-12)


def test_rpn_loss_without_positives_drops_regression():
    _, _, gt = _sample_batch(1)

    labels = np.where(gt.anchor_labels[0] == 1, -1, gt.anchor_labels[0])
    single = GroundTruth(labels, gt.reg_targets[0], gt.score_labels[0], gt.box[0])
    reg = Tensor(np.random.default_rng(0).standard_normal((12, 9, 9)), requires_grad=True)
    loss = rpn_loss(TrackerOutput(Tensor(np.zeros((6, 9, 9))), reg, [], [], PROPOSAL), single)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)
    loss.backward()
    assert np.all(reg.grad == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_supervised_losses_are_nonnegative(seed):
    rng = np.random.default_rng(seed)
    _, _, gt = _sample_batch(2)
    cls = Tensor(rng.standard_normal((2, 6, 9, 9)) * 5)
    reg = Tensor(rng.standard_normal((2, 12, 9, 9)))
    assert rpn_loss(TrackerOutput(cls, reg, [], [], PROPOSAL), gt).item() > 0
    s = Tensor(rng.standard_normal((2, 1, 9, 9)) * 5)
    assert fc_loss(TrackerOutput(s, None, [], [], SIMILARITY), gt).item() > 0


def test_checkpoint_round_trip(tmp_path):
    m = build_model(halve_channels(teacher_config()), 4, dtype=np.float32)
    save_checkpoint(tmp_path / "m.ckpt", m, epoch=3, extra={"note": "x"})
    loaded, manifest = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.cfg == m.cfg and manifest["epoch"] == 3 and manifest["note"] == "x"
    for name, p in m.named_parameters():
        assert loaded.params[name].data.tobytes() == p.data.tobytes()
        assert loaded.params[name].dtype == np.float32


def test_rank_proposals_orders_by_confidence():
    m = build_model(teacher_config(), 0)
    z, x, gt = _sample_batch(2)
    out = m(z, x)
    boxes, scores = rank_proposals(m.cfg, out, 5)
    assert boxes.shape == (2, 5, 4) and scores.shape == (2, 5)
    assert np.all(np.diff(scores, axis=-1) <= 0)
    sim = build_model(teacher_config(SIMILARITY), 0)
    b2, _ = rank_proposals(sim.cfg, sim(z, x), 3, fixed_wh=np.array([[10.0, 12.0], [8.0, 8.0]]))
    np.testing.assert_array_equal(b2[0, :, 2:], [[10.0, 12.0]] * 3)
    with pytest.raises(ValidationError):
        rank_proposals(m.cfg, out, 0)

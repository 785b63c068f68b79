import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from astra.core import (
    AblationFlags,
    ContractError,
    GroundTruthAction,
    MatchAnnotations,
    PipelineConfig,
    PredictionGrid,
    TargetGrid,
    anchor_time,
    anchor_times,
    build_targets,
    validate_grid,
)
from oracles import targets_loop


def ann(*actions, duration=100.0):
    return MatchAnnotations("m", duration, tuple(GroundTruthAction(*a) for a in actions))


def test_anchor_time_examples():
    cfg = PipelineConfig()
    assert anchor_time(0, cfg) == 0.25
    assert anchor_time(99, cfg) == 49.75
    assert anchor_time(0, cfg.replace(l_out=50)) == 0.5
    with pytest.raises(ContractError):
        anchor_time(100, cfg)
    with pytest.raises(ContractError):
        anchor_time(-1, cfg)


def test_anchor_times_strictly_increasing_inside_clip():
    for l_out in (1, 7, 50, 100, 333):
        a = anchor_times(PipelineConfig(l_out=l_out))
        assert np.all(np.diff(a) > 0) and a[0] > 0 and a[-1] < 50


def test_build_targets_single_action():
    cfg = PipelineConfig()
    g = build_targets(ann((3, 10.0)), 0.0, cfg)
    tau = anchor_times(cfg)
    pos = (tau >= 8.0) & (tau <= 12.0)
    assert np.array_equal(g.scores[:, 3] == 1, pos)
    t = int(np.flatnonzero(tau == 9.75)[0])
    assert g.displacement_mask[t, 3] and g.displacements[t, 3] == pytest.approx(0.25)
    # tau = 9.5 is not an anchor at L_out=100; at L_out=50 it is (anchor 9)
    g50 = build_targets(ann((3, 10.0)), 0.0, cfg.replace(l_out=50))
    assert anchor_times(cfg.replace(l_out=50))[9] == 9.5
    assert g50.displacement_mask[9, 3] and g50.displacements[9, 3] == 0.5


def test_build_targets_empty_window():
    cfg = PipelineConfig()
    g = build_targets(ann((1, 90.0)), 0.0, cfg)
    assert np.all(g.scores[:, -1] == 1) and np.all(g.scores[:, :-1] == 0)
    assert not g.displacement_mask.any()


def test_tie_goes_to_earlier_action():
    cfg = PipelineConfig(l_out=50)
    # anchor 9 sits at 9.5; actions at 8.5 and 10.5 are equidistant
    g = build_targets(ann((0, 8.5), (0, 10.5)), 0.0, cfg)
    assert g.displacements[9, 0] == -1.0


actions_st = st.lists(
    st.tuples(st.integers(0, 3), st.floats(0, 120, allow_nan=False).map(lambda x: round(x, 2))),
    max_size=12,
)


@settings(max_examples=60, deadline=None)
@given(actions_st, st.integers(0, 70), st.sampled_from([(2.0, 3.0), (1.0, 1.0), (3.0, 6.0)]))
def test_build_targets_matches_loop_oracle(actions, start, radii):
    cfg = PipelineConfig(num_classes=4, r_c=radii[0], r_d=radii[1])
    g = build_targets(ann(*actions, duration=130.0), float(start), cfg)
    s, d, m = targets_loop(actions, start, 50, 100, 4, *radii)
    assert np.array_equal(g.scores, s)
    assert np.array_equal(g.displacement_mask, m)
    np.testing.assert_allclose(g.displacements, d, atol=1e-12)
    assert validate_grid(g, cfg) == []


@settings(max_examples=40, deadline=None)
@given(actions_st, st.integers(0, 50), st.integers(-20, 20))
def test_translation_equivariance(actions, start, shift):
    cfg = PipelineConfig(num_classes=4)
    moved = [(c, t + shift + 20) for c, t in actions]
    a = build_targets(ann(*actions, duration=200.0), float(start), cfg)
    b = build_targets(ann(*moved, duration=200.0), float(start + shift + 20), cfg)
    assert np.array_equal(a.scores, b.scores)
    assert np.array_equal(a.displacement_mask, b.displacement_mask)
    np.testing.assert_allclose(a.displacements, b.displacements, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(actions_st, st.integers(0, 70))
def test_refined_anchor_lands_on_ground_truth(actions, start):
    cfg = PipelineConfig(num_classes=4)
    g = build_targets(ann(*actions, duration=130.0), float(start), cfg)
    tau = start + anchor_times(cfg)
    for t, c in zip(*np.nonzero(g.displacement_mask)):
        assert abs(g.displacements[t, c]) <= cfg.r_d
        landed = tau[t] + g.displacements[t, c]
        assert min(abs(landed - a) for cc, a in actions if cc == c) < 1e-9


def test_every_action_in_clip_has_a_positive_anchor():
    cfg = PipelineConfig()
    for t in np.linspace(0, 49.99, 211):
        g = build_targets(ann((2, float(t))), 0.0, cfg)
        assert g.scores[:, 2].max() == 1


def test_validate_grid_violations():
    cfg = PipelineConfig(num_classes=2, l_out=4)
    shape = (4, 3)
    ok = build_targets(ann((0, 10.0)), 0.0, cfg)
    assert validate_grid(ok, cfg) == []
    pred = PredictionGrid(np.full(shape, 0.5), np.zeros(shape), np.ones(shape))
    assert validate_grid(pred, cfg) == []
    bad_var = PredictionGrid(np.full(shape, 0.5), np.zeros(shape), np.zeros(shape))
    assert "non-positive variance" in validate_grid(bad_var, cfg)
    mask = np.zeros(shape, bool)
    mask[0, 0] = True
    disp = np.zeros(shape)
    disp[0, 0] = 5.0
    s = np.zeros(shape)
    s[:, 2] = 1
    bad_disp = TargetGrid(s, disp, mask)
    assert "displacement exceeds radius" in validate_grid(bad_disp, cfg)
    bg = TargetGrid(s, np.zeros(shape), np.eye(4, 3, 2, dtype=bool))
    assert any("background" in v for v in validate_grid(bg, cfg))


def test_config_defaults_and_validation():
    cfg = PipelineConfig()
    assert (cfg.clip_seconds, cfg.d_model, cfg.output_length, cfg.num_classes) == (50, 512, 100, 17)
    assert len(cfg.stream_specs()) == 6 and cfg.audio_tokens == 52
    assert cfg.stream_specs()[-1].seconds_per_token == 0.96
    for bad in (dict(r_c=4.0), dict(dropout=1.5), dict(gamma=-1.0), dict(alpha_l=2.0), dict(l_out=0)):
        with pytest.raises(ContractError):
            cfg.replace(**bad).validate()
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractError):
        PipelineConfig.from_dict({"bogus": 1})


def test_ablation_presets():
    m0, m9 = AblationFlags.preset("M0"), AblationFlags.preset("M9")
    assert (m0.use_audio, m0.use_focal, m0.use_uncertainty, m0.mixup, m0.use_hierarchical_encoder) == (
        False, False, False, "none", False,
    )
    assert (m0.r_c, m0.r_d) == (3.0, 6.0)
    assert m9 == AblationFlags(r_c=2.0, r_d=3.0)
    assert AblationFlags.preset("M6").l_out_factor == 1
    cfg = AblationFlags.preset("M3").apply(PipelineConfig())
    assert (cfg.mixup, cfg.mixup_alpha, cfg.mixup_beta) == ("plain", 0.6, 0.6)
    cfg0 = m0.apply(PipelineConfig())
    assert cfg0.gamma == 0 and not cfg0.use_audio and cfg0.p_td == 0 and cfg0.p_ts == 0
    for name in [f"M{i}" for i in range(10)]:
        flags = AblationFlags.preset(name)
        assert AblationFlags.from_dict(flags.to_dict()) == flags
    with pytest.raises(ContractError):
        AblationFlags.preset("M10")


def test_annotations_sorted_and_validated():
    a = ann((1, 5.0), (0, 2.0))
    assert [x.time_s for x in a.actions] == [2.0, 5.0]
    assert MatchAnnotations.from_dict(a.to_dict()) == a
    with pytest.raises(ContractError):
        a.validate(num_classes=1)
    with pytest.raises(ContractError):
        ann((0, 150.0)).validate(num_classes=2)

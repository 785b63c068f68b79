import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from astra.core import ContractError, Detection, PredictionGrid, anchor_times
from astra.inference import (
    apply_soft_nms,
    detect_dataset,
    ensemble_average,
    export_detections,
    export_detections_dir,
    grids_to_spots,
    load_detections,
    load_detections_dir,
    predict_windows,
    soft_nms_1d,
)
from astra.model import build_model
from conftest import small_config, tiny_config
from oracles import soft_nms_loop


def grid(cfg, fill=0.0):
    shape = (cfg.output_length, cfg.num_classes + 1)
    return PredictionGrid(np.full(shape, fill), np.zeros(shape), np.ones(shape))


def test_soft_nms_examples():
    assert soft_nms_1d([3.0], [0.7], 5.0).tolist() == [0.7]
    out = soft_nms_1d([10.0, 10.0], [0.9, 0.8], 5.0, 0.5)
    assert out[0] == 0.9 and out[1] == pytest.approx(0.8 * math.exp(-2), abs=1e-12)
    assert round(out[1], 4) == 0.1083
    assert soft_nms_1d([0.0, 20.0], [0.9, 0.8], 5.0).tolist() == [0.9, 0.8]


def test_soft_nms_closer_decays_more():
    out = soft_nms_1d([0.0, 1.0, 4.0], [0.9, 0.5, 0.5], 5.0)
    assert out[1] < out[2] < 0.5


spots_st = st.lists(st.tuples(st.floats(0, 60).map(lambda x: round(x, 1)), st.floats(0.01, 1)),
                    min_size=1, max_size=25)


@settings(max_examples=60, deadline=None)
@given(spots_st, st.randoms(use_true_random=False))
def test_soft_nms_oracle_and_permutation_invariance(spots, rnd):
    times = [s[0] for s in spots]
    conf = [s[1] for s in spots]
    out = soft_nms_1d(times, conf, 6.0, 0.5)
    assert len(out) == len(spots)
    np.testing.assert_allclose(out, soft_nms_loop(times, conf, 6.0, 0.5), rtol=1e-12)
    perm = list(range(len(spots)))
    rnd.shuffle(perm)
    out_p = soft_nms_1d([times[i] for i in perm], [conf[i] for i in perm], 6.0, 0.5)
    a = sorted(zip(times, out.tolist()))
    b = sorted(zip([times[i] for i in perm], out_p.tolist()))
    assert len(a) == len(b)
    for (ta, ca), (tb, cb) in zip(a, b):
        assert ta == tb and ca == pytest.approx(cb, rel=1e-12)
    assert np.all(out <= np.asarray(conf) + 1e-15)


def test_apply_soft_nms_is_per_class():
    from astra.inference import RawSpot

    cfg = tiny_config()
    spots = [RawSpot(0, 1.0, 1.0, 0.9), RawSpot(1, 1.0, 1.0, 0.8), RawSpot(0, 1.0, 1.0, 0.5)]
    dets = apply_soft_nms(spots, cfg)
    assert len(dets) == 3
    assert Detection(1, 1.0, 0.8) in dets


def test_grids_to_spots_refinement_and_clamp():
    cfg = tiny_config(clip_seconds=10, l_out=10, r_d=1.5, score_floor=0.01)
    g = grid(cfg)
    g.scores[3, 1] = 0.9
    g.means[3, 1] = 0.7
    g.scores[5, 0] = 0.6
    g.means[5, 0] = 9.0  # clamped to r_d
    g.scores[0, cfg.num_classes] = 1.0  # background is dropped
    spots = grids_to_spots([(20.0, g)], cfg, 100.0)
    by_class = {s.class_id: s for s in spots}
    assert len(spots) == 2
    assert by_class[1].time_s == pytest.approx(20 + anchor_times(cfg)[3] + 0.7)
    assert by_class[0].time_s == pytest.approx(20 + anchor_times(cfg)[5] + 1.5)
    plain = {s.class_id: s for s in grids_to_spots([(20.0, g)], cfg, 100.0, refine=False)}
    assert plain[1].time_s == plain[1].anchor_s == pytest.approx(20 + anchor_times(cfg)[3])


def test_grids_to_spots_score_floor():
    cfg = tiny_config(score_floor=0.05)
    g = grid(cfg, 0.04)
    assert grids_to_spots([(0.0, g)], cfg, 10.0) == []


def test_ensemble_average():
    cfg = tiny_config()
    a, b = grid(cfg, 0.2), grid(cfg, 0.6)
    assert ensemble_average([a]) is a
    assert np.allclose(ensemble_average([a, b]).scores, 0.4)
    with pytest.raises(ContractError):
        ensemble_average([a, grid(cfg.replace(l_out=4))])
    with pytest.raises(ContractError):
        ensemble_average([])


def test_export_round_trip(tmp_path):
    dets = [Detection(2, 30.25, 0.125), Detection(0, 3.1, 0.9), Detection(1, 3.1, 1 / 3)]
    export_detections(dets, tmp_path / "a.json")
    back = load_detections(tmp_path / "a.json")
    assert back == sorted(dets, key=lambda d: (d.time_s, d.class_id, d.confidence))
    export_detections([], tmp_path / "e.json")
    assert (tmp_path / "e.json").read_text() == "[]"
    export_detections_dir({"x": dets}, tmp_path / "dir")
    assert load_detections_dir(tmp_path / "dir") == {"x": back}
    with pytest.raises(OSError, match="cannot read"):
        load_detections(tmp_path / "missing.json")


def test_windows_cover_timeline_and_untrained_smoke(small_dataset):
    cfg = small_dataset.configure(small_config())
    model = build_model(cfg, 0)
    tid = small_dataset.timelines("test")[0]
    tl = small_dataset.embeddings[tid]
    windows = predict_windows(tl, model)
    starts = [s for s, _ in windows]
    assert starts[0] == 0 and starts[-1] + cfg.clip_seconds >= tl.duration_s
    assert np.all(np.diff(starts) == cfg.clip_seconds / 2)
    dets = detect_dataset(small_dataset, model, [tid])[tid]
    assert dets and all(0 <= d.time_s <= tl.duration_s for d in dets)
    assert all(d.class_id < cfg.num_classes for d in dets)
    # threaded and sequential runs agree
    assert detect_dataset(small_dataset, model, [tid], num_workers=2)[tid] == dets


def test_ensemble_of_identical_models_matches_single(small_dataset):
    cfg = small_dataset.configure(small_config())
    model = build_model(cfg, 0)
    tid = small_dataset.timelines("test")[0]
    single = detect_dataset(small_dataset, model, [tid])[tid]
    pair = detect_dataset(small_dataset, [model, build_model(cfg, 0)], [tid])[tid]
    assert len(single) == len(pair)
    for a, b in zip(single, pair):
        assert a.class_id == b.class_id and a.time_s == pytest.approx(b.time_s)
        assert a.confidence == pytest.approx(b.confidence, rel=1e-6)

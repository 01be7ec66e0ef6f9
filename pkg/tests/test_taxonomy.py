import json

import numpy as np
import pytest

from oracles import concept_traces, noisy_recovery_rate, suite_channels
from tsinterp.actstore import ShardWriter, read_shard
from tsinterp.forecaster import HookSite
from tsinterp.sae import SaeConfig, train_sae
from tsinterp.series import gen_chirp, gen_trend
from tsinterp.taxonomy import (
    CHANNELS,
    CONCEPTS,
    LABELS,
    UNKNOWN,
    TaxonomyError,
    TaxonomyReport,
    channel_matrix,
    classify,
    classify_all,
    counts_csv,
    feature_trace,
    pretty_table,
    taxonomy_report,
    write_profiles_csv,
    write_summary_json,
)


@pytest.fixture(scope="module")
def chans():
    return suite_channels()


def test_channel_matrix_shape(chans):
    suite, manifest, mat = chans
    assert mat.shape == (len(CHANNELS), sum(m["count"] for m in manifest))
    assert np.all(np.isfinite(mat))
    assert set(np.unique(mat[CHANNELS.index("level_shift")])) <= {-1.0, 0.0, 1.0}


def test_self_recovery_all_ten_concepts(chans):
    _, _, mat = chans
    pairs = concept_traces(mat)
    assert sorted({label for label, _ in pairs}) == sorted(CONCEPTS)
    for label, trace in pairs:
        p = classify(trace, mat)
        assert p.best_label == label
        assert abs(p.best_score) == pytest.approx(1.0, abs=1e-12)


def test_sign_rule(chans):
    _, _, mat = chans
    trend = mat[CHANNELS.index("trend")]
    assert classify(-trend, mat).best_label == "trend_down"
    assert classify(trend, mat).best_label == "trend_up"
    assert classify(-trend, mat).best_score < 0


def test_scale_and_shift_invariance(chans):
    _, _, mat = chans
    rng = np.random.default_rng(0)
    trace = mat[1] + rng.normal(size=mat.shape[1])
    a = classify(trace, mat)
    b = classify(3.7 * trace + 11.0, mat)
    np.testing.assert_allclose(a.r, b.r, atol=1e-12)
    assert a.best_label == b.best_label


def test_zero_variance_trace_is_unknown(chans):
    _, _, mat = chans
    p = classify(np.full(mat.shape[1], 2.5), mat)
    assert p.best_label == UNKNOWN and p.best_score == 0.0
    assert not np.any(np.isnan(p.r))


def test_below_threshold_is_unknown(chans):
    _, _, mat = chans
    rng = np.random.default_rng(1)
    p = classify(rng.normal(size=mat.shape[1]), mat, r_threshold=0.5)
    assert p.best_label == UNKNOWN


def test_length_mismatch(chans):
    _, _, mat = chans
    with pytest.raises(TaxonomyError):
        classify(np.ones(3), mat)


def test_noisy_recovery_monte_carlo(chans):
    _, _, mat = chans
    assert noisy_recovery_rate(mat, trials=300) >= 0.95


def test_channel_examples():
    up = gen_trend(200, 0.01, level=1.0, name="up")
    man = [{"window": "up@10", "count": 50}]
    mat = channel_matrix([up], man, True, 50)
    assert np.all(mat[CHANNELS.index("trend")] > 0)
    chirp = gen_chirp(300, 0.01, 0.2, name="ch")
    mat = channel_matrix([chirp], [{"window": "ch@0", "count": 300}], True, 50)
    assert np.all(np.diff(mat[CHANNELS.index("frequency")]) > 0)


def test_decoder_alignment_uses_target_segment():
    s = gen_trend(100, 0.01, name="t")
    s.channels.trend_slope = np.arange(100, dtype=float)
    enc = channel_matrix([s], [{"window": "t@5", "count": 3}], True, 20)
    dec = channel_matrix([s], [{"window": "t@5", "count": 3}], False, 20)
    np.testing.assert_array_equal(enc[0], [5, 6, 7])
    np.testing.assert_array_equal(dec[0], [25, 26, 27])


def test_missing_channels_rejected():
    s = gen_trend(100, 0.01, name="t")
    s.channels = None
    with pytest.raises(TaxonomyError):
        channel_matrix([s], [{"window": "t@0", "count": 4}], True, 4)


def test_report_partition_and_outputs(chans, tmp_path):
    _, _, mat = chans
    rng = np.random.default_rng(2)
    traces = np.vstack([t for _, t in concept_traces(mat)] + [rng.normal(size=(5, mat.shape[1])), np.zeros((1, mat.shape[1]))])
    profiles = classify_all(traces, mat)
    rep = taxonomy_report(profiles, "enc1")
    assert sum(rep.counts.values()) == len(traces)
    assert rep.counts[UNKNOWN] == 6 and rep.labeled == 10
    assert rep.counts["seasonality"] == 1
    write_profiles_csv(profiles, "enc1", tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert len(lines) == len(traces) + 1 and len(lines[0].split(",")) == 4 + len(CONCEPTS)
    write_summary_json(rep, tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text())["labeled"] == 10
    assert counts_csv([rep]).splitlines()[0] == "concept,enc1"


def test_pretty_table_masks_small_counts():
    counts = {label: 0 for label in LABELS}
    counts["trend_up"], counts["trend_down"] = 9, 10
    table = pretty_table([TaxonomyReport("enc3", counts, 19)])
    rows = {line.split()[0]: line.split()[1] for line in table.splitlines()[1:-1]}
    assert rows["trend_up"] == "--" and rows["trend_down"] == "10"
    assert "9" in counts_csv([TaxonomyReport("enc3", counts, 19)])


def test_feature_trace_rows_match_shard(tmp_path):
    rng = np.random.default_rng(3)
    site = HookSite.parse("enc0")
    X = rng.normal(size=(300, 8)).astype(np.float32)
    with ShardWriter(tmp_path / "a.tsac", site, 8) as w:
        w.append(X, "x@0")
    shard = read_shard(tmp_path / "a.tsac")
    sae, _ = train_sae(X, SaeConfig(d_sae=16, k=3, steps=50, batch=64, seed=0), site)
    tr = feature_trace(sae, shard)
    assert tr.shape == (16, 300)
    assert np.all((tr != 0).sum(axis=0) <= 3)
    with pytest.raises(TaxonomyError):
        feature_trace(sae, type(shard)(**{**shard.__dict__, "site": HookSite.parse("enc1")}))

"""Attention-trace normalization, constancy, and CSV stability."""

import numpy as np
import pytest

from semcond import analysis
from semcond import connector as cn
from semcond import toyworld as tw

CFG = cn.ConnectorConfig(d_llm=128, d=16, n_latents=4, blocks=2, heads=2,
                         ffn_mult=2, d_t=8, max_tokens=48, timesteps=50)


@pytest.fixture(scope="module")
def text():
    llm = tw.PseudoLLM()
    toks, _ = tw.scene_to_prompt(tw.sample_scene(12))
    return llm.encode(toks)


def test_plain_resampler_relative_all_ones(text):
    conn = cn.init_connector(CFG, cn.Variant.RESAMPLER, seed=0)
    trace = analysis.trace_attention(conn, text, analysis.default_timestep_grid(50, 10))
    assert np.allclose(trace.relative, 1.0)


def test_relative_rows_peak_at_one(text):
    rng = np.random.default_rng(0)
    conn = cn.init_connector(CFG, cn.Variant.RESAMPLER_ADALN, seed=1)
    for name, p in conn.params.items():
        if "adaln" in name:
            p.data = rng.normal(0, 0.3, p.data.shape).astype(np.float32)
    trace = analysis.trace_attention(conn, text, [0, 10, 25, 49])
    assert trace.raw.shape == (len(text), 4)
    assert np.allclose(trace.relative.max(axis=1), 1.0)
    assert (trace.relative > 0).all() and (trace.relative <= 1.0).all()


def test_trace_is_pure_observation(text):
    conn = cn.init_connector(CFG, cn.Variant.RESAMPLER_ADALN, seed=2)
    before = cn.connector_forward(conn, text, t=5).data
    analysis.trace_attention(conn, text, [0, 20, 40])
    after = cn.connector_forward(conn, text, t=5).data
    assert np.array_equal(before, after)


def test_trace_rejects_mlp(text):
    conn = cn.init_connector(CFG, cn.Variant.MLP, seed=3)
    with pytest.raises(cn.UnsupportedVariant):
        analysis.trace_attention(conn, text, [0, 1])


def test_trace_rejects_bad_grid(text):
    conn = cn.init_connector(CFG, cn.Variant.RESAMPLER, seed=4)
    with pytest.raises(ValueError):
        analysis.trace_attention(conn, text, [])
    with pytest.raises(ValueError):
        analysis.trace_attention(conn, text, [50])


def test_default_grid():
    grid = analysis.default_timestep_grid(100, 10)
    assert len(grid) == 10
    assert grid[0] == 0 and grid[-1] == 99
    assert grid == sorted(grid)


def test_csv_round_trip_and_stability(tmp_path, text):
    conn = cn.init_connector(CFG, cn.Variant.RESAMPLER_ADALN, seed=5)
    trace = analysis.trace_attention(conn, text, [0, 25, 49])
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    analysis.emit_trace_csv(trace, p1)
    analysis.emit_trace_csv(trace, p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = analysis.read_trace_csv(p1)
    assert back.timesteps == trace.timesteps
    assert np.array_equal(back.raw, trace.raw)
    assert np.array_equal(back.relative, trace.relative)
    meta = (tmp_path / "a.csv.meta.json").read_text()
    assert "blocks" in meta and "queries" in meta

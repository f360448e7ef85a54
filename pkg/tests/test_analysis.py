import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerswap.analysis import (
    HeatmapGrid,
    PRESET_THRESHOLDS,
    UndefinedWeightError,
    delta_row_mavs,
    expert_weight,
    export_heatmap,
    fill_color,
    heatmap,
    heatmap_csv,
    heatmap_from_json,
    heatmap_json,
    heatmap_svg,
    percentile_threshold,
)
from layerswap.checkpoint import Checkpoint, CompatibilityError
from layerswap.topology import GRID_KINDS, ParamKind

from conftest import fixture_triple
from oracles import aggregate_loop, row_mavs_loop


def shifted(ckpt: Checkpoint, fn) -> Checkpoint:
    return Checkpoint.from_arrays({k: fn(k, v) for k, v in ckpt.to_arrays().items()})


def test_zero_delta(tiny):
    stats = delta_row_mavs(tiny["pre"], tiny["pre"])
    assert stats.aggregate == 0.0
    assert all((t.values == 0).all() for t in stats.tensors.values())


def test_hand_example():
    pre = Checkpoint.from_arrays({"w": np.zeros((2, 3))})
    ft = Checkpoint.from_arrays({"w": np.array([[1, -2, 3], [0, 0, 0]])})
    np.testing.assert_array_equal(delta_row_mavs(pre, ft).tensors["w"].values, [2.0, 0.0])


def test_rank1_gives_one_value_and_rank3_is_skipped():
    pre = Checkpoint.from_arrays({"v": np.zeros(4), "cube": np.zeros((2, 2, 2))})
    ft = Checkpoint.from_arrays({"v": np.array([1, -1, 1, -1]), "cube": np.ones((2, 2, 2))})
    stats = delta_row_mavs(pre, ft)
    np.testing.assert_array_equal(stats.tensors["v"].values, [1.0])
    assert stats.skipped == ["cube"]


def test_incompatible():
    with pytest.raises(CompatibilityError):
        delta_row_mavs(Checkpoint.from_arrays({"a": np.zeros(2)}), Checkpoint.from_arrays({"b": np.zeros(2)}))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_row_mavs_match_loop_oracle(seed):
    fx = fixture_triple(seed=seed)
    stats = delta_row_mavs(fx["pre"], fx["task"])
    for name, t in stats.tensors.items():
        want = row_mavs_loop(fx["pre"][name].to_f32(), fx["task"][name].to_f32())
        np.testing.assert_allclose(t.values, want, rtol=1e-6, atol=0)


def test_aggregate_recomputes_from_parts(tiny):
    stats = delta_row_mavs(tiny["pre"], tiny["lang"])
    total = sum(float(v) for t in stats.tensors.values() for v in t.values)
    assert stats.aggregate == pytest.approx(total / stats.total_rows, rel=1e-12)


def test_expert_weight_constant_magnitude():
    rng = np.random.default_rng(3)
    pre = Checkpoint.from_arrays({"a": rng.normal(size=(4, 5)), "b": rng.normal(size=7)})
    arr = pre.to_arrays()
    ft = Checkpoint.from_arrays({k: v + 0.25 * np.sign(rng.normal(size=v.shape)) for k, v in arr.items()})
    # differences are exact only up to float32 rounding of the shifted values
    assert expert_weight(delta_row_mavs(pre, ft)) == pytest.approx(4.0, rel=1e-6)


def test_expert_weight_identical_errors(tiny):
    with pytest.raises(UndefinedWeightError):
        expert_weight(delta_row_mavs(tiny["pre"], tiny["pre"]))


def test_expert_weight_matches_oracle(tiny):
    pre, ft = tiny["pre"], tiny["task"]
    agg = aggregate_loop((pre[n].to_f32(), ft[n].to_f32()) for n in pre)
    assert expert_weight(delta_row_mavs(pre, ft)) == pytest.approx(1 / agg, rel=1e-6)


@settings(max_examples=20, deadline=None)
@given(s=st.sampled_from([0.5, 2.0, 4.0, 0.125]), seed=st.integers(0, 1000))
def test_scale_equivariance(s, seed):
    rng = np.random.default_rng(seed)
    pre = Checkpoint.from_arrays({"w": np.zeros((3, 5)), "v": np.zeros(4)})
    deltas = {"w": rng.normal(size=(3, 5)), "v": rng.normal(size=4)}
    a = delta_row_mavs(pre, Checkpoint.from_arrays(deltas))
    b = delta_row_mavs(pre, Checkpoint.from_arrays({k: s * v for k, v in deltas.items()}))
    for name in a.tensors:
        np.testing.assert_allclose(b.tensors[name].values, s * a.tensors[name].values, rtol=1e-6)
    assert expert_weight(b) == pytest.approx(expert_weight(a) / s, rel=1e-6)


class TestHeatmap:
    def test_zero_deltas(self, tiny):
        grid = heatmap(delta_row_mavs(tiny["pre"], tiny["pre"]), 1e-6, 4)
        assert len(grid.cells) == 28 and set(grid.cells.values()) == {0.0}
        assert grid.missing == []

    def test_all_above(self, tiny):
        grid = heatmap(delta_row_mavs(tiny["pre"], shifted(tiny["pre"], lambda k, v: v + 1.0)), 0.5, 4)
        assert set(grid.cells.values()) == {1.0}

    def test_strict_threshold(self):
        pre = Checkpoint.from_arrays({"model.layers.0.self_attn.q_proj.weight": np.zeros((2, 2))})
        ft = Checkpoint.from_arrays({"model.layers.0.self_attn.q_proj.weight": np.array([[0.5, 0.5], [1, 1]])})
        stats = delta_row_mavs(pre, ft)
        assert heatmap(stats, 0.5, 1).cells[(0, ParamKind.ATTN_Q)] == 0.5
        assert len(heatmap(stats, 0.5, 1).missing) == 6

    def test_presets(self):
        assert PRESET_THRESHOLDS == {"lang": 1.9e-5, "math": 1.0e-5}

    def test_negative_threshold(self, tiny):
        with pytest.raises(ValueError):
            heatmap(delta_row_mavs(tiny["pre"], tiny["task"]), -1.0, 4)

    def test_monotone_in_threshold(self, tiny):
        stats = delta_row_mavs(tiny["pre"], tiny["lang"])
        taus = np.linspace(0, 2 * stats.all_values().max(), 10)
        mats = [heatmap(stats, t, 4).matrix() for t in taus]
        for lo, hi in zip(mats, mats[1:]):
            assert (hi <= lo).all()

    def test_percentile(self, tiny):
        stats = delta_row_mavs(tiny["pre"], tiny["lang"])
        assert percentile_threshold(stats, 100) == stats.all_values().max()
        with pytest.raises(ValueError):
            percentile_threshold(stats, 101)


class TestExport:
    def grid(self, value=0.0, layers=4):
        cells = {(l, k): value for l in range(layers) for k in GRID_KINDS}
        return HeatmapGrid(layers, 1e-5, cells, [])

    def test_csv_zero_grid(self):
        lines = heatmap_csv(self.grid()).splitlines()
        assert lines[0] == "layer,Wq,Wk,Wv,Wo,W1,W3,W2"
        assert len(lines) == 5
        assert [l.split(",")[0] for l in lines[1:]] == ["3", "2", "1", "0"]
        assert all(l.split(",")[1:] == ["0.000000"] * 7 for l in lines[1:])

    def test_json_round_trip(self, tiny, tmp_path):
        grid = heatmap(delta_row_mavs(tiny["pre"], tiny["task"]), 5e-4, 4)
        assert heatmap_from_json(heatmap_json(grid)) == grid
        export_heatmap(grid, "json", tmp_path / "g.json")
        doc = json.loads((tmp_path / "g.json").read_text())
        assert doc["L"] == 4 and len(doc["cells"]) == 28

    def test_color_ramp_monotone(self):
        darkness = [sum(int(fill_color(v)[i : i + 2], 16) for i in (1, 3, 5)) for v in (0, 0.5, 1)]
        assert len({fill_color(v) for v in (0, 0.5, 1)}) == 3
        assert darkness[0] > darkness[1] > darkness[2]

    def test_svg(self, tmp_path):
        grid = self.grid()
        grid.cells[(0, ParamKind.ATTN_Q)] = 1.0
        del grid.cells[(3, ParamKind.FFN_W2)]
        grid.missing.append((3, ParamKind.FFN_W2))
        svg = heatmap_svg(grid)
        assert svg.count("<rect") == 28
        assert "data-missing" in svg and "href" not in svg
        # layer 0 is drawn lowest
        y0 = float(svg.split('data-layer="0"')[0].rsplit('y="', 1)[1].split('"')[0])
        y3 = float(svg.split('data-layer="3"')[0].rsplit('y="', 1)[1].split('"')[0])
        assert y0 > y3

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            export_heatmap(self.grid(), "png", tmp_path / "x")

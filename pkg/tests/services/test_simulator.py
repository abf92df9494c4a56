"""投機実行シミュレータのテスト"""

import json
import random
from pathlib import Path

import pytest

from src.models.microarch import CacheState, MicroConfig, PredictorKind, PredictorState
from src.models.program import MachineState
from src.services.assembler import parse_program
from src.services.refinement import RefinementSpec, apply_refinement
from src.services.simulator import (
    apply_eviction_noise, dump_cache, get_profile, load_profiles, make_cache_configs, probe_cache, run,
    train_predictor,
)
from src.utils.exceptions import ConfigurationError, MachineFault

FENCED_SOURCE = """\
.addrspace 8192
.word A_size 16
.array A 16
.array B 4096
.public r0
      load r3, [A_size]
      cmp r0, r3
      b.ge Lend
      fence
      load r4, [r0+A]
Lend: halt
"""


def _oob_state(program, index=100, secret=9):
    """範囲外の添字と、その先の秘密の値"""
    return MachineState.create(program, {0: index}, {16 + index: secret})


# ---------------------------
# 一時的な実行
# ---------------------------
class TestTransientWindow:
    """誤予測された分岐の後の一時ロード"""

    def test_long_window_installs_both_loads(self, kocher_program, mispredicting):
        result = run(kocher_program, _oob_state(kocher_program), CacheState.empty(mispredicting.cache),
                     None, mispredicting)
        assert result.mispredictions == 1
        assert result.transient_addresses == [116, 32 + (9 << 4)]
        assert all(load.installed for load in result.transient_loads)
        assert result.cache.contains(32 + (9 << 4))

    def test_architectural_state_is_unchanged(self, kocher_program, mispredicting):
        result = run(kocher_program, _oob_state(kocher_program), CacheState.empty(mispredicting.cache),
                     None, mispredicting)
        assert result.state.registers[4] == 0
        assert result.state.registers[5] == 0
        assert result.committed_accesses == [0]

    def test_short_window_installs_nothing(self, kocher_program):
        cfg = MicroConfig(window=12, predictor=PredictorKind.ALWAYS_MISPREDICT)
        result = run(kocher_program, _oob_state(kocher_program), CacheState.empty(cfg.cache), None, cfg)
        assert result.mispredictions == 1
        assert result.transient_loads == []

    def test_out_of_range_transient_load_is_suppressed(self, kocher_program, mispredicting):
        state = MachineState.create(kocher_program, {0: 10000})
        result = run(kocher_program, state, CacheState.empty(mispredicting.cache), None, mispredicting)
        assert result.suppressed == [10016]

    def test_fence_stops_window(self, mispredicting):
        program = parse_program(FENCED_SOURCE)
        result = run(program, _oob_state(program), CacheState.empty(mispredicting.cache), None, mispredicting)
        assert result.mispredictions == 1
        assert result.transient_loads == []

    def test_correct_prediction_opens_no_window(self, kocher_program):
        cfg = MicroConfig(window=64, predictor=PredictorKind.ALWAYS_CORRECT)
        result = run(kocher_program, _oob_state(kocher_program), CacheState.empty(cfg.cache), None, cfg)
        assert result.mispredictions == 0
        assert result.transient_loads == []


def test_cycle_count_in_bounds(kocher_program):
    cfg = MicroConfig(window=64, predictor=PredictorKind.ALWAYS_CORRECT)
    state = MachineState.create(kocher_program, {0: 3}, {19: 2})
    result = run(kocher_program, state, CacheState.empty(cfg.cache), None, cfg)
    # 7命令と3回のミス
    assert result.cycles == 7 + 3 * cfg.miss_penalty
    assert result.committed_accesses == [0, 19, 64]


def test_run_does_not_mutate_inputs(kocher_program, mispredicting):
    state = _oob_state(kocher_program)
    cache = CacheState.empty(mispredicting.cache)
    predictor = PredictorState(PredictorKind.TWO_BIT)
    run(kocher_program, state, cache, predictor, mispredicting)
    assert state.pc == 0
    assert cache.lines() == set()
    assert predictor.counter(2) == PredictorState(PredictorKind.TWO_BIT).counter(2)


def test_committed_out_of_range_access_faults(longwin):
    program = parse_program(".addrspace 64\n.array A 16\nload r1, [r0+A]\nhalt\n")
    state = MachineState.create(program, {0: 1000})
    with pytest.raises(MachineFault):
        run(program, state, CacheState.empty(longwin.cache), None, longwin)


def test_shadow_programs_are_rejected(kocher_program, longwin):
    shadowed = apply_refinement(kocher_program, RefinementSpec(branches=(2,))).program
    with pytest.raises(ValueError):
        run(shadowed, MachineState.create(shadowed), CacheState.empty(longwin.cache), None, longwin)


# ---------------------------
# 予測器の訓練
# ---------------------------
def test_training_toward_taken_avoids_misprediction(kocher_program, longwin):
    taken = [MachineState.create(kocher_program, {0: 50}) for _ in range(2)]
    trained = train_predictor(kocher_program, taken, longwin)
    assert trained.counter(2) == 3
    result = run(kocher_program, _oob_state(kocher_program), CacheState.empty(longwin.cache), trained, longwin)
    assert result.mispredictions == 0


def test_training_toward_not_taken_opens_window(kocher_program, longwin):
    in_bounds = [MachineState.create(kocher_program, {0: 1}) for _ in range(3)]
    trained = train_predictor(kocher_program, in_bounds, longwin)
    assert trained.counter(2) == 0
    result = run(kocher_program, _oob_state(kocher_program), CacheState.empty(longwin.cache), trained, longwin)
    assert result.mispredictions == 1
    assert 32 + (9 << 4) in result.transient_addresses


def test_training_is_skipped_for_fixed_predictors(kocher_program, mispredicting):
    trained = train_predictor(kocher_program, [MachineState.create(kocher_program, {0: 50})], mispredicting)
    assert trained.kind == PredictorKind.ALWAYS_MISPREDICT
    assert trained.counters == {}


# ---------------------------
# キャッシュ構成
# ---------------------------
def _warm_cache(geometry):
    cache = CacheState.empty(geometry)
    for address in (0, 19, 64, 200, 512):
        cache.touch(address)
    return cache


def test_make_cache_configs(geometry):
    warm = _warm_cache(geometry)
    configs = make_cache_configs(warm, n=4, rng_seed=1)
    assert len(configs) == 4
    assert configs[0].lines() == set()
    for config in configs[1:]:
        assert config.lines() <= warm.lines()
    again = make_cache_configs(warm, n=4, rng_seed=1)
    assert [c.lines() for c in again] == [c.lines() for c in configs]


def test_make_cache_configs_needs_one(geometry):
    with pytest.raises(ValueError):
        make_cache_configs(CacheState.empty(geometry), n=0)


@pytest.mark.parametrize("probability, expected", [(0.0, 5), (1.0, 0)])
def test_eviction_noise_extremes(geometry, probability, expected):
    noisy = apply_eviction_noise(_warm_cache(geometry), probability, random.Random(0))
    assert len(probe_cache(noisy)) == expected


def test_dump_cache(geometry):
    cache = CacheState.empty(geometry)
    cache.touch(0x40)
    assert dump_cache(cache) == "set=4 tag=0 addr=0x40 prog=1"


# ---------------------------
# プロファイル
# ---------------------------
def test_default_profiles():
    profiles = load_profiles()
    assert profiles["longwin"].window == 64
    assert profiles["shortwin"].window == 12
    assert profiles["mispredict"].predictor == PredictorKind.ALWAYS_MISPREDICT
    assert get_profile("longwin-noisy").eviction_noise == 0.1


def test_unknown_profile():
    with pytest.raises(ConfigurationError) as exc:
        get_profile("tiny")
    assert exc.value.code == "unknown-profile"


@pytest.mark.parametrize("content", ["{not json", json.dumps({"bad": {"window": -1}})])
def test_invalid_profile_file(temp_data_dir, content):
    path = Path(temp_data_dir) / "profiles.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigurationError) as exc:
        load_profiles(str(path))
    assert exc.value.code == "invalid-config"

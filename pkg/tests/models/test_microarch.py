"""キャッシュ・予測器モデルのテスト"""

import pytest
from pydantic import ValidationError

from src.models.microarch import CacheGeometry, CacheState, MicroConfig, PredictorKind, PredictorState


# ---------------------------
# キャッシュ形状
# ---------------------------
def test_geometry_address_split(geometry):
    address = 0x1234
    assert geometry.line_number(address) == 0x123
    assert geometry.set_index(address) == 0x3
    assert geometry.tag(address) == 0x12
    assert geometry.line_address(0x3, 0x12) == 0x1230


@pytest.mark.parametrize("field, value", [("sets", 3), ("ways", 0), ("line_bytes", 2)])
def test_geometry_rejects_invalid_values(field, value):
    with pytest.raises(ValidationError):
        CacheGeometry(**{field: value})


@pytest.mark.parametrize("field, value", [("window", -1), ("base_latency", 0), ("eviction_noise", 1.5)])
def test_micro_config_validation(field, value):
    with pytest.raises(ValidationError):
        MicroConfig(**{field: value})


# ---------------------------
# LRU
# ---------------------------
def test_touch_reports_hit_and_miss(geometry):
    cache = CacheState.empty(geometry)
    assert cache.touch(0x100) is False
    assert cache.touch(0x104) is True
    assert cache.contains(0x10F)


def test_lru_evicts_least_recent(geometry):
    cache = CacheState.empty(geometry)
    stride = geometry.sets * geometry.line_bytes
    a, b, c = 0, stride, 2 * stride
    cache.touch(a)
    cache.touch(b)
    cache.touch(a)
    cache.touch(c)
    assert cache.contains(a)
    assert not cache.contains(b)
    assert cache.contains(c)


def test_lines_mark_owner(geometry):
    cache = CacheState.empty(geometry)
    cache.touch(0x20)
    cache.touch(0x40, by_program=False)
    assert cache.lines() == {(2, 0, True), (4, 0, False)}


def test_copy_and_equality(geometry):
    cache = CacheState.empty(geometry)
    cache.touch(0x20)
    clone = cache.copy()
    assert clone == cache
    clone.evict((2, 0))
    assert clone != cache
    assert cache.contains(0x20)


# ---------------------------
# 分岐予測器
# ---------------------------
def test_two_bit_counter_needs_two_updates():
    predictor = PredictorState()
    assert predictor.predict(5, True) is False
    predictor.update(5, True)
    assert predictor.predict(5, True) is True
    predictor.update(5, True)
    predictor.update(5, True)
    assert predictor.counter(5) == 3
    predictor.update(5, False)
    assert predictor.predict(5, False) is True


@pytest.mark.parametrize("kind, actual, expected", [
    (PredictorKind.ALWAYS_MISPREDICT, True, False),
    (PredictorKind.ALWAYS_MISPREDICT, False, True),
    (PredictorKind.ALWAYS_CORRECT, True, True),
])
def test_fixed_predictors(kind, actual, expected):
    assert PredictorState(kind).predict(0, actual) is expected


def test_predictor_copy_is_independent():
    predictor = PredictorState()
    clone = predictor.copy()
    clone.update(1, True)
    assert predictor.counter(1) == PredictorState.INITIAL

"""Delay pattern: staggering, exact inversion, text advance, emission steps."""

import numpy as np
import pytest

from octostream import DelayError, DelayPattern, TokenGrid, apply_delay, first_emission_step, revert_delay

PAD = -1


def test_default_offsets():
    p = DelayPattern()
    assert p.offsets == (0, 1, 2, 3, 4, 5, 6, 7)
    assert p.max_offset == 7


def test_text_must_lead():
    with pytest.raises(DelayError):
        DelayPattern((1, 2, 3))
    with pytest.raises(DelayError):
        DelayPattern((0, -1))
    with pytest.raises(DelayError):
        DelayPattern(())


def test_three_layer_hand_example():
    # layers staggered 0/1/2: column t of the source lands at t + offset
    grid = TokenGrid(np.array([[1, 2], [3, 4], [5, 6]]))
    out = apply_delay(grid, DelayPattern((0, 1, 2)), PAD)
    assert out.tokens.tolist() == [
        [1, 2, PAD, PAD],
        [PAD, 3, 4, PAD],
        [PAD, PAD, 5, 6],
    ]
    back = revert_delay(out, DelayPattern((0, 1, 2)), PAD)
    assert back == grid


def test_zero_pattern_is_identity():
    grid = TokenGrid(np.arange(24).reshape(8, 3))
    p = DelayPattern((0,) * 8)
    assert apply_delay(grid, p, PAD) == grid
    assert revert_delay(grid, p, PAD) == grid


def test_round_trip_random_grids():
    rng = np.random.default_rng(0)
    patterns = [
        DelayPattern(),
        DelayPattern((0,) * 8),
        DelayPattern((0, 2, 2, 3, 3, 4, 4, 9)),
    ]
    for i in range(1000):
        t = int(rng.integers(0, 65))
        grid = TokenGrid(rng.integers(0, 100, size=(8, t)))
        p = patterns[i % len(patterns)]
        assert revert_delay(apply_delay(grid, p, PAD), p, PAD) == grid


def test_round_trip_preserves_id_space():
    grid = TokenGrid(np.zeros((8, 3), dtype=np.int64), "global")
    p = DelayPattern()
    assert apply_delay(grid, p, PAD).id_space == "global"
    assert revert_delay(apply_delay(grid, p, PAD), p, PAD).id_space == "global"


def test_revert_rejects_nonpad_structural_cells():
    p = DelayPattern((0, 1, 2))
    grid = TokenGrid(np.zeros((3, 4), dtype=np.int64))
    with pytest.raises(DelayError, match="layer 0, step 2"):
        revert_delay(grid, p, PAD)
    # pad the layer-0 tail; the leading cell of layer 1 is then the offender
    grid.tokens[0, 2:] = PAD
    grid.tokens[2, :] = PAD
    with pytest.raises(DelayError, match="layer 1, step 0"):
        revert_delay(grid, p, PAD)


def test_revert_rejects_short_grids():
    p = DelayPattern((0, 1, 2))
    with pytest.raises(DelayError):
        revert_delay(TokenGrid(np.full((3, 1), PAD)), p, PAD)


def test_layer_count_mismatch():
    p = DelayPattern((0, 1))
    grid = TokenGrid(np.zeros((3, 4), dtype=np.int64))
    with pytest.raises(DelayError):
        apply_delay(grid, p, PAD)
    with pytest.raises(DelayError):
        revert_delay(grid, p, PAD)


def test_with_text_advance():
    p = DelayPattern((0, 1, 2)).with_text_advance(3)
    assert p.offsets == (0, 4, 5)
    with pytest.raises(DelayError):
        DelayPattern((0, 1)).with_text_advance(-1)


def test_first_emission_step():
    p = DelayPattern()
    assert first_emission_step(p, 0, 0) == 0
    assert first_emission_step(p, 5, 0) == 0
    for layer in range(1, 8):
        assert first_emission_step(p, 0, layer) == layer
        assert first_emission_step(p, 2, layer) == layer + 2
    with pytest.raises(DelayError):
        first_emission_step(p, 0, 8)


def test_apply_delay_width_law():
    rng = np.random.default_rng(1)
    for _ in range(100):
        offs = (0,) + tuple(int(v) for v in rng.integers(0, 10, size=7))
        t = int(rng.integers(0, 20))
        grid = TokenGrid(rng.integers(0, 8, size=(8, t)))
        out = apply_delay(grid, DelayPattern(offs), PAD)
        assert out.n_steps == t + max(offs)

import numpy as np
import pytest

from ddsam2.errors import ConfigError, PromptError
from ddsam2.metrics import dice
from ddsam2.rigid import RigidConfig, copy_track, ncc, rigid_track, search_order
from ddsam2.synthdata import GenConfig, gen_video, shift_mask


def translated_video(shifts, size=48, seed=0):
    """Crops of one large smooth texture, so every frame is an exact translation."""
    rng = np.random.default_rng(seed)
    big = rng.uniform(size=(size + 40, size + 40))
    k = np.ones(3) / 3
    big = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 0, big)
    big = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 1, big)
    frames = [big[20 - dy:20 - dy + size, 20 - dx:20 - dx + size] for dx, dy in shifts]
    mask = np.zeros((size, size), bool)
    mask[18:28, 15:30] = True
    return np.stack(frames), mask


def test_recovers_translation():
    frames, mask = translated_video([(0, 0), (2, -1), (-3, 4), (8, -8)])
    out = rigid_track(frames, mask)
    for t, (dx, dy) in enumerate([(0, 0), (2, -1), (-3, 4), (8, -8)]):
        assert dice(out[t], shift_mask(mask, dx, dy)) == 1.0


def test_static_and_zero_radius():
    frames, mask = translated_video([(0, 0)] * 3)
    assert all(np.array_equal(m, mask) for m in rigid_track(frames, mask))
    moving, _ = translated_video([(0, 0), (3, 3)])
    assert all(np.array_equal(m, mask) for m in rigid_track(moving, mask, RigidConfig(radius=0)))


def test_flat_frames_tie_break_to_zero():
    frames = np.full((3, 16, 16), 0.5)
    mask = np.zeros((16, 16), bool)
    mask[5:9, 5:9] = True
    assert all(np.array_equal(m, mask) for m in rigid_track(frames, mask))


def test_cardinality_never_grows():
    s = gen_video(GenConfig(amplitude=3.0), 4)
    out = rigid_track(s.frames, s.masks[0], RigidConfig(radius=8))
    assert all(m.sum() <= s.masks[0].sum() for m in out)
    assert all(np.array_equal(a, b) for a, b in zip(out, rigid_track(s.frames, s.masks[0])))


def test_search_order():
    order = search_order(1)
    assert order[0] == (0, 0)
    assert order[1:5] == [(-1, 0), (0, -1), (0, 1), (1, 0)]
    assert len(search_order(8)) == 17 * 17


def test_ncc_and_errors():
    a = np.array([1.0, 2.0, 3.0])
    assert ncc(a, 2 * a + 1) == pytest.approx(1.0)
    assert ncc(a, np.ones(3)) == 0.0
    with pytest.raises(PromptError):
        rigid_track(np.zeros((2, 4, 4)), np.zeros((4, 4)))
    with pytest.raises(ConfigError):
        RigidConfig(radius=-1)
    assert len(copy_track(np.zeros((3, 4, 4)), np.ones((4, 4)))) == 3

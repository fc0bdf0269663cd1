import copy
import csv
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from depcae.pipeline import (
    TnsChecksumError, TnsError, decode_tns, encode_tns, export_label_csv, load_manifest, load_tns, load_windows,
    preprocess_frame, refine_labels, save_tns, tns_size, validate_manifest, window_length, window_starts, windowize,
)


# --- preprocessing ------------------------------------------------------------------

def test_white_rgb_frame_becomes_ones():
    out = preprocess_frame(np.full((48, 80, 3), 255, np.uint8))
    assert out.shape == (64, 64) and np.all(out == 1.0)


def test_native_size_gray_is_only_rescaled():
    out = preprocess_frame(np.full((64, 64), 128, np.uint8))
    np.testing.assert_allclose(out, 128 / 255, rtol=1e-7)
    assert out[0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_bilinear_downsample_to_one_pixel_averages():
    assert preprocess_frame(np.array([[0, 255], [255, 0]], np.uint8), size=1)[0, 0] == pytest.approx(0.5)


def test_luma_weights():
    rgb = np.zeros((64, 64, 3))
    rgb[..., 1] = 255
    np.testing.assert_allclose(preprocess_frame(rgb), 0.587, rtol=1e-6)


def test_invalid_frames_rejected():
    with pytest.raises(ValueError, match="empty"):
        preprocess_frame(np.zeros((0, 5)))
    with pytest.raises(ValueError):
        preprocess_frame(np.zeros((4, 4, 2)))


# --- windowing ----------------------------------------------------------------------

def test_window_counts():
    assert [w.start_frame for w in windowize(np.zeros((150, 2, 2)))] == [0, 75]
    assert len(windowize(np.zeros((149, 2, 2)))) == 1
    assert window_length(15, 5) == 75


def test_table_scale_window_count_without_allocating():
    frames = round(1225.25 * 60 * 15)
    big = np.broadcast_to(np.zeros((1, 1, 1), np.float32), (frames, 1, 1))
    assert len(windowize(big)) == 14_703
    assert len(window_starts(frames)) == 14_703


def test_short_clip_gives_empty_list_and_warning(caplog):
    with caplog.at_level(logging.WARNING):
        assert windowize(np.zeros((74, 2, 2)), clip_id="short") == []
    assert "short" in caplog.text


def test_fractional_window_length_rejected():
    with pytest.raises(ValueError):
        window_length(15, 0.1)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(0, 400), fps=st.sampled_from([5, 10, 15]), secs=st.sampled_from([1, 2, 5]))
def test_windows_concatenate_to_the_truncated_clip(n, fps, secs):
    frames = np.arange(n, dtype=np.float32)[:, None, None]
    wins = windowize(frames, fps, secs)
    w = fps * secs
    assert len(wins) == n // w
    joined = np.concatenate([x.frames for x in wins]) if wins else np.zeros((0, 1, 1), np.float32)
    np.testing.assert_array_equal(joined, frames[: (n // w) * w])
    assert all(x.start_frame % w == 0 for x in wins)


def test_window_labels_from_intervals():
    wins = windowize(np.zeros((300, 1, 1)), anomalous=[(149, 150)], proxy=[(0, 10), (160, 170)])
    assert [x.label for x in wins] == ["proxy_outlier", "anomalous", "proxy_outlier", "normal"]


intervals = st.lists(st.tuples(st.integers(0, 600), st.integers(1, 120)).map(lambda t: (t[0], t[0] + t[1])),
                     max_size=6)


def test_label_refinement_is_monotone_on_random_interval_sets():
    rng = np.random.default_rng(0)
    starts = list(range(0, 750, 75))
    for _ in range(1000):
        k = int(rng.integers(0, 6))
        ivs = [(int(a), int(a + rng.integers(1, 120))) for a in rng.integers(0, 700, k)]
        before = refine_labels(starts, 75, ivs)
        grown = [(max(a - int(rng.integers(0, 40)), 0), b + int(rng.integers(0, 40))) for a, b in ivs]
        extra = [(int(a), int(a) + 5) for a in rng.integers(0, 700, int(rng.integers(0, 2)))]
        after = refine_labels(starts, 75, grown + extra)
        assert all(a or not b for b, a in zip(before, after))


@given(ivs=intervals)
def test_refinement_matches_frame_overlap_oracle(ivs):
    starts = list(range(0, 750, 75))
    mask = np.zeros(750 + 200, bool)
    for a, b in ivs:
        mask[a:b] = True
    assert refine_labels(starts, 75, ivs) == [bool(mask[s:s + 75].any()) for s in starts]


# --- .tns files ---------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(arr=arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)),
       name=st.text(max_size=12))
def test_tns_round_trip_is_bit_exact(arr, name):
    back, back_name = decode_tns(encode_tns(arr, name))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes() and back_name == name


def test_tns_file_size_formula(tmp_path):
    arr = np.zeros((75, 64, 64), np.float32)
    path = save_tns(tmp_path / "w.tns", arr, "clip_007")
    expected = 16 + len("clip_007") + 8 * 3 + 75 * 64 * 64 * 4 + 4
    assert path.stat().st_size == expected == tns_size(arr.shape, "clip_007")
    assert load_tns(path).tobytes() == arr.tobytes()


def test_truncated_or_corrupted_tns_fails_crc(tmp_path):
    data = encode_tns(np.arange(10, dtype=np.float32))
    with pytest.raises(TnsChecksumError):
        decode_tns(data[:-3])
    flipped = bytearray(data)
    flipped[30] ^= 0x10
    with pytest.raises(TnsChecksumError):
        decode_tns(bytes(flipped))


def test_tns_bad_magic_and_rank():
    data = bytearray(encode_tns(np.zeros(3, np.float32)))
    data[:4] = b"NOPE"
    with pytest.raises(TnsError, match="magic"):
        decode_tns(bytes(data))
    with pytest.raises(TnsError, match="rank"):
        encode_tns(np.zeros((1,) * 9, np.float32))
    with pytest.raises(TnsError):
        encode_tns(np.zeros(3, np.int32))


# --- manifests ----------------------------------------------------------------------

def test_generated_manifest_validates_and_loads(small_dataset):
    root, manifest = small_dataset, load_manifest(small_dataset)
    assert validate_manifest(manifest, root) == []
    train = load_windows(root, "train", manifest)
    assert train and all(w.frames.shape == (75, 64, 64) for w in train)
    assert all(0.0 <= w.frames.min() and w.frames.max() <= 1.0 for w in train)


def test_purity_violation_is_reported(small_dataset):
    root, manifest = small_dataset, load_manifest(small_dataset)
    bad = copy.deepcopy(manifest)
    next(w for w in bad["windows"] if w["split"] == "train")["label"] = "anomalous"
    assert any("train split contains an anomalous window" in p for p in validate_manifest(bad, root))


def test_window_outside_clip_is_reported(small_dataset):
    root, manifest = small_dataset, load_manifest(small_dataset)
    bad = copy.deepcopy(manifest)
    bad["windows"][0]["start"] = 10_000
    bad["clips"][-1]["path"] = "missing.tns"
    problems = validate_manifest(bad, root)
    assert any("outside clip range" in p for p in problems)
    assert any("does not exist" in p for p in problems)


def test_label_csv_export(small_dataset, tmp_path):
    manifest = load_manifest(small_dataset)
    rows = list(csv.reader(export_label_csv(manifest, tmp_path / "labels.csv").open()))
    assert rows[0] == ["clip_id", "window_start", "label"]
    assert len(rows) == 1 + len(manifest["windows"])
    assert rows[1] == [manifest["windows"][0]["clip"], str(manifest["windows"][0]["start"]),
                       manifest["windows"][0]["label"]]

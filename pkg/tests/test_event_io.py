import numpy as np
import pytest

from conftest import make_stream
from event_io import (AER_MAX_TIMESTAMP, EVENT_DTYPE, AugmentConfig, BoundingBox, DegenerateBox,
                      EmptyClass, EventIOError, EventStream, InvalidTarget, NonMonotonicTimestamp,
                      OutOfBounds, Sample, SynthConfig, TimestampOverflow, TruncatedRecord,
                      apply_affine, augment,
                      bin_events, decode_aer, downsample, encode_aer, load_boxes_jsonl,
                      load_frames, load_ncaltech_sample, save_boxes_jsonl, save_frames,
                      stratified_split, synth_moving_box, write_aer_file)


class TestAERCodec:
    def test_decode_single_record(self):
        # x=10, y=20, polarity 1, t = 0x012345
        record = bytes([10, 20, 0x80 | 0x01, 0x23, 0x45])
        stream = decode_aer(record, (240, 240))
        assert len(stream) == 1
        event = stream[0]
        assert (event.x, event.y, event.p, event.t) == (10, 20, 1, 0x012345)
        assert stream.duration_us == 0x012345 + 1

    def test_encode_matches_decode(self, small_stream):
        buffer = encode_aer(small_stream)
        assert len(buffer) == 5 * len(small_stream)
        decoded = decode_aer(buffer, small_stream.resolution)
        assert np.array_equal(decoded.events, small_stream.events)

    def test_empty_buffer(self):
        stream = decode_aer(b"", (240, 240))
        assert len(stream) == 0
        assert stream.duration_us == 0

    def test_truncated_buffer_reports_offset(self):
        with pytest.raises(TruncatedRecord) as excinfo:
            decode_aer(bytes(12), (240, 240))
        assert excinfo.value.offset == 10
        assert "10" in str(excinfo.value)

    def test_out_of_bounds_address(self):
        buffer = bytes([1, 1, 0, 0, 1]) + bytes([9, 1, 0, 0, 2])
        with pytest.raises(OutOfBounds) as excinfo:
            decode_aer(buffer, (8, 8))
        assert excinfo.value.offset == 5

    def test_non_monotonic_timestamps(self):
        buffer = bytes([1, 1, 0, 0, 9]) + bytes([1, 1, 0, 0, 3])
        with pytest.raises(NonMonotonicTimestamp) as excinfo:
            decode_aer(buffer, (8, 8))
        assert excinfo.value.offset == 5

    def test_timestamp_overflow_on_encode(self):
        stream = make_stream([(0, 0, 2 ** 23, 1)])
        with pytest.raises(TimestampOverflow):
            encode_aer(stream)

    def test_errors_share_base_class(self):
        assert issubclass(TruncatedRecord, EventIOError)
        assert issubclass(OutOfBounds, EventIOError)


class TestDownsample:
    def test_floor_remap_keeps_every_event(self):
        stream = make_stream([(239, 239, 0, 1), (0, 0, 1, 0), (120, 60, 2, 1)], resolution=(240, 240))
        small = downsample(stream, (128, 128))
        assert len(small) == 3
        assert small.resolution == (128, 128)
        assert (small[0].x, small[0].y) == (127, 127)
        assert (small[2].x, small[2].y) == (64, 32)

    def test_identity_target_returns_copy(self, small_stream):
        same = downsample(small_stream, small_stream.resolution)
        assert same == small_stream
        assert same.events is not small_stream.events

    def test_invalid_target(self, small_stream):
        with pytest.raises(InvalidTarget):
            downsample(small_stream, (16, 16))
        with pytest.raises(InvalidTarget):
            downsample(small_stream, (0, 4))


class TestBinning:
    def test_histogram_counts_and_shape(self, small_stream):
        frames = bin_events(small_stream, 10, "histogram")
        assert frames.data.shape == (2, 2, 8, 8)
        assert frames.data[0, 1, 0, 0] == 1
        assert frames.data[0, 0, 2, 1] == 1
        assert frames.data[1, 1, 3, 3] == 2
        assert frames.data.sum() == len(small_stream)

    def test_binary_clamps_to_one(self, small_stream):
        frames = bin_events(small_stream, 10, "binary")
        assert frames.data.max() == 1
        assert frames.data[1, 1, 3, 3] == 1

    def test_boundary_event_lands_in_next_bin(self):
        stream = make_stream([(0, 0, 10, 1)], duration_us=30)
        frames = bin_events(stream, 10)
        assert frames.timesteps == 3
        assert frames.data[1, 1, 0, 0] == 1
        assert frames.data[0].sum() == 0

    def test_empty_stream_gives_zero_frames(self):
        frames = bin_events(EventStream.empty((8, 8), 25), 10)
        assert frames.data.shape == (3, 2, 8, 8)
        assert frames.data.sum() == 0

    def test_bad_window(self, small_stream):
        with pytest.raises(ValueError):
            bin_events(small_stream, 0)

    def test_frames_file_round_trip(self, small_stream, tmp_path):
        frames = bin_events(small_stream, 5, "histogram")
        path = tmp_path / "frames.bin"
        save_frames(path, frames)
        assert load_frames(path) == frames

    def test_frames_file_bad_magic(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(EventIOError):
            load_frames(path)


class TestAugmentation:
    def test_identity_transform_is_noop(self, static_sample):
        result = apply_affine(static_sample, 1.0, (0.0, 0.0))
        assert result.stream == static_sample.stream
        assert result.boxes == static_sample.boxes

    def test_scale_moves_events_and_boxes_together(self, static_sample):
        result = apply_affine(static_sample, 1.5, (1.0, 1.0))
        box = result.boxes[0]
        assert box.x_min == pytest.approx(0.5)
        assert box.x_max == pytest.approx(6.5)
        assert len(result.stream) == 3
        ev = result.stream[0]
        assert (ev.x, ev.y) == (0, 2)

    def test_events_outside_are_dropped(self, static_sample):
        result = apply_affine(static_sample, 1.0, (3.0, 3.0))
        assert len(result.stream) == 2

    def test_box_pushed_off_frame_is_degenerate(self, static_sample):
        with pytest.raises(DegenerateBox):
            apply_affine(static_sample, 1.0, (7.5, 0.0))

    def test_augment_is_seeded(self, static_sample):
        cfg = AugmentConfig(scale_range=(1.0, 1.2))
        a = augment(static_sample, 7, cfg)
        b = augment(static_sample, 7, cfg)
        assert a.stream == b.stream
        assert a.boxes == b.boxes

    def test_scale_range_is_validated(self, static_sample):
        with pytest.raises(ValueError):
            augment(static_sample, 0, AugmentConfig(scale_range=(0.1, 2.0)))


class TestStratifiedSplit:
    def _samples(self, counts):
        stream = EventStream.empty((8, 8), 10)
        samples = []
        for label, n in counts.items():
            for i in range(n):
                samples.append(Sample(stream, [BoundingBox(0, 0, 4, 4, label=label)], name=f"{label}-{i}"))
        return samples

    def test_per_class_fraction(self):
        train, val = stratified_split(self._samples({0: 10, 1: 5}), train_frac=0.8, seed=3)
        assert sum(1 for s in train if s.label == 0) == 8
        assert sum(1 for s in train if s.label == 1) == 4
        assert len(val) == 3
        assert all(s.split_tag == "train" for s in train)
        assert all(s.split_tag == "val" for s in val)

    def test_same_seed_same_split(self):
        samples = self._samples({0: 12})
        a, _ = stratified_split(samples, seed=5)
        b, _ = stratified_split(samples, seed=5)
        assert [s.name for s in a] == [s.name for s in b]

    def test_missing_class_raises(self):
        with pytest.raises(EmptyClass):
            stratified_split(self._samples({0: 4}), classes=[0, 1])

    def test_fraction_bounds(self):
        with pytest.raises(ValueError):
            stratified_split(self._samples({0: 4}), train_frac=1.0)


class TestSyntheticData:
    def test_generator_is_deterministic(self, tiny_synth_config):
        a = synth_moving_box(tiny_synth_config, 11)
        b = synth_moving_box(tiny_synth_config, 11)
        assert a.stream == b.stream
        assert a.track == b.track

    def test_stream_and_track_are_valid(self, tiny_synth_config):
        sample = synth_moving_box(tiny_synth_config, 2)
        sample.stream.validate()
        assert len(sample.stream) > 0
        assert len(sample.track) == 4
        for box in sample.track:
            assert 0 <= box.x_min < box.x_max <= 16
            assert 0 <= box.y_min < box.y_max <= 16
            assert box.width == 6

    def test_boxes_follow_timestep(self, tiny_synth_config):
        sample = synth_moving_box(tiny_synth_config, 4)
        assert sample.boxes_at(0, 1000) == [sample.track[0]]
        assert sample.boxes_at(3, 1000) == [sample.track[3]]
        assert sample.boxes_at(99, 1000) == [sample.track[-1]]

    def test_default_config_is_64_by_64(self):
        assert SynthConfig().resolution == (64, 64)


class TestSidecars:
    def test_boxes_jsonl_round_trip(self, tmp_path):
        boxes = [BoundingBox(1, 2, 30, 40, 1.0, 3), BoundingBox(0, 0, 5, 5)]
        path = tmp_path / "boxes.jsonl"
        save_boxes_jsonl(path, boxes)
        assert load_boxes_jsonl(path) == boxes

    def test_malformed_line_names_location(self, tmp_path):
        path = tmp_path / "boxes.jsonl"
        path.write_text('{"x_min": 1}\n', encoding="utf-8")
        with pytest.raises(EventIOError) as excinfo:
            load_boxes_jsonl(path)
        assert ":1:" in str(excinfo.value)

    def test_ncaltech_sample_is_rescaled(self, tmp_path):
        stream = make_stream([(0, 0, 0, 1), (239, 120, 5, 0)], resolution=(240, 240))
        write_aer_file(tmp_path / "image_0001.bin", stream)
        save_boxes_jsonl(tmp_path / "image_0001.jsonl", [BoundingBox(30, 60, 150, 240)])
        sample = load_ncaltech_sample(tmp_path / "image_0001.bin", tmp_path / "image_0001.jsonl",
                                      target=(128, 128))
        assert sample.stream.resolution == (128, 128)
        assert sample.name == "image_0001"
        box = sample.boxes[0]
        assert box.x_min == pytest.approx(16.0)
        assert box.y_max == pytest.approx(128.0)


def _random_stream(rng, n, resolution, duration_us=200000):
    events = np.zeros(n, dtype=EVENT_DTYPE)
    events["x"] = rng.integers(0, resolution[0], size=n)
    events["y"] = rng.integers(0, resolution[1], size=n)
    events["t"] = np.sort(rng.integers(0, duration_us, size=n))
    events["p"] = rng.integers(0, 2, size=n)
    return EventStream(events, resolution, duration_us)


class TestRandomizedProperties:
    def test_random_aer_round_trip(self):
        rng = np.random.default_rng(21)
        stream = _random_stream(rng, 1000, (240, 240), duration_us=AER_MAX_TIMESTAMP)
        decoded = decode_aer(encode_aer(stream), stream.resolution)
        assert np.array_equal(decoded.events, stream.events)
        assert decoded.duration_us == int(stream.events["t"][-1]) + 1

    def test_encode_byte_layout(self):
        stream = make_stream([(10, 20, 100, 1)], resolution=(240, 240))
        assert encode_aer(stream) == bytes([0x0A, 0x14, 0x80, 0x00, 0x64])

    def test_downsample_matches_rebinning_by_hand(self):
        rng = np.random.default_rng(22)
        stream = _random_stream(rng, 5000, (240, 240))
        small = downsample(stream, (128, 128))

        expected = np.zeros((128, 128), dtype=np.int64)
        for event in stream:
            expected[event.y * 128 // 240, event.x * 128 // 240] += 1
        counts = np.zeros((128, 128), dtype=np.int64)
        np.add.at(counts, (small.events["y"], small.events["x"]), 1)

        np.testing.assert_array_equal(counts, expected)
        assert np.array_equal(small.events["t"], stream.events["t"])

    def test_histogram_mass_and_binary_bound(self):
        rng = np.random.default_rng(23)
        stream = _random_stream(rng, 3000, (16, 16), duration_us=50000)
        histogram = bin_events(stream, 7000, "histogram")
        binary = bin_events(stream, 7000, "binary")
        assert histogram.data.sum() == len(stream)
        assert (binary.data <= histogram.data).all()

    def test_half_scale_about_origin(self):
        sample = Sample(EventStream.empty((128, 128), 10), [BoundingBox(0, 0, 64, 64)])
        box = apply_affine(sample, 0.5, (0.0, 0.0)).boxes[0]
        assert (box.x_min, box.y_min, box.x_max, box.y_max) == (0.0, 0.0, 32.0, 32.0)

    def test_hundred_seeded_augmentations_replay(self):
        rng = np.random.default_rng(24)
        sample = Sample(_random_stream(rng, 400, (64, 64), 20000), [BoundingBox(16, 16, 48, 48)])
        for seed in range(100):
            first = augment(sample, seed)
            again = augment(sample, seed)
            assert first.stream == again.stream
            assert first.boxes == again.boxes

    def test_split_is_disjoint_and_exhaustive(self):
        stream = EventStream.empty((8, 8), 10)
        samples = [Sample(stream, [BoundingBox(0, 0, 4, 4, label=i % 3)], name=f"s{i}") for i in range(23)]
        train, val = stratified_split(samples, train_frac=0.8, seed=9)
        train_names = {s.name for s in train}
        val_names = {s.name for s in val}
        assert not train_names & val_names
        assert train_names | val_names == {s.name for s in samples}


class TestSyntheticStatistics:
    def test_static_box_is_silent_after_first_window(self):
        cfg = SynthConfig(resolution=(32, 32), box_size=(8, 8), velocity=(0.0, 0.0),
                          duration_us=20000, noise_rate=0.0, step_us=1000, window_us=2000)
        sample = synth_moving_box(cfg, 3)
        assert len(sample.stream) == 8 * 8 * cfg.events_per_change
        assert (sample.stream.events["t"] < cfg.window_us).all()

    def test_noise_count_within_three_sigma(self):
        cfg = SynthConfig(resolution=(32, 32), box_size=(8, 8), velocity=(0.0, 0.0),
                          duration_us=500000, noise_rate=2.0, step_us=1000, window_us=10000)
        sample = synth_moving_box(cfg, 5)
        edge_events = 8 * 8 * cfg.events_per_change
        noise = len(sample.stream) - edge_events
        expected = cfg.noise_rate * cfg.duration_us * 1e-6 * 32 * 32
        assert abs(noise - expected) <= 3 * np.sqrt(expected)

"""
Tests for ingest module
"""

import logging

import numpy as np
import pytest

from fogsense.errors import ConfigError, DataError, ParseError, StratificationError
from fogsense.ingest import (
    Label,
    assert_no_excluded,
    binarize,
    episode_summary,
    fog_episodes,
    kfold,
    leave_one_subject_out,
    load_cohort,
    load_daphnet_file,
    parse_daphnet,
    serialize_daphnet,
    split,
)


class TestParseDaphnet:
    """Test DAPHNet text parsing."""

    def test_parse_single_line(self):
        """Test that the 11 fields map onto timestamp, accel and label."""
        stream = parse_daphnet(["10 1 2 3 4 5 6 7 8 9 1"])
        record = stream[0]
        assert len(stream) == 1
        assert record.timestamp == 10
        assert record.accel == (1, 2, 3, 4, 5, 6, 7, 8, 9)
        assert record.label == Label.NORMAL

    def test_blank_lines_skipped(self):
        """Test that empty lines produce no records."""
        stream = parse_daphnet(["", "10 1 2 3 4 5 6 7 8 9 2", "   ", "25 1 2 3 4 5 6 7 8 9 0"])
        assert len(stream) == 2
        assert list(stream.labels) == [2, 0]

    def test_wrong_field_count(self):
        """Test that a short line is reported with its line number."""
        with pytest.raises(ParseError) as exc:
            parse_daphnet(["10 1 2 3 4 5 6 7 8 9 1", "10 1 2 3"], source="S01R01.txt")
        assert exc.value.line == 2
        assert "4" in str(exc.value)
        assert "S01R01.txt:2" in str(exc.value)

    def test_non_integer_token(self):
        """Test that a non-integer token is a parse error naming the token."""
        with pytest.raises(ParseError, match="1.5"):
            parse_daphnet(["10 1 2 3 4 5 6 7 1.5 9 1"])

    def test_unknown_label(self):
        """Test that labels outside 0..2 are rejected."""
        with pytest.raises(ParseError):
            parse_daphnet(["10 1 2 3 4 5 6 7 8 9 3"])

    def test_non_monotone_timestamp_warns(self, caplog):
        """Test that a timestamp going backwards warns and keeps the record."""
        with caplog.at_level(logging.WARNING, logger="fogsense.ingest"):
            stream = parse_daphnet(["20 1 2 3 4 5 6 7 8 9 1", "10 1 2 3 4 5 6 7 8 9 1"])
        assert len(stream) == 2
        assert "non-monotone" in caplog.text

    def test_empty_input(self):
        """Test that an empty file parses to an empty stream."""
        stream = parse_daphnet([])
        assert len(stream) == 0
        assert stream.accel.shape == (0, 9)

    def test_serialize_inverts_parse(self, recording):
        """Test that parse(serialize(stream)) reproduces every record."""
        again = parse_daphnet(serialize_daphnet(recording).splitlines())
        np.testing.assert_array_equal(again.timestamps, recording.timestamps)
        np.testing.assert_array_equal(again.accel, recording.accel)
        np.testing.assert_array_equal(again.labels, recording.labels)

    def test_load_file_reads_ids_from_name(self, daphnet_dir):
        """Test that subject and run ids come from the file name."""
        stream = load_daphnet_file(daphnet_dir / "S03R02.txt")
        assert (stream.subject_id, stream.run_id) == (3, 2)
        assert len(stream) == 3840


class TestBinarize:
    """Test debrief removal and label mapping."""

    def test_drops_debrief(self):
        """Test that [0, 1, 2] becomes [Normal, FoG]."""
        stream = parse_daphnet(["1 0 0 0 0 0 0 0 0 0 0", "2 0 0 0 0 0 0 0 0 0 1", "3 0 0 0 0 0 0 0 0 0 2"])
        binary = binarize(stream)
        assert list(binary.labels) == [0, 1]
        assert list(binary.timestamps) == [2, 3]

    def test_all_debrief(self):
        """Test that an all-debrief stream binarizes to nothing."""
        stream = parse_daphnet(["1 0 0 0 0 0 0 0 0 0 0", "2 0 0 0 0 0 0 0 0 0 0"])
        binary = binarize(stream)
        assert len(binary) == 0
        assert binary.segments() == []

    def test_length_counts_labelled_samples(self, make_recording):
        """Test that the output keeps exactly the Normal and FoG samples."""
        rec = make_recording(debrief_spans=((0, 100), (3000, 3300)))
        binary = binarize(rec)
        assert len(binary) == int(np.isin(rec.labels, (1, 2)).sum())

    def test_segments_split_at_dropped_region(self, make_recording):
        """Test that a dropped debrief region starts a new segment."""
        rec = make_recording(n_samples=1000, fog_spans=(), debrief_spans=((400, 500),))
        segments = binarize(rec).segments()
        assert [(s.start, s.stop) for s in segments] == [(0, 400), (400, 900)]


class TestFogEpisodes:
    """Test FoG episode detection."""

    def test_planted_episodes(self, recording):
        """Test that planted spans come back with their durations."""
        episodes = fog_episodes(recording)
        assert [(e.start_index, e.end_index) for e in episodes] == [(2000, 2640), (5000, 5512)]
        assert episodes[0].duration_s == pytest.approx(10.0)
        assert episodes[1].duration_s == pytest.approx(8.0)
        assert episodes[0].onset_ts == int(recording.timestamps[2000])
        assert episodes[0].end_ts == int(recording.timestamps[2639])

    def test_no_fog(self, make_recording):
        """Test that a recording without FoG has no episodes."""
        assert fog_episodes(make_recording(fog_spans=())) == []

    def test_dropped_region_splits_episode(self):
        """Test that FoG on both sides of a debrief gap counts twice."""
        lines = [f"{t} 0 0 0 0 0 0 0 0 0 {lab}" for t, lab in enumerate([2, 2, 0, 2, 2])]
        stream = parse_daphnet(lines)
        assert len(fog_episodes(stream)) == 2
        assert len(fog_episodes(binarize(stream))) == 2


class TestPartitions:
    """Test stratified split, k-fold and leave-one-subject-out."""

    def test_split_stratifies(self):
        """Test that 10 FoG / 90 Normal at 0.7 gives 7 + 63 training windows."""
        labels = np.array([1] * 10 + [0] * 90)
        train, test = split(labels, 0.7, seed=1)
        assert len(train) == 70
        assert labels[train].sum() == 7
        assert len(np.intersect1d(train, test)) == 0
        assert sorted(np.concatenate([train, test])) == list(range(100))

    def test_split_deterministic(self):
        """Test that the same seed yields the same partition."""
        labels = np.array([1] * 10 + [0] * 90)
        a, b = split(labels, 0.7, seed=5), split(labels, 0.7, seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_split_ratio_bounds(self):
        """Test that ratio 1.0 is a configuration error."""
        with pytest.raises(ConfigError):
            split(np.array([0, 0, 1, 1]), 1.0)

    def test_split_needs_two_per_class(self):
        """Test that a single FoG window cannot be stratified."""
        with pytest.raises(StratificationError):
            split(np.array([1, 0, 0, 0]), 0.7)

    def test_kfold_twenty_windows(self):
        """Test that 20 windows in 10 folds give validation folds of 2."""
        labels = np.array([1] * 10 + [0] * 10)
        folds = kfold(labels, 10, seed=0)
        assert len(folds) == 10
        assert all(len(val) == 2 for _, val in folds)

    def test_kfold_partitions(self):
        """Test that validation folds are disjoint and cover every window."""
        labels = np.array([1] * 37 + [0] * 113)
        folds = kfold(labels, 10, seed=3)
        covered = np.concatenate([val for _, val in folds])
        assert sorted(covered) == list(range(150))
        for train, val in folds:
            assert len(np.intersect1d(train, val)) == 0
            assert len(train) + len(val) == 150

    def test_kfold_stratified(self):
        """Test that each fold's FoG count is within one window of the global ratio."""
        labels = np.array([1] * 37 + [0] * 113)
        for _, val in kfold(labels, 10, seed=3):
            assert abs(labels[val].sum() - 3.7) <= 1

    def test_kfold_too_many_folds(self):
        """Test that k above the window count is an error."""
        with pytest.raises(StratificationError):
            kfold(np.array([0, 1, 0, 1]), 5)

    def test_kfold_k_at_least_two(self):
        """Test that k=1 is a configuration error."""
        with pytest.raises(ConfigError):
            kfold(np.array([0, 1, 0, 1]), 1)

    def test_leave_one_subject_out(self):
        """Test that each subject is held out exactly once."""
        subjects = np.array([1, 1, 2, 3, 3, 3])
        folds = leave_one_subject_out(subjects)
        assert [s for s, _, _ in folds] == [1, 2, 3]
        for s, train, val in folds:
            assert set(subjects[val]) == {s}
            assert s not in set(subjects[train])

    def test_assert_no_excluded(self):
        """Test that an excluded subject in a partition is rejected."""
        assert_no_excluded([1, 2, 3], {4, 10})
        with pytest.raises(DataError):
            assert_no_excluded([1, 4], {4, 10})


class TestCohort:
    """Test corpus loading and episode statistics."""

    def test_loads_matching_files(self, cohort):
        """Test that every subject is loaded, runs in order, README ignored."""
        assert sorted(cohort.subjects) == [1, 2, 3, 4]
        assert [s.run_id for s in cohort.subjects[3]] == [1, 2]
        assert cohort.included_ids == [1, 2, 3]

    def test_missing_directory(self, tmp_path):
        """Test that a missing directory is a data error."""
        with pytest.raises(DataError):
            load_cohort(tmp_path / "nope")

    def test_empty_directory(self, tmp_path):
        """Test that a directory without recordings is a data error."""
        with pytest.raises(DataError):
            load_cohort(tmp_path)

    def test_episode_summary(self, cohort):
        """Test episode counts and durations over all subjects."""
        summary = episode_summary(cohort)
        assert summary.count == 7
        assert summary.per_subject == {"1": 2, "2": 3, "3": 2, "4": 0}
        assert summary.min_s == pytest.approx(6.25)
        assert summary.max_s == pytest.approx(12.5)


@pytest.mark.dataset
@pytest.mark.slow
class TestDaphnetCorpus:
    """Checks against the real corpus (needs FOG_DATA_DIR)."""

    def test_episode_count(self):
        """Test the labelled episode count and duration statistics."""
        from fogsense.utils import default_data_dir

        cohort = load_cohort(default_data_dir())
        summary = episode_summary(cohort)
        assert summary.count == 237
        assert summary.mean_s == pytest.approx(7.3, abs=0.2)
        assert summary.per_subject.get("4", 0) == 0
        assert summary.per_subject.get("10", 0) == 0

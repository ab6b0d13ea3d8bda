"""
Tests for features module
"""

import logging
import math

import numpy as np
import pytest

from fogsense.errors import ConfigError, SchemaError
from fogsense.features import (
    ALL_KINDS,
    CHANNELS,
    F_D,
    F_TD,
    FI_MAX,
    TIME_KINDS,
    FeatureDescriptor,
    FeatureKind,
    FeatureMatrix,
    FeatureSubset,
    Spectrum,
    band_masks,
    compute_features,
    extract_matrix,
    freq_features,
    make_windows,
    normalize,
    parse_feature_spec,
    power_spectrum,
    select_features,
    time_features,
)
from fogsense.ingest import BinaryStream

FS = 64


def binary_stream(n, fog=None, segment_ids=None, subject=1):
    labels = np.zeros(n, dtype=np.int8)
    if fog is not None:
        labels[fog] = 1
    rng = np.random.default_rng(n)
    return BinaryStream(
        timestamps=np.arange(n, dtype=np.int64) * 16,
        accel=rng.integers(-500, 500, size=(n, 9)).astype(np.int32),
        labels=labels,
        segment_ids=np.zeros(n, dtype=np.int32) if segment_ids is None else np.asarray(segment_ids),
        subject_id=subject,
    )


def dft_power(x):
    """O(N^2) one-sided periodogram."""
    n = len(x)
    k = np.arange(n // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)
    return np.abs(basis @ x) ** 2 / n


def oracle_features(x, fs=FS):
    """Direct evaluation of all ten features for one channel window, plus the peak margin."""
    n = len(x)
    mean = math.fsum(x) / n
    var = math.fsum((v - mean) ** 2 for v in x) / n
    power = dft_power(x)
    freqs = np.arange(len(power)) * fs / n
    total = math.fsum(power)
    loco = math.fsum(p for f, p in zip(freqs, power) if 0.5 <= f < 3.0)
    freeze = math.fsum(p for f, p in zip(freqs, power) if 3.0 <= f <= 8.0)
    top_two = np.sort(power)[-2:]
    features = {
        FeatureKind.MEAN: mean,
        FeatureKind.STD: math.sqrt(var),
        FeatureKind.VAR: var,
        FeatureKind.RMS: math.sqrt(math.fsum(v * v for v in x) / n),
        FeatureKind.MAV: math.fsum(abs(v) for v in x) / n,
        FeatureKind.ENTROPY: -math.fsum(p / total * math.log(p / total) for p in power if p > 0),
        FeatureKind.ENERGY: total,
        FeatureKind.PEAK_FREQ: freqs[int(np.argmax(power))],
        FeatureKind.FREEZE_INDEX: min(freeze / max(loco, 1e-12), FI_MAX) if freeze > 0 else 0.0,
        FeatureKind.BAND_POWER: loco + freeze,
    }
    return features, (top_two[1] - top_two[0]) / top_two[1]


def sine(freq, n, amplitude=1.0):
    return amplitude * np.sin(2 * np.pi * freq * np.arange(n) / FS)


class TestDescriptors:
    """Test feature descriptor grids and names."""

    def test_grid_sizes(self):
        """Test that the full grid has 90 descriptors and the time grid 45."""
        assert len(F_D) == 90
        assert len(F_TD) == 45
        assert all(d.kind in TIME_KINDS for d in F_TD)

    def test_names_round_trip(self):
        """Test that names parse back to the same descriptor."""
        d = FeatureDescriptor("A_X", FeatureKind.FREEZE_INDEX)
        assert d.name == "A_X.FreezeIndex"
        assert FeatureDescriptor.from_name(d.name) == d

    def test_unknown_name(self):
        """Test that unknown channels and kinds are schema errors."""
        with pytest.raises(SchemaError):
            FeatureDescriptor.from_name("Q_X.Mean")
        with pytest.raises(SchemaError):
            FeatureDescriptor.from_name("A_X.Median")


class TestMakeWindows:
    """Test windowing of binarized streams."""

    def test_non_overlapping_count(self):
        """Test that 640 samples at w=1, stride 64 give 10 windows."""
        assert len(make_windows(binary_stream(640), w=1, fs=FS, stride=64)) == 10

    def test_overlapping_count(self):
        """Test that 640 samples at w=1, stride 32 give 19 windows."""
        assert len(make_windows(binary_stream(640), w=1, fs=FS, stride=32)) == 19

    def test_majority_label(self):
        """Test that 40 FoG samples of 64 label the window FoG."""
        windows = make_windows(binary_stream(64, fog=slice(0, 40)), w=1, fs=FS, stride=64)
        assert list(windows.labels) == [1]

    def test_majority_tie_goes_to_fog(self):
        """Test that exactly half FoG labels the window FoG."""
        windows = make_windows(binary_stream(64, fog=slice(0, 32)), w=1, fs=FS, stride=64)
        assert list(windows.labels) == [1]

    def test_any_rule(self):
        """Test that a single FoG sample suffices under the 'any' rule."""
        stream = binary_stream(128, fog=[100])
        assert list(make_windows(stream, 1, FS, 64, "majority").labels) == [0, 0]
        assert list(make_windows(stream, 1, FS, 64, "any").labels) == [0, 1]

    def test_windows_stay_inside_segments(self):
        """Test that no window bridges a dropped region; short segments yield none."""
        segment_ids = np.concatenate([np.zeros(100), np.ones(40), np.full(64, 2)]).astype(np.int32)
        windows = make_windows(binary_stream(204, segment_ids=segment_ids), w=1, fs=FS, stride=16)
        assert list(windows.starts) == [0, 16, 32, 140]

    def test_short_stream(self):
        """Test that a stream shorter than one window yields nothing."""
        assert len(make_windows(binary_stream(50), w=1, fs=FS, stride=32)) == 0

    def test_batch_layout(self):
        """Test that batch() returns (b, 9, L) float64 copies of the samples."""
        stream = binary_stream(256)
        windows = make_windows(stream, w=1, fs=FS, stride=64)
        batch = windows.batch(np.array([1, 2]))
        assert batch.shape == (2, 9, 64)
        assert batch.dtype == np.float64
        np.testing.assert_array_equal(batch[0], stream.accel[64:128].T)

    def test_cohort_windows_skip_excluded(self, windows):
        """Test that excluded subject 4 contributes no windows."""
        assert set(np.unique(windows.subject_ids)) == {1, 2, 3}
        assert windows.labels.sum() > 0


class TestTimeFeatures:
    """Test time-domain statistics."""

    def test_constant(self):
        """Test a constant signal."""
        f = time_features(np.array([1.0, 1.0, 1.0, 1.0]))
        assert (f.mean, f.std, f.var, f.rms, f.mav) == (1.0, 0.0, 0.0, 1.0, 1.0)

    def test_alternating(self):
        """Test a symmetric alternating signal."""
        f = time_features(np.array([1.0, -1.0, 1.0, -1.0]))
        assert (f.mean, f.std, f.var, f.rms, f.mav) == (0.0, 1.0, 1.0, 1.0, 1.0)

    def test_population_variance(self):
        """Test that variance divides by N."""
        f = time_features(np.array([0.0, 2.0]))
        assert f.mean == 1.0
        assert f.var == 1.0
        assert f.rms == pytest.approx(math.sqrt(2))
        assert f.mav == 1.0


class TestSpectrum:
    """Test the periodogram and spectral features."""

    def test_matches_direct_dft(self):
        """Test the FFT periodogram against an O(N^2) DFT."""
        x = np.random.default_rng(0).normal(size=128)
        np.testing.assert_allclose(power_spectrum(x, FS).power, dft_power(x), rtol=1e-9, atol=1e-9)

    def test_parseval(self):
        """Test that mirrored bin powers sum to the signal energy."""
        x = np.random.default_rng(1).normal(size=64)
        p = power_spectrum(x, FS).power
        mirrored = p[0] + 2 * p[1:-1].sum() + p[-1]
        assert mirrored == pytest.approx(np.square(x).sum(), rel=1e-6)

    def test_sine_concentrates_in_its_bin(self):
        """Test that a 5 Hz sine puts its power in the 5 Hz bin."""
        psd = power_spectrum(sine(5, 64), FS)
        peak = int(np.argmax(psd.power))
        assert psd.freqs[peak] == 5.0
        assert psd.power[peak] == pytest.approx(psd.power.sum(), rel=1e-9)

    def test_zeros(self):
        """Test that silence has an all-zero spectrum and zero features."""
        psd = power_spectrum(np.zeros(64), FS)
        assert not psd.power.any()
        f = freq_features(psd)
        assert (f.entropy, f.energy, f.peak_freq, f.freeze_index, f.band_power) == (0.0, 0.0, 0.0, 0.0, 0.0)

    def test_band_membership(self):
        """Test half-open locomotor and closed freeze bands."""
        locomotor, freeze = band_masks(np.array([0.4, 0.5, 2.99, 3.0, 8.0, 8.01]))
        assert list(locomotor) == [False, True, True, False, False, False]
        assert list(freeze) == [False, False, False, True, True, False]

    def test_freeze_tone_saturates_index(self):
        """Test that a pure 5 Hz sine caps the freeze index and is all band power."""
        f = freq_features(power_spectrum(sine(5, 64), FS))
        assert f.freeze_index == FI_MAX
        assert f.band_power == pytest.approx(f.energy, rel=1e-9)
        assert f.entropy == pytest.approx(0.0, abs=1e-9)

    def test_equal_tones_unit_index(self):
        """Test that equal 2 Hz and 5 Hz tones give a freeze index of 1."""
        f = freq_features(power_spectrum(sine(2, 128) + sine(5, 128), FS))
        assert f.freeze_index == pytest.approx(1.0, abs=1e-6)
        assert f.peak_freq in (2.0, 5.0)

    def test_flat_spectrum_entropy(self):
        """Test that K equal bins have entropy ln K."""
        freqs = np.arange(33) * 1.0
        f = freq_features(Spectrum(freqs=freqs, power=np.ones(33), n=64, fs=FS))
        assert f.entropy == pytest.approx(math.log(33))

    def test_freeze_index_monotone(self):
        """Test that adding freeze-band power never lowers the index."""
        base = sine(2, 128) + 0.2 * sine(5, 128)
        more = sine(2, 128) + 0.6 * sine(5, 128)
        assert freq_features(power_spectrum(more, FS)).freeze_index >= freq_features(power_spectrum(base, FS)).freeze_index


class TestComputeFeatures:
    """Test batched feature computation."""

    def test_column_order(self):
        """Test that columns follow the descriptor order."""
        batch = np.random.default_rng(2).normal(size=(3, 9, 64)) * 100
        descriptors = [
            FeatureDescriptor("T_Z", FeatureKind.RMS),
            FeatureDescriptor("A_X", FeatureKind.MEAN),
            FeatureDescriptor("L_Y", FeatureKind.ENERGY),
        ]
        values = compute_features(batch, descriptors, FS)
        np.testing.assert_allclose(values[:, 0], np.sqrt(np.square(batch[:, 8]).mean(axis=1)))
        np.testing.assert_allclose(values[:, 1], batch[:, 0].mean(axis=1))
        np.testing.assert_allclose(values[:, 2], [dft_power(row).sum() for row in batch[:, 4]], rtol=1e-9)

    def test_batch_invariant(self):
        """Test that a window scores bit-identically alone and inside a batch."""
        batch = np.random.default_rng(3).normal(size=(5, 9, 128)) * 300
        together = compute_features(batch, F_D, FS)
        for i in range(5):
            np.testing.assert_array_equal(compute_features(batch[i:i + 1], F_D, FS)[0], together[i])

    def test_empty_batch(self):
        """Test that an empty batch gives an empty matrix."""
        assert compute_features(np.zeros((0, 9, 64)), F_D, FS).shape == (0, 90)


class TestFeatureOracle:
    """Test every feature against direct evaluation on random windows."""

    def test_thousand_windows(self):
        """Test all 90 columns of 1,000 random windows within 1e-6 relative."""
        rng = np.random.default_rng(11)
        n, length = 1000, 2 * FS
        t = np.arange(length) / FS
        freq = rng.uniform(0.5, 12.0, size=(n, 9, 1))
        amplitude = rng.uniform(50.0, 500.0, size=(n, 9, 1))
        phase = rng.uniform(0.0, 2 * np.pi, size=(n, 9, 1))
        batch = np.round(
            amplitude * np.sin(2 * np.pi * freq * t + phase)
            + rng.normal(0.0, 40.0, size=(n, 9, length))
            + rng.uniform(-50.0, 50.0, size=(n, 9, 1))
        )
        values = compute_features(batch, F_D, FS)

        column = {(d.channel, d.kind): j for j, d in enumerate(F_D)}
        oracle = np.empty_like(values)
        peak_clear = np.ones(values.shape, dtype=bool)
        for b in range(n):
            for c, channel in enumerate(CHANNELS):
                features, margin = oracle_features(batch[b, c])
                for kind, value in features.items():
                    oracle[b, column[(channel, kind)]] = value
                peak_clear[b, column[(channel, FeatureKind.PEAK_FREQ)]] = margin > 1e-9

        peak = np.array([d.kind == FeatureKind.PEAK_FREQ for d in F_D])
        np.testing.assert_allclose(values[:, ~peak], oracle[:, ~peak], rtol=1e-6, atol=1e-9)
        clear = peak_clear[:, peak]
        assert clear.mean() > 0.99
        np.testing.assert_array_equal(values[:, peak][clear], oracle[:, peak][clear])


class TestExtractMatrix:
    """Test feature matrix assembly."""

    def test_full_grid(self, windows):
        """Test that all channels and kinds give 90 columns."""
        matrix = extract_matrix(windows)
        assert matrix.values.shape == (len(windows), 90)
        assert np.isfinite(matrix.values).all()
        np.testing.assert_array_equal(matrix.labels, windows.labels)

    def test_time_grid(self, windows):
        """Test that the time-domain kinds give 45 columns."""
        assert extract_matrix(windows, kind_subset=TIME_KINDS).values.shape[1] == 45

    def test_ankle_only(self, windows):
        """Test that ankle channels with all kinds give 30 columns."""
        matrix = extract_matrix(windows, channel_subset=["A_X", "A_Y", "A_Z"])
        assert matrix.values.shape[1] == 30
        assert all(d.channel.startswith("A_") for d in matrix.descriptors)

    def test_empty_subsets(self, windows):
        """Test that empty channel or kind subsets are rejected."""
        with pytest.raises(ConfigError):
            extract_matrix(windows, channel_subset=[])
        with pytest.raises(ConfigError):
            extract_matrix(windows, kind_subset=[])

    def test_select_and_csv(self, windows, tmp_path):
        """Test column selection and the CSV export."""
        matrix = extract_matrix(windows, kind_subset=TIME_KINDS)
        picked = matrix.select([F_TD[3], F_TD[0]])
        np.testing.assert_array_equal(picked.values[:, 1], matrix.values[:, 0])
        picked.to_csv(tmp_path / "m.csv")
        loaded = FeatureMatrix.from_csv(tmp_path / "m.csv")
        assert loaded.names == picked.names
        np.testing.assert_allclose(loaded.values, picked.values, rtol=1e-12)
        with pytest.raises(SchemaError):
            picked.select([F_D[5]])


class TestNormalize:
    """Test z-score normalization."""

    def _matrix(self, values):
        n = len(values)
        return FeatureMatrix(
            values=np.asarray(values, dtype=np.float64),
            descriptors=F_TD[:np.shape(values)[1]],
            labels=np.zeros(n, dtype=np.int8),
            subject_ids=np.ones(n, dtype=np.int32),
        )

    def test_standardizes_training_matrix(self):
        """Test zero mean and unit standard deviation per column."""
        values = np.random.default_rng(4).normal(5, 3, size=(200, 3))
        normed = normalize(self._matrix(values))
        np.testing.assert_allclose(normed.values.mean(axis=0), 0, atol=1e-9)
        np.testing.assert_allclose(normed.values.std(axis=0), 1, atol=1e-9)

    def test_constant_column(self):
        """Test that a constant column becomes zeros, not NaN."""
        normed = normalize(self._matrix(np.full((10, 2), 7.0)))
        assert np.array_equal(normed.values, np.zeros((10, 2)))

    def test_reuses_given_stats(self):
        """Test that supplied stats are applied unchanged."""
        train = normalize(self._matrix(np.random.default_rng(5).normal(size=(50, 2))))
        test = normalize(self._matrix(np.ones((4, 2))), train.stats)
        assert test.stats is train.stats
        expected = np.broadcast_to((1 - train.stats.mean) / train.stats.std, (4, 2))
        np.testing.assert_allclose(test.values, expected)


class TestSelectFeatures:
    """Test mutual-information ranking with correlation filtering."""

    def _matrix(self, columns, labels):
        values = np.column_stack(columns)
        return FeatureMatrix(
            values=values,
            descriptors=F_TD[:values.shape[1]],
            labels=np.asarray(labels, dtype=np.int8),
            subject_ids=np.ones(len(labels), dtype=np.int32),
        )

    def test_duplicate_and_constant_columns(self, caplog):
        """Test that one copy of a duplicate survives and constants are dropped."""
        rng = np.random.default_rng(6)
        labels = rng.integers(0, 2, size=400)
        informative = labels + rng.normal(0, 0.1, size=400)
        noise = rng.normal(size=400)
        matrix = self._matrix([informative, 2 * informative, noise, np.full(400, 3.0)], labels)
        with caplog.at_level(logging.WARNING, logger="fogsense.features"):
            subset = select_features(matrix, target_count=4)
        names = subset.names
        assert len(names) == 2
        assert F_TD[2].name in names
        assert (F_TD[0].name in names) != (F_TD[1].name in names)
        assert F_TD[3].name not in names
        assert "only 2 feature(s)" in caplog.text

    def test_median_indicator_ranked_first(self):
        """Test that the column defining the label is ranked first."""
        rng = np.random.default_rng(7)
        columns = [rng.normal(size=300) for _ in range(5)]
        labels = (columns[3] > np.median(columns[3])).astype(int)
        subset = select_features(self._matrix(columns, labels), target_count=1)
        assert subset.names == [F_TD[3].name]

    def test_rejects_zero_target(self):
        """Test that a non-positive target count is a configuration error."""
        with pytest.raises(ConfigError):
            select_features(self._matrix([np.arange(4.0)], [0, 1, 0, 1]), target_count=0)


class TestFeatureSubset:
    """Test feature manifests."""

    def test_save_and_load(self, tmp_path):
        """Test that a manifest reloads to the same descriptors and digest."""
        subset = FeatureSubset(F_D[:3])
        subset.save(tmp_path / "m.features")
        loaded = FeatureSubset.load(tmp_path / "m.features")
        assert loaded.descriptors == subset.descriptors
        assert len(loaded.digest()) == 32
        assert loaded.digest() == subset.digest()

    def test_comments_ignored(self, tmp_path):
        """Test that comment and blank lines are skipped."""
        path = tmp_path / "m.features"
        path.write_text("# chosen on fold 0\nA_X.Mean\n\nT_Z.FreezeIndex\n", encoding="utf-8")
        assert FeatureSubset.load(path).names == ["A_X.Mean", "T_Z.FreezeIndex"]

    def test_empty_manifest(self, tmp_path):
        """Test that an empty manifest is rejected."""
        path = tmp_path / "m.features"
        path.write_text("\n", encoding="utf-8")
        with pytest.raises(SchemaError):
            FeatureSubset.load(path)

    def test_digest_depends_on_order(self):
        """Test that reordering features changes the schema digest."""
        assert FeatureSubset(F_D[:2]).digest() != FeatureSubset(F_D[1::-1]).digest()


class TestFeatureSpec:
    """Test feature-set spec parsing."""

    def test_named_sets(self):
        """Test F_D and F_TD restricted to the given channels."""
        assert len(parse_feature_spec("F_D").extract) == 90
        assert len(parse_feature_spec("F_TD", CHANNELS[:3]).extract) == 15

    def test_selected(self):
        """Test selection specs over either base set."""
        spec = parse_feature_spec("selected:20")
        assert spec.select_k == 20
        assert len(spec.base) == 90
        assert len(parse_feature_spec("selected:10:F_TD").base) == 45

    def test_manifest(self, tmp_path):
        """Test that a manifest pins the extracted columns."""
        path = tmp_path / "m.features"
        FeatureSubset(F_D[:4]).save(path)
        spec = parse_feature_spec(f"manifest:{path}")
        assert spec.extract == F_D[:4]
        with pytest.raises(SchemaError):
            parse_feature_spec(f"manifest:{path}", CHANNELS[3:])

    def test_unknown(self):
        """Test that an unknown spec is a configuration error."""
        with pytest.raises(ConfigError):
            parse_feature_spec("F_X")

    def test_all_kinds_order(self):
        """Test that kinds come out in canonical order."""
        assert [d.kind for d in F_D[:10]] == list(ALL_KINDS)

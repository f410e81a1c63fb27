import json

import numpy as np
import pytest

from data import (SynthConfig, age_histogram, generate_synthetic, load_csv, save_csv,
                  save_ground_truth, speaker_kfold, synth_preset, zscore_apply, zscore_fit,
                  zscore_invert)
from errors import DataWarning, FormatError, InputError
from fairness import make_age_groups

HEADER = "id,speaker,age,label,f0,f1\n"


def _write(tmp_path, text, name='features.csv'):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadCsv:

    def test_well_formed(self, tmp_path):
        path = _write(tmp_path, HEADER + "a,p1,70,1,0.5,1\nb,p2,65.5,0,-1,2\nc,p2,80,1,3,4e-3\n")
        matrix, dropped = load_csv(path)
        assert matrix.n_samples == 3
        assert dropped == 0
        assert matrix.feature_names == ['f0', 'f1']
        np.testing.assert_array_equal(matrix.labels, [1, 0, 1])
        np.testing.assert_array_equal(matrix.features[2], [3.0, 4e-3])

    def test_drops_missing_age(self, tmp_path):
        rows = [f"s{i},p{i},{'' if i in (3, 7) else 60 + i},{i % 2},{i},1\n" for i in range(10)]
        path = _write(tmp_path, HEADER + "".join(rows))
        with pytest.warns(DataWarning, match='dropped 2'):
            matrix, dropped = load_csv(path)
        assert dropped == 2
        assert matrix.n_samples == 8
        assert 's3' not in matrix.ids

    def test_drops_unparseable_label(self, tmp_path):
        path = _write(tmp_path, HEADER + "a,p1,70,x,0,1\nb,p2,71,0,0,1\n")
        with pytest.warns(DataWarning):
            matrix, dropped = load_csv(path)
        assert dropped == 1
        assert list(matrix.ids) == ['b']

    def test_bad_header(self, tmp_path):
        path = _write(tmp_path, "id,age,speaker,label,f0\na,70,p1,1,0\n")
        with pytest.raises(FormatError):
            load_csv(path)

    def test_no_feature_columns(self, tmp_path):
        with pytest.raises(FormatError):
            load_csv(_write(tmp_path, "id,speaker,age,label\na,p1,70,1\n"))

    def test_non_numeric_feature_reports_location(self, tmp_path):
        path = _write(tmp_path, HEADER + "a,p1,70,1,0.5,1\nb,p2,65,0,0.1,oops\n")
        with pytest.raises(FormatError) as info:
            load_csv(path)
        assert info.value.row == 3
        assert info.value.column == 'f1'

    def test_label_outside_binary(self, tmp_path):
        with pytest.raises(FormatError) as info:
            load_csv(_write(tmp_path, HEADER + "a,p1,70,2,0,1\n"))
        assert info.value.column == 'label'

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_csv(tmp_path / 'nope.csv')

    def test_roundtrip_is_bitwise(self, tmp_path):
        matrix, _ = generate_synthetic(SynthConfig(n_samples=30, n_features=5, seed=4))
        path = save_csv(matrix, tmp_path / 'out.csv')
        again, dropped = load_csv(path)
        assert dropped == 0
        np.testing.assert_array_equal(again.features, matrix.features)
        np.testing.assert_array_equal(again.ages, matrix.ages)
        np.testing.assert_array_equal(again.labels, matrix.labels)
        np.testing.assert_array_equal(again.ids, matrix.ids)
        np.testing.assert_array_equal(again.speakers, matrix.speakers)

        # ingest -> save -> ingest is idempotent
        twice, _ = load_csv(save_csv(again, tmp_path / 'again.csv'))
        assert (tmp_path / 'out.csv').read_text() == (tmp_path / 'again.csv').read_text()
        np.testing.assert_array_equal(twice.features, again.features)


class TestZscore:

    def test_population_sd(self, matrix_factory):
        m = matrix_factory([[1.0], [2.0], [3.0]], ages=[60, 61, 62], labels=[0, 1, 0])
        out = zscore_apply(zscore_fit(m), m)
        np.testing.assert_allclose(out.features[:, 0], [-1.224744871391589, 0.0, 1.224744871391589])

    def test_constant_column(self, matrix_factory):
        m = matrix_factory([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]], ages=[60, 61, 62], labels=[0, 1, 0])
        with pytest.warns(DataWarning, match='constant'):
            stats = zscore_fit(m)
        assert stats.constant.tolist() == [True, False]
        np.testing.assert_array_equal(zscore_apply(stats, m).features[:, 0], 0.0)

    def test_train_fold_is_standardized(self, synth_small):
        out = zscore_apply(zscore_fit(synth_small), synth_small)
        np.testing.assert_allclose(out.features.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.features.std(axis=0), 1.0, atol=1e-10)

    def test_test_fold_uses_train_stats(self, synth_small):
        train, test = synth_small.subset(np.arange(30)), synth_small.subset(np.arange(30, 40))
        stats = zscore_fit(train)
        np.testing.assert_allclose(zscore_apply(stats, test).features,
                                   (test.features - train.features.mean(axis=0)) / train.features.std(axis=0))

    def test_invertible(self, synth_small):
        stats = zscore_fit(synth_small)
        back = zscore_invert(stats, zscore_apply(stats, synth_small))
        np.testing.assert_allclose(back.features, synth_small.features, rtol=1e-12, atol=1e-12)

    def test_empty_fold(self, synth_small):
        with pytest.raises(InputError):
            zscore_fit(synth_small.subset(np.array([], dtype=int)))


class TestSpeakerKfold:

    def test_two_speakers_per_fold(self, matrix_factory):
        m = matrix_factory(np.zeros((10, 1)), ages=np.arange(10), labels=np.arange(10) % 2)
        plan = speaker_kfold(m, 5, seed=0)
        assert sorted(np.bincount(plan.sample_folds).tolist()) == [2] * 5

    def test_deterministic(self, synth_small):
        a = speaker_kfold(synth_small, 4, seed=9)
        b = speaker_kfold(synth_small, 4, seed=9)
        np.testing.assert_array_equal(a.sample_folds, b.sample_folds)
        assert a.speaker_folds == b.speaker_folds

    def test_speaker_stays_together(self, matrix_factory):
        speakers = ['big'] * 7 + [f"p{i}" for i in range(8)]
        m = matrix_factory(np.zeros((15, 1)), ages=np.arange(15), labels=np.arange(15) % 2,
                           speakers=speakers)
        plan = speaker_kfold(m, 3, seed=1)
        assert len(set(plan.sample_folds[:7].tolist())) == 1

    def test_partition(self, synth_small):
        plan = speaker_kfold(synth_small, 5, seed=2)
        tests = [plan.test_indices(f) for f in range(5)]
        np.testing.assert_array_equal(np.sort(np.concatenate(tests)), np.arange(synth_small.n_samples))
        for fold, train, test in plan.splits():
            assert not set(synth_small.speakers[train]) & set(synth_small.speakers[test])

    def test_too_few_speakers(self, matrix_factory):
        m = matrix_factory(np.zeros((6, 1)), ages=np.arange(6), labels=np.arange(6) % 2,
                           speakers=['a', 'a', 'b', 'b', 'c', 'c'])
        with pytest.raises(InputError):
            speaker_kfold(m, 4, seed=0)
        with pytest.raises(InputError):
            speaker_kfold(m, 1, seed=0)


class TestSynthetic:

    def test_shapes_and_ids(self):
        matrix, truth = generate_synthetic(SynthConfig(n_samples=50, n_features=7, seed=3))
        assert matrix.features.shape == (50, 7)
        assert matrix.ids[0] == 's0000'
        assert truth.age_effect.shape == (7,)

    def test_bitwise_reproducible(self):
        a, _ = generate_synthetic(SynthConfig(seed=11))
        b, _ = generate_synthetic(SynthConfig(seed=11))
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.ages, b.ages)

    def test_older_is_likelier_impaired(self):
        m, _ = generate_synthetic(SynthConfig(n_samples=2000, seed=5))
        older = m.ages > np.median(m.ages)
        assert m.labels[older].mean() > m.labels[~older].mean()

    def test_effect_cosine_is_confound_strength(self):
        _, truth = generate_synthetic(SynthConfig(confound_strength=0.3, seed=2))
        assert truth.to_dict()['effect_cosine'] == pytest.approx(0.3, abs=1e-12)

    def test_zero_disease_scale(self):
        _, truth = generate_synthetic(SynthConfig(disease_effect_scale=0.0, seed=2))
        assert not truth.disease_effect.any()

    def test_presets(self):
        bank = synth_preset('dementiabank')
        assert (bank.n_samples, bank.age_mean, bank.age_sd) == (395, 68.26, 9.00)
        famous, _ = generate_synthetic(synth_preset('famous_people', seed=1))
        assert famous.n_samples == 245
        assert len(set(famous.speakers)) == 17
        for speaker in set(famous.speakers):
            assert len(set(famous.labels[famous.speakers == speaker])) == 1

    def test_unknown_preset(self):
        with pytest.raises(InputError):
            synth_preset('nope')

    @pytest.mark.parametrize('kwargs', [{'confound_strength': 1.5}, {'noise_sd': -1.0},
                                        {'age_sd': 0.0}, {'n_samples': 1}])
    def test_rejects_bad_config(self, kwargs):
        with pytest.raises(InputError):
            SynthConfig(**kwargs)

    def test_ground_truth_sidecar(self, tmp_path):
        _, truth = generate_synthetic(SynthConfig(n_samples=20, n_features=3, seed=0))
        path = save_ground_truth(truth, tmp_path / 'truth.json')
        payload = json.loads(path.read_text())
        assert payload['config']['n_features'] == 3
        np.testing.assert_allclose(payload['age_effect'], truth.age_effect)

    def test_dementiabank_like_ages_form_five_mixed_groups(self):
        m, _ = generate_synthetic(synth_preset('dementiabank', seed=0))
        grouping = make_age_groups(m.ages, m.labels, 5)
        assert grouping.is_valid
        assert all(p > 0 for p in grouping.positives)
        assert all(n > 0 for n in grouping.negatives)


class TestAgeHistogram:

    def test_counts(self, matrix_factory):
        m = matrix_factory(np.zeros((5, 1)), ages=[61, 62, 66, 71, 74], labels=[0, 1, 1, 0, 1])
        table = age_histogram(m, bin_width=5)
        assert list(table.columns) == ['bin_left', 'bin_right', 'control', 'dementia']
        assert table['bin_left'].tolist() == [60.0, 65.0, 70.0]
        assert table['control'].tolist() == [1, 0, 1]
        assert table['dementia'].tolist() == [1, 1, 1]

    def test_totals(self, synth_small):
        table = age_histogram(synth_small)
        assert table['control'].sum() + table['dementia'].sum() == synth_small.n_samples

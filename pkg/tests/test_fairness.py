import numpy as np
import pytest

from errors import DegenerateGroupError, FormatError, InputError
from fairness import (AgeGrouping, PredictionRecord, accuracy, delta_eo, delta_eo_bound_check,
                      grouped_rates, is_trivial_classifier, majority_predictions, make_age_groups,
                      outcomes_from_rates, read_predictions_csv, records_from_arrays,
                      write_predictions_csv)


def _records(true, pred, ages):
    return records_from_arrays([f"r{i}" for i in range(len(true))], true, pred, ages)


# Two age groups split at 71.5: (60..63) and (80..83)
FIXTURE_AGES = [60, 61, 62, 63, 80, 81, 82, 83]
FIXTURE_TRUE = [0, 0, 1, 1, 0, 0, 0, 1]
FIXTURE_PRED = [0, 1, 1, 0, 0, 0, 1, 1]


class TestMakeAgeGroups:

    def test_single_group(self):
        grouping = make_age_groups([50, 60, 70], [0, 1, 0], 1)
        assert grouping.boundaries == ()
        np.testing.assert_array_equal(grouping.assign([10, 60, 99]), [0, 0, 0])

    def test_median_split(self):
        grouping = make_age_groups(np.arange(1, 101), np.arange(100) % 2, 2)
        assert grouping.boundaries == (50.5,)

    def test_tie_goes_to_lower_group(self):
        grouping = AgeGrouping(n_groups=2, boundaries=(50.5,))
        np.testing.assert_array_equal(grouping.assign([50.5, 50.6, 10]), [0, 1, 0])

    def test_valid_and_degenerate(self):
        assert make_age_groups([1, 2, 3, 4], [0, 1, 1, 0], 2).status == 'valid'
        grouping = make_age_groups([1, 2, 3, 4], [0, 0, 1, 1], 2)
        assert grouping.status == 'degenerate'
        assert grouping.positives == (0, 2)

    def test_repeated_ages_keep_increasing_cuts(self):
        ages = [70] * 8 + [60, 80]
        grouping = make_age_groups(ages, [0, 1] * 5, 3)
        assert np.all(np.diff(grouping.boundaries) > 0)
        assert grouping.boundaries == (65.0, 75.0)

    def test_tied_ages_leave_no_group_empty(self):
        ages = [60] * 8 + [61, 62, 70, 71]
        grouping = make_age_groups(ages, [0, 1] * 6, 3)
        assert grouping.boundaries == (60.5, 66.0)
        assert grouping.status == 'valid'
        assert grouping.positives == (4, 1, 1)
        assert grouping.negatives == (4, 1, 1)
        assert set(grouping.assign(ages).tolist()) == {0, 1, 2}

    def test_cuts_fall_between_observed_ages(self):
        rng = np.random.default_rng(4)
        ages = rng.integers(60, 80, size=90)
        grouping = make_age_groups(ages, np.arange(90) % 2, 5)
        for cut in grouping.boundaries:
            assert cut not in set(ages.tolist())
        sizes = np.bincount(grouping.assign(ages), minlength=5)
        assert np.all(sizes > 0)

    def test_errors(self):
        with pytest.raises(InputError):
            make_age_groups([1, 2, 3], [0, 1, 0], 0)
        with pytest.raises(InputError):
            make_age_groups([5, 5, 6], [0, 1, 0], 3)


class TestGroupedRates:

    def test_all_correct(self):
        preds = _records(FIXTURE_TRUE, FIXTURE_TRUE, FIXTURE_AGES)
        out = grouped_rates(preds, make_age_groups(FIXTURE_AGES, FIXTURE_TRUE, 2))
        np.testing.assert_array_equal(out.fpr, [0.0, 0.0])
        np.testing.assert_array_equal(out.fnr, [0.0, 0.0])

    def test_hand_tally(self):
        preds = _records(FIXTURE_TRUE, FIXTURE_PRED, FIXTURE_AGES)
        out = grouped_rates(preds, make_age_groups(FIXTURE_AGES, FIXTURE_TRUE, 2))
        np.testing.assert_allclose(out.fpr, [1 / 2, 1 / 3])
        np.testing.assert_allclose(out.fnr, [1 / 2, 0.0])
        np.testing.assert_array_equal(out.n_negatives, [2, 3])
        np.testing.assert_array_equal(out.n_positives, [2, 1])
        assert delta_eo(out) == pytest.approx(1 / 6 + 1 / 2)

    def test_trivial_majority_classifier(self):
        rng = np.random.default_rng(3)
        ages = rng.uniform(50, 90, size=200)
        labels = (np.arange(200) < 60).astype(int)
        rng.shuffle(labels)
        pred = majority_predictions(labels)
        assert not pred.any()
        preds = _records(labels, pred, ages)
        out = grouped_rates(preds, make_age_groups(ages, labels, 2))
        np.testing.assert_array_equal(out.fpr, [0.0, 0.0])
        np.testing.assert_array_equal(out.fnr, [1.0, 1.0])
        # the only errors are false negatives, a fraction lambda of all samples
        assert 1.0 - accuracy(preds) == pytest.approx(0.3)

    def test_undefined_group_is_nan(self):
        preds = _records([0, 0, 1, 1], [0, 0, 1, 1], [1, 2, 3, 4])
        out = grouped_rates(preds, AgeGrouping(n_groups=2, boundaries=(2.5,)))
        assert np.isnan(out.fnr[0]) and np.isnan(out.fpr[1])
        assert out.undefined_groups() == [0, 1]

    def test_empty(self):
        with pytest.raises(InputError):
            grouped_rates([], AgeGrouping(n_groups=1, boundaries=()))


class TestDeltaEo:

    def test_hand_value(self):
        assert delta_eo(outcomes_from_rates([0.1, 0.3], [0.2, 0.2])) == pytest.approx(0.2, abs=1e-12)

    def test_one_group_is_zero(self):
        assert delta_eo(outcomes_from_rates([0.4], [0.7])) == 0.0

    def test_two_groups_is_pairwise_distance(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p, n = rng.uniform(size=2), rng.uniform(size=2)
            expected = abs(p[0] - p[1]) + abs(n[0] - n[1])
            assert delta_eo(outcomes_from_rates(p, n)) == pytest.approx(expected, abs=1e-12)

    def test_zero_iff_rates_equal(self):
        assert delta_eo(outcomes_from_rates([0.2] * 5, [0.4] * 5)) == 0.0
        assert delta_eo(outcomes_from_rates([0.2] * 4 + [0.21], [0.4] * 5)) > 0.0

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        p, n = rng.uniform(size=5), rng.uniform(size=5)
        order = rng.permutation(5)
        assert delta_eo(outcomes_from_rates(p, n)) == pytest.approx(
            delta_eo(outcomes_from_rates(p[order], n[order])), abs=1e-12)

    def test_count_invariant(self):
        grouping = make_age_groups(FIXTURE_AGES, FIXTURE_TRUE, 2)
        once = _records(FIXTURE_TRUE, FIXTURE_PRED, FIXTURE_AGES)
        thrice = _records(FIXTURE_TRUE * 3, FIXTURE_PRED * 3, FIXTURE_AGES * 3)
        assert delta_eo(grouped_rates(thrice, grouping)) == delta_eo(grouped_rates(once, grouping))

    def test_degenerate_group_is_named(self):
        preds = _records([0, 0, 1, 1], [0, 1, 1, 0], [1, 2, 3, 4])
        with pytest.raises(DegenerateGroupError) as info:
            delta_eo(grouped_rates(preds, AgeGrouping(n_groups=2, boundaries=(2.5,))))
        assert info.value.group == 0


class TestBoundCheck:

    def test_perfect_classifier(self):
        check = delta_eo_bound_check(outcomes_from_rates([0.0] * 3, [0.0] * 3), False)
        assert check.delta == 0.0
        assert check.regime == 'non-trivial'
        assert check.passed

    def test_fuzz_nontrivial_envelope(self):
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            n = int(rng.integers(1, 11))
            check = delta_eo_bound_check(
                outcomes_from_rates(rng.uniform(0, 0.5, n), rng.uniform(0, 0.5, n)), False)
            assert check.in_nontrivial_envelope
            assert check.within_nontrivial
            assert check.passed

    def test_fuzz_unconditional(self):
        rng = np.random.default_rng(8)
        for _ in range(10_000):
            n = int(rng.integers(1, 11))
            check = delta_eo_bound_check(outcomes_from_rates(rng.uniform(size=n), rng.uniform(size=n)), True)
            assert check.within_unconditional
            assert check.passed

    def test_alternating_extremes_are_trivial_regime(self):
        check = delta_eo_bound_check(outcomes_from_rates([0, 1, 0, 1], [1, 0, 1, 0]), False)
        assert check.delta == 4.0
        assert check.regime == 'trivial'
        assert not check.in_nontrivial_envelope
        assert check.within_unconditional and check.passed

    def test_trivial_flag_sets_regime(self):
        check = delta_eo_bound_check(outcomes_from_rates([0.0, 0.0], [1.0, 1.0]), True)
        assert check.regime == 'trivial'
        assert check.delta == 0.0


class TestAccuracy:

    def test_values(self):
        assert accuracy(_records([0, 1], [0, 1], [60, 70])) == 1.0
        assert accuracy(_records([0, 1], [1, 0], [60, 70])) == 0.0
        assert accuracy(_records([0, 1, 1, 0], [0, 1, 0, 0], [60, 61, 62, 63])) == 0.75

    def test_empty(self):
        with pytest.raises(InputError):
            accuracy([])

    def test_record_labels_binary(self):
        with pytest.raises(InputError):
            PredictionRecord('x', 2, 0, 60.0)


class TestTrivialClassifier:

    def test_majority(self):
        np.testing.assert_array_equal(majority_predictions([0, 0, 1]), [0, 0, 0])
        np.testing.assert_array_equal(majority_predictions([1, 0]), [1, 1])

    def test_is_trivial(self):
        assert is_trivial_classifier(_records([0, 1, 1], [1, 1, 1], [1, 2, 3]))
        assert not is_trivial_classifier(_records([0, 1, 1], [0, 1, 1], [1, 2, 3]))


class TestPredictionsCsv:

    def test_roundtrip(self, tmp_path):
        preds = _records(FIXTURE_TRUE, FIXTURE_PRED, FIXTURE_AGES)
        path = write_predictions_csv(preds, tmp_path / 'preds.csv')
        assert path.read_text().splitlines()[0] == 'id,true_label,pred_label,age'
        assert read_predictions_csv(path) == preds

    def test_bad_header(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text("id,label,pred,age\na,0,0,60\n")
        with pytest.raises(FormatError):
            read_predictions_csv(path)

    def test_bad_label(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text("id,true_label,pred_label,age\na,0,0,60\nb,3,0,61\n")
        with pytest.raises(FormatError) as info:
            read_predictions_csv(path)
        assert info.value.row == 3

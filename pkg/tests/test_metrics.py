import itertools
import json

import numpy as np
import pytest

from iptdet.dataset import ClassMap, IPTEvent
from iptdet.metrics import (
    EvalReport,
    build_report,
    event_f1,
    frame_f1,
    match_events,
    per_class_histogram,
)


def exhaustive_max_matching(pred, ref, tolerance):
    """Try every one-to-one assignment; return the best cardinality."""
    compatible = [
        (i, j)
        for i, e in enumerate(pred)
        for j, r in enumerate(ref)
        if e.label == r.label and abs(e.onset - r.onset) <= tolerance
    ]
    best = 0
    for k in range(len(compatible), 0, -1):
        for combo in itertools.combinations(compatible, k):
            preds = [i for i, _ in combo]
            refs = [j for _, j in combo]
            if len(set(preds)) == k and len(set(refs)) == k:
                return k
    return best


def random_events(rng, n, n_classes=2):
    return [
        IPTEvent(int(rng.integers(n_classes)), float(on), float(on) + 0.1)
        for on in rng.uniform(0, 1.0, n)
    ]


class TestFrameF1:
    def test_perfect_prediction(self):
        ref = np.zeros((10, 2), dtype=int)
        ref[:5, 0] = 1
        ref[3:, 1] = 1
        micro, macro, _ = frame_f1(ref, ref)
        assert micro == 1.0 and macro == 1.0

    def test_two_class_worked_example(self):
        # class A: 10 TP; class B: 10 FN
        ref = np.ones((10, 2), dtype=int)
        pred = ref.copy()
        pred[:, 1] = 0
        micro, macro, per_class = frame_f1(pred, ref)
        assert micro == pytest.approx(2 * 10 / (2 * 10 + 10))
        assert macro == pytest.approx(0.5)
        assert per_class[0]["f1"] == 1.0 and per_class[1]["f1"] == 0.0

    def test_all_negative_zero_support(self):
        z = np.zeros((5, 3), dtype=int)
        micro, macro, per_class = frame_f1(z, z)
        assert micro == 0.0 and macro == 0.0
        assert all(pc["support"] == 0 for pc in per_class)

    def test_mask_excludes_frames(self):
        ref = np.zeros((4, 1), dtype=int)
        pred = np.ones((4, 1), dtype=int)
        mask = np.array([0, 0, 0, 0])
        micro, _, _ = frame_f1(pred, ref, mask)
        assert micro == 0.0  # nothing scored

    def test_micro_equals_flattened_single_class(self, rng):
        pred = rng.integers(0, 2, (30, 4))
        ref = rng.integers(0, 2, (30, 4))
        micro, _, _ = frame_f1(pred, ref)
        flat_micro, _, _ = frame_f1(pred.reshape(-1, 1), ref.reshape(-1, 1))
        assert micro == pytest.approx(flat_micro)

    def test_permutation_invariance(self, rng):
        pred = rng.integers(0, 2, (20, 3))
        ref = rng.integers(0, 2, (20, 3))
        micro, macro, _ = frame_f1(pred, ref)
        perm = [2, 0, 1]
        micro2, macro2, _ = frame_f1(pred[:, perm], ref[:, perm])
        assert micro == pytest.approx(micro2) and macro == pytest.approx(macro2)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            frame_f1(np.zeros((3, 2)), np.zeros((3, 3)))


class TestMatchEvents:
    def test_within_tolerance_matched(self):
        pred = [IPTEvent(0, 1.000, 1.5)]
        ref = [IPTEvent(0, 1.040, 1.8)]
        assert match_events(pred, ref, 0.05) == [(0, 0)]

    def test_beyond_tolerance_unmatched(self):
        pred = [IPTEvent(0, 1.000, 1.5)]
        ref = [IPTEvent(0, 1.060, 1.8)]
        assert match_events(pred, ref, 0.05) == []

    def test_one_to_one_near_single_ref(self):
        pred = [IPTEvent(0, 0.99, 1.5), IPTEvent(0, 1.01, 1.5)]
        ref = [IPTEvent(0, 1.0, 1.5)]
        assert len(match_events(pred, ref, 0.05)) == 1

    def test_label_must_agree(self):
        assert match_events([IPTEvent(0, 1.0, 1.5)], [IPTEvent(1, 1.0, 1.5)], 0.05) == []

    def test_offsets_ignored(self):
        assert match_events([IPTEvent(0, 1.0, 9.0)], [IPTEvent(0, 1.0, 1.1)], 0.05) == [(0, 0)]

    def test_cardinality_matches_exhaustive_search(self, rng):
        for _ in range(200):
            pred = random_events(rng, int(rng.integers(0, 7)))
            ref = random_events(rng, int(rng.integers(0, 7)))
            got = len(match_events(pred, ref, 0.05))
            want = exhaustive_max_matching(pred, ref, 0.05)
            assert got == want


class TestEventF1:
    def test_identity_scores_one(self, rng, class_map):
        events = random_events(rng, 5, class_map.n_ipt)
        micro, macro, _ = event_f1(events, events, 0.05, class_map)
        assert micro == 1.0

    def test_empty_pred_zero(self, rng, class_map):
        ref = random_events(rng, 4, class_map.n_ipt)
        micro, macro, _ = event_f1([], ref, 0.05, class_map)
        assert micro == 0.0 and macro == 0.0

    def test_tolerance_monotonicity(self, rng, class_map):
        for _ in range(50):
            pred = random_events(rng, int(rng.integers(0, 6)), class_map.n_ipt)
            ref = random_events(rng, int(rng.integers(0, 6)), class_map.n_ipt)
            lo, _, _ = event_f1(pred, ref, 0.05, class_map)
            hi, _, _ = event_f1(pred, ref, 0.20, class_map)
            assert hi >= lo - 1e-12

    def test_macro_is_mean_of_per_class(self, rng, class_map):
        pred = random_events(rng, 8, class_map.n_ipt)
        ref = random_events(rng, 8, class_map.n_ipt)
        _, macro, per_class = event_f1(pred, ref, 0.05, class_map)
        assert macro == pytest.approx(np.mean([pc["f1"] for pc in per_class]), abs=1e-9)


class TestReport:
    def _report(self, class_map):
        pred = [np.array([[1, 0, 0], [0, 1, 0]])]
        ref = [np.array([[1, 0, 0], [0, 1, 0]])]
        ev = [IPTEvent(0, 0.0, 0.5)]
        return build_report(pred, ref, ev, ev, class_map)

    def test_report_roundtrip(self, tmp_path, class_map):
        r = self._report(class_map)
        p = tmp_path / "r.json"
        r.save(p)
        back = EvalReport.load(p)
        assert back.to_dict() == r.to_dict()

    def test_macro_consistency(self, class_map):
        r = self._report(class_map)
        assert r.frame_macro_f1 == pytest.approx(
            np.mean([v["frame_f1"] for v in r.per_class.values()]), abs=1e-9
        )

    def test_histogram_outputs(self, tmp_path, class_map):
        r = self._report(class_map)
        png, csv_path = per_class_histogram(r, tmp_path / "h.png")
        assert png.exists() and csv_path.exists()
        rows = csv_path.read_text().strip().splitlines()[1:]
        assert len(rows) == class_map.n_ipt
        for row, (name, vals) in zip(rows, r.per_class.items()):
            cls, val = row.split(",")
            assert cls == name
            assert float(val) == vals["frame_f1"]  # bit-exact via repr

    def test_single_class_histogram(self, tmp_path):
        cm = ClassMap(("solo",), (60, 60))
        r = build_report(
            [np.ones((3, 1), dtype=int)], [np.ones((3, 1), dtype=int)],
            [], [], cm,
        )
        png, csv_path = per_class_histogram(r, tmp_path / "one.png")
        assert len(csv_path.read_text().strip().splitlines()) == 2

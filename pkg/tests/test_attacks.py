from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpflcert.attacks import (AttackSpec, apply_backdoor, corner_pattern, decompose_dba, flip_label,
                              format_pattern, parse_pattern, poison_federation, scale_update, stamp,
                              triangle_pattern)
from dpflcert.data import Dataset, LabeledExample, partition_iid, synthesize_blobs
from dpflcert.errors import ConfigurationError, PatternError

EX = LabeledExample(np.array([0.2, 0.4, 0.6, 0.8, 0.5]), 1)


def test_empty_pattern_only_relabels():
    out = apply_backdoor(EX, (), 0)
    assert out.label == 0
    assert np.array_equal(out.features, EX.features)


def test_three_pixel_pattern():
    out = apply_backdoor(EX, corner_pattern(5), 0)
    assert out.features.tolist() == [0.2, 0.4, 1.0, 1.0, 1.0]


def test_backdoor_idempotent():
    pat = ((0, 0.7), (3, 2.0))
    once = apply_backdoor(EX, pat, 0)
    twice = apply_backdoor(once, pat, 0)
    assert np.array_equal(once.features, twice.features)
    assert once.features[3] == 1.0  # clamped


def test_pattern_out_of_range():
    with pytest.raises(PatternError):
        apply_backdoor(EX, ((5, 1.0),), 0)
    with pytest.raises(PatternError):
        corner_pattern(2, 3)


def test_backdoor_does_not_mutate_input():
    x = EX.features.copy()
    apply_backdoor(EX, corner_pattern(5), 0)
    assert np.array_equal(EX.features, x)


def test_triangle_pattern_lower_right():
    pat = triangle_pattern(28, 3)
    assert len(pat) == 6
    rows_cols = [divmod(i, 28) for i, _ in pat]
    assert all(r >= 24 and c >= 24 for r, c in rows_cols)


def test_pattern_text_round_trip():
    pat = ((3, 1.0), (7, 0.25))
    assert parse_pattern(format_pattern(pat)) == pat
    assert parse_pattern("4") == ((4, 1.0),)


@pytest.mark.parametrize("n,k,sizes", [(4, 4, [1, 1, 1, 1]), (3, 1, [3]), (5, 2, [3, 2])])
def test_dba_sizes(n, k, sizes):
    pat = tuple((i, 1.0) for i in range(n))
    parts = decompose_dba(pat, k)
    assert [len(p) for p in parts] == sizes
    assert sum(parts, ()) == pat


def test_dba_too_many_parts():
    with pytest.raises(ConfigurationError):
        decompose_dba(((0, 1.0),), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.data())
def test_dba_composition_equals_full_pattern(n, data):
    k = data.draw(st.integers(1, n))
    values = data.draw(st.lists(st.floats(0, 1), min_size=n, max_size=n))
    pat = tuple(zip(range(n), values))
    x = np.linspace(-1, 2, n + 2)
    full = apply_backdoor(LabeledExample(x, 1), pat, 0)
    step = LabeledExample(x, 1)
    for part in decompose_dba(pat, k):
        step = apply_backdoor(step, part, 0)
    assert np.array_equal(step.features, full.features)
    assert step.label == full.label


def test_flip_label_cases():
    assert flip_label(EX, 1, 0).label == 0
    assert flip_label(LabeledExample(EX.features, 2), 1, 0).label == 2
    assert flip_label(EX, 1, 1).label == 1
    assert np.array_equal(flip_label(EX, 1, 0).features, EX.features)


def test_scale_update():
    d = np.array([0.06, 0.08])
    assert np.array_equal(scale_update(d, 1.0), d)
    assert np.linalg.norm(scale_update(d, 50)) == pytest.approx(5.0)
    assert not scale_update(np.zeros(3), 7).any()
    with pytest.raises(ConfigurationError):
        scale_update(d, 0.5)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        AttackSpec("XYZ", 1)
    with pytest.raises(ConfigurationError):
        AttackSpec("BKD", 1, poison_fraction=1.5)
    with pytest.raises(ConfigurationError):
        AttackSpec("BKD", 1, scale=0.9)
    with pytest.raises(ConfigurationError):
        AttackSpec("DBA", 4, pattern=corner_pattern(5))
    spec = AttackSpec("DBA", 3, pattern=corner_pattern(5))
    assert AttackSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("alpha", [0.0, 0.1, 0.5, 1.0])
def test_user_level_flag_counts(federation, alpha):
    data, part = federation
    spec = AttackSpec("BKD", 3, alpha, 10.0, corner_pattern(5))
    view = poison_federation(data, part, spec)
    for u in range(part.n_users):
        flagged = int(view.flags[part.user_indices[u]].sum())
        expected = math.ceil(alpha * len(part.user_indices[u])) if u < 3 else 0
        assert flagged == expected
        assert view.scale_for(u) == (10.0 if u < 3 else 1.0)
    assert view.adversaries == (0, 1, 2)


def test_poisoned_rows_carry_trigger_and_target(federation):
    data, part = federation
    view = poison_federation(data, part, AttackSpec("BKD", 2, 1.0, 1.0, corner_pattern(5)))
    rows = np.flatnonzero(view.flags)
    assert (view.labels[rows] == 0).all()
    assert (view.features[rows][:, 2:] == 1.0).all()
    clean = np.flatnonzero(~view.flags)
    assert np.array_equal(view.features[clean], data.features[clean])


def test_base_dataset_untouched(federation):
    data, part = federation
    before = data.checksum()
    for kind in ("BKD", "LF", "DBA"):
        poison_federation(data, part, AttackSpec(kind, 2, 1.0, 1.0, corner_pattern(5)))
    assert data.checksum() == before


def test_dba_parts_per_adversary(federation):
    data, part = federation
    view = poison_federation(data, part, AttackSpec("DBA", 3, 1.0, 1.0, corner_pattern(5)))
    for u, col in zip(range(3), (2, 3, 4)):
        rows = part.user_indices[u]
        assert (view.features[rows, col] == 1.0).all()
        others = [c for c in (2, 3, 4) if c != col]
        assert np.array_equal(view.features[rows][:, others], data.features[rows][:, others])


def test_label_flip_only_source(federation):
    data, part = federation
    view = poison_federation(data, part, AttackSpec("LF", 2, 1.0))
    rows = np.concatenate(part.user_indices[:2])
    src = rows[data.labels[rows] == 1]
    assert (view.labels[src] == 0).all()
    assert np.array_equal(view.features, data.features)
    assert view.labels[np.setdiff1d(np.arange(len(data)), rows)].tolist() == \
        data.labels[np.setdiff1d(np.arange(len(data)), rows)].tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 60), st.integers(1, 12), st.sampled_from(["BKD", "LF"]))
def test_instance_level_flags_exactly_k(k, n_users, kind):
    data = synthesize_blobs(120, 4, 2, 1.0, seed=0)
    part = partition_iid(data, n_users, seed=k)
    view = poison_federation(data, part, AttackSpec(kind, k, pattern=corner_pattern(4), level="instance"))
    assert view.poisoned_count() == k
    if kind == "LF":
        assert (data.labels[view.flags] == 1).all()


def test_instance_level_too_few_eligible():
    data = Dataset(np.zeros((4, 2)), [0, 0, 0, 1], 2)
    with pytest.raises(ConfigurationError):
        poison_federation(data, partition_iid(data, 2, 0), AttackSpec("LF", 2, level="instance"))


def test_too_many_adversaries(federation):
    data, part = federation
    with pytest.raises(ConfigurationError):
        poison_federation(data, part, AttackSpec("BKD", 11, pattern=corner_pattern(5)))

import numpy as np
import pytest
from numpy.testing import assert_allclose

from crnnrec.errors import InputError
from crnnrec.synthetic import (SyntheticSpec, bayes_recall_at_k, context_information,
                               deterministic_spec, empirical_transitions, generate_synthetic,
                               informative_spec, mixture_transitions, topk_mass, uniform_spec)


def small_spec(seed=0, n_items=5, n_types=2):
    rng = np.random.default_rng(seed)
    trans = rng.dirichlet(np.ones(n_items), size=(n_types, n_items))
    lengths = np.zeros(8)
    lengths[2:] = 1 / 6
    return SyntheticSpec(trans, np.full(n_types, 1 / n_types), np.full(n_items, 1 / n_items), lengths,
                         np.tile([[1.0, 100.0]], (n_types, 1)), tuple(f"t{i}" for i in range(n_types)))


def test_deterministic_spec_is_perfectly_predictable():
    assert bayes_recall_at_k(deterministic_spec(), 1) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("k", [1, 5, 10, 50])
def test_uniform_spec_recall_is_k_over_items(k):
    assert bayes_recall_at_k(uniform_spec(n_items=100), k) == pytest.approx(k / 100, abs=1e-12)
    assert bayes_recall_at_k(uniform_spec(n_items=100), k, use_event_type=False) == pytest.approx(k / 100)


def test_empirical_transitions_converge():
    spec = small_spec()
    sessions = generate_synthetic(spec, 100_000, seed=1)
    emp = empirical_transitions(sessions, spec.n_items, spec.n_types)
    assert np.max(np.abs(emp - spec.transitions)) < 0.01


def test_generated_sessions_follow_spec():
    spec = informative_spec(n_items=30, seed=2)
    sessions = generate_synthetic(spec, 2000, seed=3)
    lengths = np.array([len(s) for s in sessions])
    assert lengths.min() >= 2 and lengths.max() <= spec.max_len
    assert_allclose(np.bincount(lengths, minlength=spec.max_len + 1) / 2000, spec.length_probs, atol=0.03)
    for s in sessions[:200]:
        ts = np.array(s.timestamps)
        gaps = np.diff(ts)
        lo, hi = spec.gap_ranges[list(s.event_types[1:])].T
        assert np.all((gaps >= np.floor(lo)) & (gaps <= hi))
    assert len({s.session_id for s in sessions}) == 2000
    assert generate_synthetic(spec, 50, seed=3) == generate_synthetic(spec, 50, seed=3)


def test_bayes_recall_matches_simulated_oracle_predictor():
    spec = informative_spec(n_items=40, seed=4)
    sessions = generate_synthetic(spec, 20_000, seed=5)
    for k in (1, 5):
        hits = n = 0
        for s in sessions:
            for t in range(1, len(s)):
                row = spec.transitions[s.event_types[t], s.items[t - 1]]
                top = np.argsort(-row, kind="stable")[:k]
                hits += s.items[t] in top
                n += 1
        assert hits / n == pytest.approx(bayes_recall_at_k(spec, k), abs=0.01)


def test_event_type_raises_the_bayes_ceiling():
    spec = informative_spec()
    with_ctx, without = bayes_recall_at_k(spec, 10), bayes_recall_at_k(spec, 10, use_event_type=False)
    assert with_ctx > without + 0.05
    assert context_information(spec) > 0.1
    assert context_information(uniform_spec()) == pytest.approx(0.0, abs=1e-12)


def test_topk_mass_and_mixture():
    p = np.array([[0.1, 0.5, 0.4], [0.3, 0.3, 0.4]])
    assert_allclose(topk_mass(p, 2), [0.9, 0.7])
    spec = small_spec()
    assert_allclose(mixture_transitions(spec).sum(axis=1), 1.0)


def test_degenerate_specs_rejected():
    spec = small_spec()
    bad_rows = spec.transitions.copy()
    bad_rows[0, 0] *= 2
    lengths_short = np.array([0.5, 0.5, 0.0])
    with pytest.raises(InputError):
        SyntheticSpec(bad_rows, spec.type_probs, spec.initial, spec.length_probs, spec.gap_ranges,
                      spec.event_types)
    with pytest.raises(InputError):
        SyntheticSpec(spec.transitions, spec.type_probs, spec.initial, lengths_short, spec.gap_ranges,
                      spec.event_types)
    with pytest.raises(InputError):
        SyntheticSpec(spec.transitions, spec.type_probs, spec.initial, spec.length_probs,
                      spec.gap_ranges[:1], spec.event_types)
    with pytest.raises(InputError):
        uniform_spec().__class__(**{**uniform_spec().to_dict(), "min_information": 0.1})
    with pytest.raises(InputError):
        generate_synthetic(spec, 0)


def test_spec_round_trip(tmp_path):
    spec = informative_spec(n_items=12, seed=6)
    spec.save(tmp_path / "spec.json")
    back = SyntheticSpec.load(tmp_path / "spec.json")
    assert_allclose(back.transitions, spec.transitions, rtol=0, atol=0)
    assert back.event_types == spec.event_types
    assert bayes_recall_at_k(back, 10) == bayes_recall_at_k(spec, 10)

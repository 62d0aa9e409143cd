import json

import numpy as np
import pytest

from graphtune.cpcs import annd_scores, run_cpcs, select_pair
from graphtune.pcr import SurrogateCoeffs, surrogate_records
from graphtune.qpp import make_training_matrix, train_qpp
from graphtune.space import ConfigSpace


def test_select_pair_examples():
    assert select_pair([1.0, 5.0, 3.0, 2.9]) == (1, 2)
    # mean 3; the max itself sits nearest but is excluded
    assert select_pair([3.0, 0.0, 6.0, 3.5]) == (2, 0)
    assert select_pair([4.0]) == (0, 0)
    # ties resolve to the lowest index
    assert select_pair([2.0, 2.0, 1.0, 3.0]) == (3, 0)
    with pytest.raises(ValueError):
        select_pair([])


def test_annd_scores_hand():
    base = np.array([[0.0], [10.0]])
    groups = [np.array([[1.0], [2.0]]), np.array([[9.0]]), np.array([[5.0], [20.0]])]
    assert annd_scores(groups, base).tolist() == [1.5, 1.0, 7.5]
    with pytest.raises(ValueError):
        annd_scores([], base)
    with pytest.raises(ValueError):
        annd_scores([np.zeros((0, 1))], base)


SPACE = ConfigSpace.reduced()


@pytest.fixture(scope="module")
def setup():
    perf, feats = {}, {}
    for i in range(2):
        co = SurrogateCoeffs.draw(40 + i)
        perf[f"b{i}"] = [r for cp in SPACE.construction_configs() for r in surrogate_records(co, cp, SPACE.efs_grid)]
        feats[f"b{i}"] = co.features()
    samples, norm = make_training_matrix(perf, feats)
    model = train_qpp(samples, norm, seed=0)
    new = SurrogateCoeffs.draw(77, shift=0.5)
    return samples, norm, model, new


def _collector(new, calls):
    def collect(cps):
        calls.append(list(cps))
        return {cp: surrogate_records(new, cp, SPACE.efs_grid) for cp in cps}

    return collect


def test_budget_and_bookkeeping(setup):
    samples, norm, model, new = setup
    calls = []
    res = run_cpcs("new", new.features(), samples, norm, model, SPACE, _collector(new, calls), rounds=3)
    assert res.rounds_used == len(res.rounds) <= 3
    flat = [cp for c in calls for cp in c]
    assert len(flat) <= 6 and len(set(flat)) == len(flat)
    assert res.selected == flat
    assert all(len(c) in (1, 2) for c in calls)
    assert len(res.samples) == len(samples) + len(res.records)
    for r in res.rounds:
        assert r.similar == (r.d_bar <= r.d_tr)


def test_zero_rounds_is_a_no_op(setup):
    samples, norm, model, new = setup
    calls = []
    res = run_cpcs("new", new.features(), samples, norm, model, SPACE, _collector(new, calls), rounds=0)
    assert calls == [] and res.model is model and res.rounds_used == 0


def test_exclusions_respected(setup):
    samples, norm, model, new = setup
    calls = []
    excl = SPACE.construction_configs()[:15]
    res = run_cpcs("new", new.features(), samples, norm, model, SPACE, _collector(new, calls), rounds=7, exclude=excl)
    assert not set(res.selected) & set(excl)
    assert len(res.selected) <= 5


def test_resume_after_interruption(setup, tmp_path):
    samples, norm, model, new = setup
    calls = []
    first = run_cpcs("new", new.features(), samples, norm, model, SPACE, _collector(new, calls),
                     rounds=1, state_dir=tmp_path)
    state = json.loads((tmp_path / "state.json").read_text())
    assert state["selected"] == [list(c) for c in first.selected]
    assert (tmp_path / "records.csv").exists()
    if first.rounds[-1].similar:
        return
    calls.clear()
    second = run_cpcs("new", new.features(), samples, norm, model, SPACE, _collector(new, calls),
                      rounds=3, state_dir=tmp_path)
    assert second.rounds[0].to_dict() == first.rounds[0].to_dict()
    resumed = [cp for c in calls for cp in c]
    assert not set(resumed) & set(first.selected)
    assert second.selected[: len(first.selected)] == first.selected


def test_round_log_schema(setup):
    samples, norm, model, new = setup
    res = run_cpcs("new", new.features(), samples, norm, model, SPACE, _collector(new, []), rounds=1,
                   evaluate=lambda m: {"recall": 1.0, "adcn": 2.0})
    d = res.rounds[0].to_dict()
    assert set(d) == {"round", "j1_config", "j2_config", "d_bar", "d_tr", "similar", "qpp_mape_if_available"}
    assert d["qpp_mape_if_available"] == {"recall": 1.0, "adcn": 2.0}


def test_negative_rounds_rejected(setup):
    samples, norm, model, new = setup
    with pytest.raises(ValueError):
        run_cpcs("new", new.features(), samples, norm, model, SPACE, _collector(new, []), rounds=-1)

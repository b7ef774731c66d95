from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desmoe.datagen import (FIRST_SYMBOL, IGNORE, MARKERS, SEP, SEQ_LEN, TASK_KINDS, TRAIN_OFFSET, DomainSpec,
                            _solve, build_suite, default_domains, encode, exact_match, exact_match_eval,
                            general_spec, make_example, sample_batch)
from desmoe.moe_core import ModelConfig, MoEModel


def test_task_definitions():
    assert _solve("copy", [1, 2, 3]) == [1, 2, 3]
    assert _solve("reverse", [1, 2, 3]) == [3, 2, 1]
    assert _solve("modular-add", [3, 9]) == [2]
    assert _solve("sort", [4, 1, 3]) == [1, 3, 4]
    assert _solve("parity", [1, 1, 0, 1]) == [1]


def test_encode_layout():
    spec = DomainSpec(0, "copy")
    inp, tgt = encode(spec, [0, 1, 2], [0, 1, 2])
    seq = [MARKERS["copy"], FIRST_SYMBOL, FIRST_SYMBOL + 1, FIRST_SYMBOL + 2, SEP,
           FIRST_SYMBOL, FIRST_SYMBOL + 1, FIRST_SYMBOL + 2]
    assert inp[:7].tolist() == seq[:-1] and (inp[7:] == 0).all()
    answer = tgt != IGNORE
    assert np.nonzero(answer)[0].tolist() == [4, 5, 6]
    assert tgt[answer].tolist() == seq[5:]


@pytest.mark.parametrize("kind", TASK_KINDS + ("lookup",))
def test_examples_are_consistent(kind):
    spec = general_spec() if kind == "lookup" else DomainSpec(0, kind)
    for i in range(200):
        x, y = make_example(spec, i)
        lo, hi = spec.symbols
        if kind == "pattern-fill":
            period = None
            for p in range(1, len(x) + 1):
                if all(x[j] == x[j % p] for j in range(len(x))) and len(x) >= 2 * p:
                    period = p
                    break
            assert period is not None
            assert y == [x[(len(x) + j) % period] for j in range(len(y))]
        elif kind in ("modular-add", "parity"):
            base = lo
            assert y == [_solve(kind, [v - base for v in x])[0] + base]
        else:
            assert y == _solve(kind, x)
        assert all(0 <= v < 20 for v in x + y)
        inp, _ = encode(spec, x, y)
        assert inp.shape == (SEQ_LEN,)


def test_same_seed_and_step_gives_identical_bytes():
    doms = default_domains(4)
    for mode in ("grouped", "mixed"):
        a = sample_batch(doms, 17, 16, mode).tobytes()
        b = sample_batch(doms, 17, 16, mode).tobytes()
        assert a == b
        assert a != sample_batch(doms, 18, 16, mode).tobytes()


def test_grouped_and_mixed_modes():
    doms = default_domains(3)
    g = sample_batch(doms, 4, 8, "grouped")
    assert not g.mixed and (g.domains == 1).all()
    m = sample_batch(doms, 4, 8, "mixed")
    assert m.mixed and set(m.domains.tolist()) == {0, 1, 2}
    assert m.token_domains.shape == (8 * SEQ_LEN,)
    with pytest.raises(ValueError):
        sample_batch(doms, 0, 4, "shuffled")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000), st.integers(0, 50))
def test_mixed_batch_contains_every_domain(nd, step, extra):
    doms = default_domains(nd)
    b = sample_batch(doms, step, nd + extra, "mixed")
    assert set(b.domains.tolist()) == set(range(nd))


def test_train_and_eval_index_ranges_disjoint():
    spec = DomainSpec(0, "sort", seed=3)
    suite = build_suite([spec], 64)
    train = sample_batch(spec, 0, 64)
    eval_rows = {r.tobytes() for r in suite.items["0:sort"][0]}
    # index ranges never overlap; identical rows can only be coincidental collisions of short inputs
    assert TRAIN_OFFSET > 64
    with pytest.raises(ValueError):
        build_suite([spec], TRAIN_OFFSET + 1)
    assert len(eval_rows) > 1 and train.inputs.shape == (64, SEQ_LEN)


def test_exact_match_recount_from_dumped_predictions(tmp_path):
    model = MoEModel(ModelConfig(), seed=0)
    suite = build_suite(default_domains(2) + [general_spec()], 32)
    acc = exact_match_eval(model, suite)
    from desmoe.datagen import predictions

    path = tmp_path / "preds.jsonl"
    with open(path, "w") as f:
        for name, (inp, tgt) in suite.items.items():
            for a, b, c in zip(inp, tgt, predictions(model, inp)):
                f.write(json.dumps({"domain": name, "targets": b.tolist(), "pred": c.tolist()}) + "\n")
    hits, totals = {}, {}
    for line in path.read_text().splitlines():
        r = json.loads(line)
        ok = all(t == -1 or t == p for t, p in zip(r["targets"], r["pred"]))
        hits[r["domain"]] = hits.get(r["domain"], 0) + ok
        totals[r["domain"]] = totals.get(r["domain"], 0) + 1
    assert acc == {k: hits[k] / totals[k] for k in totals}


def test_untrained_model_near_chance():
    model = MoEModel(ModelConfig(), seed=1)
    acc = exact_match_eval(model, build_suite(default_domains(3), 64))
    assert max(acc[k] for k in ("0:copy", "1:reverse")) < 0.05


def test_exact_match_perfect_and_partial():
    tgt = np.array([[-1, 5, 6, -1], [-1, 7, -1, -1]])
    assert exact_match(np.array([[0, 5, 6, 0], [9, 7, 9, 9]]), tgt) == 1.0
    assert exact_match(np.array([[0, 5, 0, 0], [9, 7, 9, 9]]), tgt) == 0.5


def test_suite_dump_jsonl(tmp_path):
    suite = build_suite([DomainSpec(0, "copy")], 3)
    suite.dump_jsonl(tmp_path / "s.jsonl")
    lines = (tmp_path / "s.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["domain"] == "0:copy"


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(0, "translate")
    with pytest.raises(ValueError):
        DomainSpec(0, "modular-add", symbols=(0, 5))
    with pytest.raises(ValueError):
        DomainSpec(0, "copy", lengths=(3, 9))
    with pytest.raises(ValueError):
        DomainSpec.from_dict({"domain_id": 0, "kind": "copy", "colour": 1})
    spec = DomainSpec(2, "sort", seed=4)
    assert DomainSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        default_domains(7)

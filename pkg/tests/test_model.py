import json

import numpy as np
import pytest

from mvgame.errors import ProblemFormatError
from mvgame.model import (CoefficientSchedule, TimeGrid, load_problem, make_spec, parse_problem,
                          toy_document, validate_spec)


def test_grid_nodes_and_refinement():
    g = TimeGrid(1.0, 1000)
    assert g.dt == pytest.approx(1e-3)
    assert g.times[0] == 0.0 and g.times[-1] == 1.0
    assert g.refine(2).steps == 2000
    assert g.coarsen(2).steps == 500
    assert g.index(0.25) == 250
    assert g.index(0.2505) is None


def test_schedule_piecewise_constant():
    s = CoefficientSchedule(np.array([0.0, 0.5]), np.array([[[1.0]], [[3.0]]]))
    assert s(0.1)[0, 0] == 1.0
    assert s(0.5)[0, 0] == 3.0
    assert s(0.99)[0, 0] == 3.0
    nodes = s.on_nodes(TimeGrid(1.0, 4))
    assert nodes[:, 0, 0].tolist() == [1.0, 1.0, 3.0, 3.0, 3.0]


def test_toy_file_matches_builtin(toy, toy_file_spec):
    assert toy.digest == toy_file_spec.digest
    assert toy.n == 1 and toy.m == 1
    assert toy.cells.H2[0, 0] == 0.5


def test_digest_is_content_based():
    a = parse_problem(toy_document())
    b = parse_problem(json.loads(json.dumps(toy_document())))
    assert a.digest == b.digest
    assert a.with_steps(500).digest != a.digest


def test_valid_toy_has_no_violations(toy):
    assert validate_spec(toy).ok
    assert validate_spec(toy, mode="leader").ok


def test_k2_zero_names_assumption(problems_dir):
    rep = validate_spec(load_problem(problems_dir / "invalid_k2_zero.json"))
    assert not rep.ok
    assert "invertible-noise-gain" in rep.codes()
    assert any("K₂" in str(v) for v in rep)


def test_rejects_indefinite_R_and_repeated_marks():
    sp = make_spec(R1=[[-1.0]], E1=[("a", 1.0, [0.1], 0.5), ("b", 1.0, [0.2], 0.5)])
    codes = validate_spec(sp).codes()
    assert codes.count("positive-cost-weights") == 1
    assert codes.count("distinct-jump-sizes") == 1


def test_zero_obs_jump_rejected():
    sp = make_spec(E1=[("a", 1.0, [0.1], 0.0)])
    assert "distinct-jump-sizes" in validate_spec(sp).codes()


def test_leader_mode_requires_H1_zero():
    sp = make_spec(H1=[1.0])
    assert validate_spec(sp).ok
    assert "leader-mode" in validate_spec(sp, mode="leader").codes()


def test_malformed_json_reports_position(problems_dir):
    with pytest.raises(ProblemFormatError, match=r"line 3, column \d+"):
        load_problem(problems_dir / "malformed.json")


def test_missing_section_is_format_error():
    doc = toy_document()
    del doc["cost"]
    with pytest.raises(ProblemFormatError):
        parse_problem(doc)


def test_roundtrip_to_dict(toy):
    again = parse_problem(toy.to_dict())
    assert again.digest == toy.digest

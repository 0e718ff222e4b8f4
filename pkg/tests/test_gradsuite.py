from __future__ import annotations

from sagnet import gradsuite


def test_layer_checks_pass_single_seed():
    for name, check in gradsuite.LAYER_CHECKS.items():
        rep = check(7)
        assert rep.passed, f"{name}: {rep}"


def test_end_to_end_passes_at_layer_tolerance_too():
    rep = gradsuite.check_end_to_end(7, tol=gradsuite.END_TO_END_TOL)
    assert rep.passed, str(rep)


def test_suite_shape():
    results = gradsuite.run_suite(seeds=(5,))
    names = [n for n, _ in results]
    assert len(names) == len(gradsuite.LAYER_CHECKS) + 1
    assert any("end_to_end" in n for n in names)

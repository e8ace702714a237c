from kangaroo.bench import SUITES, run_suite, to_csv, to_markdown


def test_forest_scaling_transparent():
    reps = run_suite("forest-scaling", profiles=("wan", "lan"), sizes=(1, 9, 17))
    assert all(r.correct for r in reps)
    wan = [r for r in reps if r.profile == "wan"]
    assert [r.compare_cts for r in wan] == [1, 2, 3]
    assert all(r.rounds == 4 for r in wan)
    lan = [r for r in reps if r.profile == "lan"]
    assert all(w.sim_wall_ms > l_.sim_wall_ms for w, l_ in zip(wan, lan))
    csv_text = to_csv(reps)
    assert csv_text.splitlines()[0].startswith("scenario,model,backend,profile")
    assert to_markdown(reps).count("\n") == len(reps) + 2


def test_micro_suites():
    sel = run_suite("selection-micro", blocks=(4, 12))
    assert [r.extra["rotations_alg1"] for r in sel] == [2, 4]
    cmp_ = run_suite("comparison-micro", slot_counts=(16, 64))
    assert all(r.correct for r in cmp_)


def test_single_tree_transparent():
    (rep,) = run_suite("single-tree-large")
    assert rep.correct and rep.rounds == 4 and rep.setup_bytes > 0


def test_suite_names():
    assert set(SUITES) == {"single-tree-large", "forest-scaling", "selection-micro", "comparison-micro"}

"""Smoke test for the pyclgt extension: build, train, evaluate, explain."""

import json
import math
import tempfile

import pyclgt


def main():
    course = pyclgt.Course.synthetic(seed=1)
    assert (course.num_students, course.num_teams, course.num_weeks) == (75, 11, 16)
    assert (course.num_commits, course.num_issues) == (4903, 862)

    graphs = course.build_graphs()
    assert graphs.matrix_count == 48
    ids, rows = course.activity_matrix()
    assert len(ids) == 75 and all(len(r) == 16 for r in rows)

    default = pyclgt.Model()
    assert 588_000 <= default.param_count <= 855_000, default.param_count

    model = pyclgt.Model(hidden_dim=8, heads=2, layers=2, node_in_dim=graphs.feature_dim, seed=3)
    logits = model.forward(graphs, 1)
    assert len(logits) == 75 and len(logits[0]) == 3

    model, history = pyclgt.train(model, graphs, max_epochs=3, seed=3)
    assert len(history) == 3 and all(math.isfinite(h["train_loss"]) for h in history)
    m = pyclgt.evaluate(model, graphs)
    assert 0.0 <= m["acc"] <= 1.0

    with tempfile.TemporaryDirectory() as d:
        model.save(f"{d}/ck.json")
        again = pyclgt.Model.load(f"{d}/ck.json")
        assert again.forward(graphs, 2) == model.forward(graphs, 2)
        course.write(d)
        assert pyclgt.Course.load(d).num_commits == 4903

    perfect = pyclgt.metrics([[0.9, 0.05, 0.05], [0.1, 0.8, 0.1], [0.0, 0.1, 0.9]], [0, 1, 2], 3)
    assert perfect["acc"] == perfect["f1_macro"] == perfect["auc_macro_ovr"] == 1.0
    assert pyclgt.roc_auc([0.1, 0.9], [False, True]) == 1.0
    assert pyclgt.normalize_influences([1.0, 3.0]) == [0.25, 0.75]
    try:
        pyclgt.normalize_influences([1.0, -1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("negative influence accepted")

    ex = pyclgt.explain(model, course, graphs, week=16, samples=100, seed=0)
    assert ex.num_vertices == 75
    assert json.loads(ex.to_json())["num_vertices"] == 75
    assert ex.to_dot().startswith("digraph influence")
    print(f"ok: {course!r}, {len(ex.edges)} influence edges")


if __name__ == "__main__":
    main()

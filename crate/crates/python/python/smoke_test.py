"""Quick end-to-end check of the Python bindings.

Build first, e.g. `maturin develop --release` from crates/python.
"""
import json

import cglearn


def main():
    stats = cglearn.consistency_stats([[1.0, 1.0], [1.0, -1.0], [1.0, 0.5]], 4.0)
    assert stats["mask"] == [True, False], stats

    envs = cglearn.generate_two_feature_demo([0.2, 2.0, 5.0], 1000, 7)
    assert len(envs) == 3 and envs.n_features == 2

    erm = cglearn.train_erm(envs)
    cg, counts = cglearn.train_cglearn(envs.subset([1, 2]), 4.0)
    print("ERM weights     ", erm.weights)
    print("CGLearn weights ", cg.weights, "updates", counts)
    assert abs(erm.weights[1]) > 0.1
    assert cg.weights[1] == 0.0 and counts[1] == 0

    t, model = cglearn.select_threshold(envs, 0)
    print("selected threshold", t, "weights", model.weights)

    irm = cglearn.train_irmv1(envs, 10.0, steps=500)
    print("IRMv1 weights   ", irm.weights)

    sem, truth = cglearn.generate_environments("FEU", seed=1, n_samples=200)
    assert len(truth["w_causal"]) == 5 and sem.n_features == 10

    net = cglearn.train_mlp(envs, threshold=4.0, hidden_sizes=[8], steps=50)
    again = cglearn.MlpModel.from_json(net.to_json())
    x, _ = envs.environment(0)
    assert again.predict(x[:5]) == net.predict(x[:5])

    print("welch", cglearn.welch_ttest([1.0, 2.0, 3.0], [4.0, 5.0, 6.5]))

    summary, lines = cglearn.run_experiment(
        'scenario = "two-feature-demo"\ntrials = 2\n[demo]\nn_samples = 200\n'
    )
    assert summary.startswith("scenario,")
    assert len([json.loads(l) for l in lines.splitlines()]) == 4

    try:
        cglearn.consistency_stats([[1.0]], -1.0)
    except cglearn.CgLearnError as e:
        print("error surfaced:", e)
    else:
        raise AssertionError("negative threshold accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()

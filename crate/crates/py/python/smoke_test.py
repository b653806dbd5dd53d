"""Quick end-to-end check of the Python bindings."""

import math

import irt_py


def main():
    p = [irt_py.grm_cat_prob(0.0, 1.0, [-1.0, 1.0], j) for j in (1, 2, 3)]
    assert abs(sum(p) - 1.0) < 1e-12, p
    w = irt_py.domain_weights([1.0, 3.0])
    assert abs(w[0] - 0.25) < 1e-12 and abs(w[1] - 0.75) < 1e-12, w

    r = irt_py.waic([[math.log(0.2), math.log(0.8)]] * 3)
    assert abs(r["pwaic"] - 3 * 0.5 * math.log(4) ** 2) < 1e-12, r

    data, truth = irt_py.simulate(200, 6, 2, categories=4, seed=1)
    assert (data.persons, data.items) == (200, 6)
    assert truth["assignment"] == [1, 1, 1, 2, 2, 2]

    loadings = irt_py.exploratory(data, 2)
    assert len(loadings) == 6 and len(loadings[0]) == 2

    fit = irt_py.fit(data, 2, max_iters=300, mc_samples=1, step_size=1e-2, seed=1)
    traits = fit.trait_means()
    assert len(traits) == 200 and len(traits[0]) == 2
    w = fit.weights(draws=20)
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in w)
    report = fit.waic(data, samples=50)
    assert math.isclose(report["waic"], -2 * (report["lppd"] - report["pwaic"]))

    enc = irt_py.train_encoder(data, fit, epochs=20)
    scores = enc.score(data.rows()[:5])
    assert len(scores) == 5 and len(scores[0]) == 2
    print("smoke test passed:", data, "waic", round(report["waic"], 2))


if __name__ == "__main__":
    main()

"""Smoke test for the pynnwm extension: keys, extraction, embedding, pruning."""

import os
import tempfile

import pynnwm


def main():
    key = pynnwm.KeyMatrix.generate("random", 8, 27, 5)
    assert (key.bits, key.dim, key.seed) == (8, 27, 5)
    again = pynnwm.KeyMatrix.generate("random", 8, 27, 5)
    assert key.values() == again.values()

    w = [0.01 * (i - 13) for i in range(27)]
    bits = pynnwm.extract(key, w)
    assert len(bits) == 8 and set(bits) <= {"0", "1"}
    assert pynnwm.bit_error_rate(bits, bits) == 0.0
    loss = pynnwm.embedding_loss(key, w, "1" * 8)
    grad = pynnwm.embedding_loss_grad(key, w, "1" * 8)
    assert loss > 0 and len(grad) == 27

    # Central difference on one coordinate.
    h = 1e-6
    wp, wm = list(w), list(w)
    wp[3] += h
    wm[3] -= h
    fd = (pynnwm.embedding_loss(key, wp, "1" * 8) - pynnwm.embedding_loss(key, wm, "1" * 8)) / (2 * h)
    assert abs(fd - grad[3]) < 1e-6 * max(1.0, abs(fd)), (fd, grad[3])

    train, test = pynnwm.synth_dataset(seed=1, train_per_class=40, test_per_class=10, image_size=8)
    assert len(train) == 160 and train.shape == (3, 8, 8)

    model, key, rep = pynnwm.embed(train, family="random", bits=16, layer="conv3", lam=0.1, epochs=3, seed=2)
    assert model.embed_layer is not None
    assert rep["ber"] <= 0.25, rep["ber"]
    err = model.evaluate(test)
    assert 0.0 <= err <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.nnwm")
        model.save(path)
        loaded = pynnwm.HostModel.load(path)
        assert loaded == model
        assert pynnwm.HostModel.from_bytes(model.to_bytes()) == model

    again = pynnwm.report(model, key, rep["extracted"], "conv3")
    assert again["ber"] == 0.0

    pruned = pynnwm.prune(model, "conv3_1", 0.5, "ascending")
    zeros = sum(1 for x in pruned.weights("conv3_1") if x == 0.0)
    assert zeros >= len(pruned.weights("conv3_1")) // 2

    try:
        pynnwm.KeyMatrix.generate("bogus", 8, 27, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid family accepted")

    print("pynnwm smoke test passed")


if __name__ == "__main__":
    main()

"""Smoke test for the mlvae Python extension.

Build and run:

    cargo build --release -p mlvae-py --features extension-module
    cp target/release/libmlvae_py.so python/mlvae.so
    python3 python/smoke_test.py
"""

import math
import os
import tempfile

import mlvae

CORPUS = [
    "the food was good . the staff was great .",
    "the food was bad . the place was awful .",
    "the staff was good . the service was tasty .",
    "the place was rude . the food was bland .",
]

TINY = [
    ("variant", "ml-VAE-D"),
    ("d_emb", "4"),
    ("d_plan", "6"),
    ("d_word", "6"),
    ("d_z", "3"),
    ("d_z2", "2"),
    ("prior_hidden", "4"),
    ("top_hidden", "4"),
    ("sentence_widths", "1,2"),
    ("sentence_filters", "3"),
    ("paragraph_widths", "1"),
    ("paragraph_filters", "3"),
    ("batch_size", "2"),
    ("max_steps", "6"),
    ("log_every", "3"),
    ("eval_every", "0"),
    ("seed", "5"),
]


def check_metrics():
    assert abs(mlvae.kl_standard([0.0, 0.0], [0.0, 0.0])) < 1e-12
    q = ([0.3, -0.2], [0.1, -0.4])
    assert abs(mlvae.kl_gaussians(q, q)) < 1e-12
    assert mlvae.self_bleu(["a b c d", "a b c d"], 2) == 1.0
    assert mlvae.unique_ngrams(["a b", "a b"], 2) == 50.0
    assert abs(mlvae.ngram_entropy(["a b c d"], 1) - math.log(4)) < 1e-9
    report = dict(mlvae.generation_report(CORPUS, CORPUS))
    assert report["B-2"] == 1.0


def check_model(tmp):
    vocab = mlvae.Vocabulary.build(CORPUS)
    assert vocab.token(0) == "PAD"
    ids = vocab.encode(CORPUS[0])
    assert len(ids) == 2
    assert vocab.render(ids) == CORPUS[0]

    ckpt = os.path.join(tmp, "m.ckpt")
    model, log = mlvae.train(CORPUS, TINY, ckpt)
    again, log2 = mlvae.train(CORPUS, TINY)
    assert log == log2 and len(log) == 2
    assert model.variant == "ml-VAE-D"
    assert "d_z = 3" in model.config

    loaded = mlvae.Model.load(ckpt)
    assert loaded.sample(3, seed=1) == model.sample(3, seed=1)
    assert len(model.sample(4, seed=2, sentences=1, max_words=5)) == 4

    points = model.interpolate(1, 2, 3)
    assert len(points) == 5 and len(points[0][0]) == 3
    assert points[0][1] == model.decode(points[0][0])

    attr = model.attribute_vector(CORPUS[:2], CORPUS[2:])
    back = model.attribute_vector(CORPUS[2:], CORPUS[:2])
    assert all(a == -b for a, b in zip(attr, back))
    assert model.transfer(CORPUS[1], [0.0] * 3) == model.reconstruct(CORPUS[1])
    assert model.code(CORPUS[1], seed=3) == model.code(CORPUS[1], seed=3)

    csv = model.latents_csv(CORPUS, ["a", "b", "c", "d"])
    assert len(csv.splitlines()) == 4
    stats = dict(model.evaluate(CORPUS))
    assert stats["bound"] == 1.0 and stats["ppl"] > 1.0

    try:
        model.generate(CORPUS[0])
    except ValueError:
        pass
    else:
        raise AssertionError("generate needs a paired model")


def main():
    check_metrics()
    with tempfile.TemporaryDirectory() as tmp:
        check_model(tmp)
    print("smoke test ok")


main()

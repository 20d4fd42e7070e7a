"""Smoke test for the Python bindings.

Build and install the extension first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/ucf_forge-*.whl

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import ucf_forge_py as uf

SPEC = """
n_real = 24
methods = ["A", "B", "C"]
n_per_method = 12
image_size = 16
common_artifact_strength = 0.5
specific_artifact_strength = 0.5
held_out_methods = ["C"]
seed = 1
"""

CONFIG = """
batch_pairs = 4
decoder_widths = [8, 8, 4]
head_hidden = [8]

[backbone]
input_size = 16
fingerprint_channels = 8
content_channels = 8
widths = [4, 8, 8]
"""


def check_metrics():
    # Three of the four (fake, real) pairs are ordered correctly.
    assert uf.auc([0.9, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75
    assert uf.auc([0.5, 0.5], [1, 0]) == 0.5

    report = uf.total_loss(1.0, 1.0, 1.0, 1.0)
    assert math.isclose(report["total"], 1.45, rel_tol=1e-12), report

    content = [1.0, 2.0, 3.0, 4.0]
    out = uf.adain(content, [1, 1, 2, 2], content, [1, 1, 2, 2])
    assert all(abs(a - b) < 1e-4 for a, b in zip(out, content)), out


def check_pipeline():
    corpus = uf.Corpus.generate(SPEC)
    assert len(corpus) == 24 + 3 * 12
    assert corpus.vocabulary() == ["real", "A", "B", "C"]
    assert corpus.content_hash() == uf.Corpus.generate(SPEC).content_hash()
    pixels, shape = corpus.image(0)
    assert shape == (3, 16, 16) and len(pixels) == 3 * 16 * 16

    trainer = uf.Trainer(len(corpus.vocabulary()), CONFIG)
    losses = trainer.train(corpus, 3)
    assert len(losses) == 3 and trainer.step == 3
    assert all(math.isfinite(r["total"]) for r in losses)

    test = corpus.split_indices("test")
    probs = trainer.detect(corpus, test)
    assert len(probs) == len(test) and all(0.0 <= p <= 1.0 for p in probs)
    assert 0.0 <= trainer.evaluate(corpus, "test", ["C"]) <= 1.0
    assert 0.0 <= trainer.probe(corpus, "common") <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "run.ckpt")
        trainer.save(ckpt)
        restored = uf.Trainer.from_checkpoint(ckpt)
        assert restored.step == 3
        # Both copies continue identically from the same state.
        assert restored.train(corpus, 1) == trainer.train(corpus, 1)

        rows = trainer.export_features(corpus, os.path.join(tmp, "f.tsv"))
        assert rows == len(test)

        corpus.write(os.path.join(tmp, "data"))
        reloaded = uf.Corpus.load(os.path.join(tmp, "data"))
        assert sorted(reloaded.sample_ids()) == sorted(corpus.sample_ids())

    try:
        uf.Corpus.generate(SPEC.replace("common_artifact_strength = 0.5", "common_artifact_strength = 1.5"))
    except ValueError as e:
        assert "common_artifact_strength" in str(e)
    else:
        raise AssertionError("invalid spec accepted")


if __name__ == "__main__":
    check_metrics()
    check_pipeline()
    print("python smoke test passed")

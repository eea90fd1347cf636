"""Smoke test for the refseg_py extension module.

Build and install the module first, for example:

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run ``python python/smoke_test.py``.
"""

import json
import os
import tempfile

import refseg_py as rs

TINY = {
    "image_size": 16,
    "patch_size": 2,
    "base_channels": 4,
    "text_dim": 8,
    "heads": 2,
    "epochs": 2,
    "batch_size": 2,
    "lr_encoder": 1e-3,
    "lr_other": 1e-3,
}


def main():
    cfg = rs.Config.from_json(json.dumps(TINY))
    assert cfg.image_size == 16 and cfg.epochs == 2

    model = rs.Model(cfg)
    assert model.num_parameters() > 0
    assert any(n.endswith("bg_delta") for n in model.parameter_names())

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        run = os.path.join(tmp, "run")
        assert rs.gen_data(data, n=4, seed=1, size=16) == 4

        history = json.loads(rs.train(data, run, cfg))
        assert len(history) == 2
        assert all(h["l_total"] > 0 for h in history)

        trained = rs.Model.load(os.path.join(run, "checkpoint"))
        report = json.loads(trained.evaluate(data))
        assert set(report) == {"pr50", "pr60", "pr70", "pr80", "pr90", "oiou", "miou", "per_category"}

        with open(os.path.join(data, "index.jsonl")) as f:
            first = json.loads(f.readline())
        image = os.path.join(data, first["image_path"])
        a = trained.predict_file(image, first["expression"])
        b = trained.predict_file(image, first["expression"])
        assert (a.width, a.height) == (16, 16)
        assert a.mask == b.mask and a.fg_logits == b.fg_logits
        assert set(a.mask) <= {0, 1}
        assert a.to_pgm().startswith(b"P5")

        try:
            trained.predict_file(image, "   ")
        except rs.RefsegError as e:
            assert "no words" in str(e)
        else:
            raise AssertionError("an empty expression must be rejected")

    # ties go to the background
    assert list(rs.infer_mask([0.0, 1.0, 2.0, -1.0], [0.0, 0.0, 2.0, -2.0], 2, 2)) == [0, 1, 0, 1]

    full, empty = bytes([1] * 4), bytes(4)
    m = json.loads(rs.metrics([(full, full, 0), (empty, full, 1)], 2, 2))
    assert m["miou"] == 0.5 and m["pr50"] == 0.5

    gc = json.loads(rs.gradcheck(seed=0, samples=200))
    assert gc["pass"], gc["worst"]

    print("refseg_py smoke test passed")


if __name__ == "__main__":
    main()

"""Smoke test for the webctx_py extension.

Build it first, e.g. `maturin develop -m crates/python/Cargo.toml --release`,
or `cargo build -p webctx-python --release --features extension-module` and
put target/release/libwebctx_py.so on PYTHONPATH as webctx_py.so.
"""

import os
import sys
import tempfile

import webctx_py as w

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def read(name):
    with open(os.path.join(ROOT, "configs", name)) as f:
        return f.read()


def main():
    with tempfile.TemporaryDirectory() as tmp:
        manifest = w.synth(os.path.join(tmp, "data"), read("tiny_synth.toml"))
        ds = w.Dataset(manifest)
        assert len(ds) == 12, len(ds)
        assert len(ds.page_ids()) == 12
        truth = ds.truth()
        assert len(truth) == 12

        page = ds.page_ids()[0]
        elements = ds.elements(page)
        graph = ds.graph(page, k=4)
        assert len(graph) == len(elements)
        assert all(len(n) == 4 for n in graph.values())
        assert all(len(n) == 0 for n in ds.graph(page, k=0).values())

        folds = ds.folds(3, 0)
        assert len(folds) == 3
        model = w.Model.train(ds, folds[0], read("tiny_train.toml"))
        assert len(model.history()) >= 1

        test_ids = ds.page_ids()
        preds = model.predict(ds, test_ids[:3])
        assert len(preds) == 3
        for p in preds:
            ids = set(p["element_ids"])
            assert {p["price_id"], p["title_id"], p["image_id"]} <= ids

        acc = model.evaluate(ds)
        for key in ("price", "title", "image", "mean"):
            assert 0.0 <= acc[key] <= 1.0, acc

        ckpt = os.path.join(tmp, "m.safetensors")
        model.save(ckpt)
        again = w.Model.load(ckpt, k=8)
        assert again.predict(ds, test_ids[:3]) == preds

        try:
            w.synth(os.path.join(tmp, "bad"), "elements_per_page = 2\n")
        except ValueError:
            pass
        else:
            raise AssertionError("invalid spec accepted")

    print("smoke test passed: accuracy", acc)
    return 0


if __name__ == "__main__":
    sys.exit(main())

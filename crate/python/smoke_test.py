#!/usr/bin/env python3
"""End-to-end smoke test for the retina_dx_py extension module.

Builds the cdylib if needed, imports it, and walks the whole pipeline:
synthetic fundus generation, preprocessing, network construction, training,
prediction, checkpoint round-trips, dataset splitting, and the gradient
check. Prints SMOKE PASS and exits 0 on success; any failure raises and
exits nonzero.
"""

import os
import shutil
import subprocess
import sys
import tempfile

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def find_cdylib():
    for profile in ("release", "debug"):
        path = os.path.join(REPO_ROOT, "target", profile, "libretina_dx_py.so")
        if os.path.exists(path):
            return path
    return None


def import_module(workdir):
    cdylib = find_cdylib()
    if cdylib is None:
        print("cdylib not found; running cargo build -p retina-dx-py ...")
        subprocess.run(
            ["cargo", "build", "-p", "retina-dx-py"], cwd=REPO_ROOT, check=True
        )
        cdylib = find_cdylib()
    if cdylib is None:
        raise SystemExit("could not locate libretina_dx_py.so after building")
    # Python looks for <module>.so, not lib<module>.so.
    shutil.copy2(cdylib, os.path.join(workdir, "retina_dx_py.so"))
    sys.path.insert(0, workdir)
    import retina_dx_py

    return retina_dx_py


def check(cond, message):
    if not cond:
        raise AssertionError(message)
    print(f"  ok: {message}")


def main():
    with tempfile.TemporaryDirectory() as workdir:
        rdx = import_module(workdir)
        print(f"imported retina_dx_py {rdx.__version__}")

        # --- synthetic images ------------------------------------------------
        healthy = rdx.synth_fundus("healthy", seed=1, size=64)
        diseased = rdx.synth_fundus("dr_signs", seed=1, size=64)
        check(
            healthy.width == 64 and healthy.height == 64 and healthy.channels == 3,
            "synth_fundus renders 64x64 RGB",
        )
        check(
            healthy.pixels() != diseased.pixels(),
            "classes render differently at the same seed",
        )
        again = rdx.synth_fundus("healthy", seed=1, size=64)
        check(again.pixels() == healthy.pixels(), "synthesis is seed-deterministic")

        # --- PNM round-trip --------------------------------------------------
        ppm = os.path.join(workdir, "sample.ppm")
        healthy.write_pnm(ppm)
        reread = rdx.Image.read_pnm(ppm)
        check(
            reread.pixels() == healthy.pixels(),
            "PPM write/read round-trips the raster",
        )

        # --- retina bounding box --------------------------------------------
        x0, y0, x1, y1 = rdx.detect_retina_bbox(healthy)
        check(
            x1 > x0 and y1 > y0 and x1 < 64 and y1 < 64,
            f"retina bbox ({x0},{y0})-({x1},{y1}) is a proper sub-rectangle",
        )

        # --- preprocessing ---------------------------------------------------
        tensor = rdx.preprocess(healthy, input_size=32)
        check(tensor.shape == [3, 32, 32], "preprocess yields a 3x32x32 tensor")
        values = tensor.data()
        check(
            all(0.0 <= v <= 1.0 for v in values),
            "preprocessed values lie in [0, 1]",
        )
        enhanced = rdx.enhance_color(healthy)
        check(
            enhanced.width == 64 and enhanced.channels == 3,
            "enhance_color preserves geometry",
        )
        gray = rdx.Image(4, 4, 1, list(range(16)))
        _ = rdx.clahe(gray, tiles_x=1, tiles_y=1)
        small = rdx.resize_bilinear(healthy, 16, 16)
        check(small.width == 16 and small.height == 16, "bilinear resize to 16x16")

        # --- dataset split ---------------------------------------------------
        train_idx, test_idx = rdx.split_80_20(130, seed=42)
        check(
            len(train_idx) == 104 and len(test_idx) == 26,
            "split_80_20(130) gives 104 train / 26 test",
        )
        check(
            sorted(train_idx + test_idx) == list(range(130)),
            "split is a partition of range(130)",
        )

        # --- network build + predict ----------------------------------------
        net = rdx.Network.build(preset="table1", input_size=32, seed=7)
        check(net.input == (3, 32, 32), "network input follows input_size")
        names = net.parameter_names()
        check(len(names) == 12, f"table1 exposes 12 trainable parameters, got {len(names)}")
        check(
            "conv1.kernels" in names and "fc2.bias" in names,
            "parameter names use the layer.kind convention",
        )
        kernels = net.parameter("conv1.kernels")
        check(kernels.shape == [8, 3, 3, 3], "conv1 kernels are 8x3x3x3")

        # --- training --------------------------------------------------------
        inputs, labels = [], []
        for i in range(8):
            name = "healthy" if i % 2 == 0 else "dr_signs"
            img = rdx.synth_fundus(name, seed=100 + i, size=32)
            inputs.append(rdx.preprocess(img, input_size=32))
            labels.append(0 if name == "healthy" else 1)

        records = rdx.train_network(
            net, inputs, labels, epochs=5, lr=0.01, batch_size=4, seed=3
        )
        check(len(records) == 5, "one metrics record per epoch")
        check(
            records[0]["epoch"] == 1 and records[0]["val_accuracy"] is None,
            "records carry epoch numbers and omit val accuracy when unset",
        )
        check(
            records[-1]["train_loss"] < records[0]["train_loss"],
            f"loss fell {records[0]['train_loss']:.4f} -> {records[-1]['train_loss']:.4f}",
        )

        accuracy, confusion = rdx.evaluate(net, inputs, labels)
        total = sum(confusion[0]) + sum(confusion[1])
        check(total == 8, "confusion matrix covers every sample")
        print(f"  train accuracy after 5 epochs: {accuracy:.2f}")

        # --- inference (valid once batchnorm stats exist) --------------------
        label, p_healthy, p_dr = net.predict(tensor)
        check(
            label in ("healthy", "dr_signs") and abs(p_healthy + p_dr - 1.0) < 1e-5,
            "predict returns a label and probabilities summing to 1",
        )

        batch = rdx.Tensor([2, 3, 32, 32], tensor.data() + tensor.data())
        probs = net.forward(batch)
        check(probs.shape == [2, 2], "forward on a batch of 2 returns 2x2 probabilities")

        # --- deterministic retrain ------------------------------------------
        net_a = rdx.Network.build(preset="table1", input_size=32, seed=7)
        net_b = rdx.Network.build(preset="table1", input_size=32, seed=7)
        rec_a = rdx.train_network(net_a, inputs, labels, epochs=3, batch_size=4, seed=3)
        rec_b = rdx.train_network(net_b, inputs, labels, epochs=3, batch_size=4, seed=3)
        check(
            [r["train_loss"] for r in rec_a] == [r["train_loss"] for r in rec_b],
            "identically seeded runs produce identical losses",
        )

        # --- checkpoint round-trip ------------------------------------------
        ckpt = os.path.join(workdir, "model.rdxc")
        net.save(ckpt)
        loaded = rdx.Network.load(ckpt)
        check(loaded.input == (3, 32, 32), "checkpoint restores the input geometry")
        for sample in inputs[:4]:
            check(
                net.predict(sample) == loaded.predict(sample),
                "loaded network reproduces predictions bit-for-bit",
            )
        ckpt2 = os.path.join(workdir, "model2.rdxc")
        loaded.save(ckpt2)
        with open(ckpt, "rb") as a, open(ckpt2, "rb") as b:
            check(a.read() == b.read(), "save -> load -> save is byte-identical")

        cfg = net.config_json()
        rebuilt = rdx.Network.from_config_json(cfg, seed=7)
        check(rebuilt.name == net.name, "config JSON round-trips through from_config_json")

        # --- gradient check --------------------------------------------------
        passed, max_err, params = rdx.grad_check(preset="table1", tolerance=1e-3, seed=5)
        check(
            passed and max_err < 1e-3,
            f"gradient check passes (max rel err {max_err:.2e})",
        )
        check(len(params) == 12, "gradient check reports every trainable parameter")

    print("SMOKE PASS")


if __name__ == "__main__":
    main()

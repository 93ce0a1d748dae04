"""Smoke test for the `hsmae` extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`
or `maturin develop -m crates/python/Cargo.toml`, then run this file.
"""

import math
import os
import tempfile

import hsmae


def main():
    cube = hsmae.Cube.synthetic(27, 27, 24, 3, 7)
    assert cube.shape == (27, 27, 24)
    assert cube.token_grid() == (3, 3, 3)
    assert len(cube.wavelengths) == 24 and len(cube.labels) == 27 * 27

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "cube.hsc")
        cube.save(path)
        back = hsmae.Cube.load(path)
        assert back.values() == cube.values()

    enc = hsmae.spec_enc(1.0, 8)
    assert abs(sum(v * v for v in enc) - 4.0) < 1e-12
    assert abs(enc[0] - math.sin(2 * math.pi)) < 1e-12

    plan = hsmae.sample_mask_plan(4, 4, 4, 0.5, 0.5, seed=3)
    assert len(plan.visible) == 16
    assert plan.masked_voxels() == 48 * 648

    assert abs(hsmae.spectral_angle([1.0, 0.0], [0.0, 1.0]) - math.pi / 2) < 1e-9
    assert hsmae.spectral_angle([0.0, 0.0], [1.0, 1.0]) is None
    report = hsmae.reconstruction_loss(
        [0.0, 1.0, 2.0, 3.0], [1.0] * 4, (1, 2, 2), [True, False, False, True], alpha=1.0
    )
    assert report["l_mse"] == 2.5 and report["l_rec"] == 2.5

    metrics = hsmae.evaluate([0, 0, 0, 0], [0, 0, 1, 1])
    assert metrics["oa"] == 50.0 and metrics["kappa"] == 0.0

    model, log = hsmae.pretrain([cube], steps=3, seed=1, preset_name="micro")
    assert [r["step"] for r in log] == [1, 2, 3]
    values, rep = model.reconstruct(cube, hsmae.sample_mask_plan(3, 3, 3, seed=2))
    assert len(values) == 27 * 27 * 24 and rep["n_masked"] > 0

    split = cube.split(0.2, seed=1)
    tuned, cls = hsmae.finetune(model, cube, split, mode="probe", steps=20, seed=0)
    assert tuned.n_classes == 3 and 0.0 <= cls["oa"] <= 100.0
    print(f"hsmae smoke test ok: {model.n_params} params, probe OA {cls['oa']:.1f}%")


if __name__ == "__main__":
    main()

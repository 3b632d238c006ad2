"""Smoke test for the flowsr extension module.

Build and install first:

    pip install --no-build-isolation -e crates/python

then run `python python/smoke_test.py`.
"""

import math
import os
import sys
import tempfile

import flowsr


def check_data():
    data, shape = flowsr.toy2d(500, components=8, seed=1)
    assert shape == [500, 2, 1, 1]
    assert len(data) == 1000
    again, _ = flowsr.toy2d(500, components=8, seed=1)
    assert data == again

    img, shape = flowsr.textures(3, seed=2, side=16)
    assert shape == [3, 1, 16, 16]
    assert all(-1.0 <= v <= 1.0 for v in img)


def check_metrics():
    img, shape = flowsr.textures(1, seed=5, side=16)
    assert math.isinf(flowsr.psnr(img, img, shape))
    assert flowsr.perceptual_proxy(img, img, shape) == 0.0
    shifted = [v - 0.1 for v in img]
    # a 0.1 shift on [-1, 1] is 0.05 on the [0, 1] scale PSNR uses; the
    # image stays above -0.7, so no pixel hits the clamp
    assert abs(flowsr.psnr(img, shifted, shape) - 20 * math.log10(1 / 0.05)) < 1e-9


def check_oracle():
    # sigma0 = sigma1 = 1: a(1/2) = 0, a(1) = 1
    v = flowsr.gaussian_velocity(1.0, 1.0, [0.5, -1.0], 0.5)
    assert all(abs(x) < 1e-12 for x in v)
    v = flowsr.gaussian_velocity(1.0, 1.0, [2.0], 1.0)
    assert abs(v[0] - 2.0) < 1e-12


def check_batteries():
    items = flowsr.check("adjoint")
    assert items and all(ok for _, _, ok in items), items
    try:
        flowsr.check("nope")
    except flowsr.FlowsrError:
        pass
    else:
        raise AssertionError("unknown suite accepted")


def check_pipeline():
    with tempfile.TemporaryDirectory() as d:
        data = os.path.join(d, "train.fsr")
        code = flowsr.cli(["gen-data", "--kind", "toy2d-gmm", "--count", "256", "--seed", "1", "--out", data])
        assert code == 0
        cfg = os.path.join(d, "teacher.cfg")
        with open(cfg, "w") as f:
            f.write(
                "[run]\nstage = teacher\ndata = {}\noutput = {}\n\n"
                "[arch]\nbackbone = mlp\nwidths = 16,16\ntime_dim = 8\n\n"
                "[flow]\nsigma_p = 0.5\nscale = 1\nsigma_n = 0.3\niterations = 50\nbatch = 32\n".format(
                    data, os.path.join(d, "teacher.fsr")
                )
            )
        code = flowsr.cli(["train-teacher", "--config", cfg])
        assert code == 0, code

        model = flowsr.Model.load(os.path.join(d, "teacher.fsr"))
        assert model.sample_shape == [2, 1, 1]
        assert model.cond_channels == 2
        x0 = [0.1, -0.2, 0.3, 0.0]
        cond = [0.0, 0.5, -0.5, 0.2]
        shape = [2, 2, 1, 1]
        v = model.velocity(x0, shape, cond, [0.0, 1.0])
        step = model.one_step(x0, shape, cond, 1.0)
        assert len(v) == 4 and len(step) == 4
        end, nfe = model.solve(x0, shape, cond, tol=1e-3)
        assert len(end) == 4 and nfe >= 7
        assert all(math.isfinite(u) for u in end)

    assert flowsr.cli(["--bogus"]) == 1


def main():
    check_data()
    check_metrics()
    check_oracle()
    check_batteries()
    check_pipeline()
    print("python smoke test passed")


if __name__ == "__main__":
    sys.exit(main())

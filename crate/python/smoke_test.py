"""Smoke test for the patchnorm_py extension module.

Build and install first, e.g. `maturin develop --release` in crates/python.
"""

import math
import random

import patchnorm_py as pn


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol * max(1.0, abs(y)) for x, y in zip(a, b))


def main():
    t = pn.Tensor((1, 1, 2, 2), [1.0, 3.0, 1.0, 3.0])
    assert t.shape == (1, 1, 2, 2)
    assert pn.channel_mean(t) == [2.0]
    assert close(pn.channel_std(t, 1e-5), [math.sqrt(1.0 + 1e-5)])

    rng = random.Random(0)
    shape = (4, 3, 6, 6)
    n = shape[0] * shape[1] * shape[2] * shape[3]
    x = pn.Tensor(shape, [rng.uniform(-2, 2) for _ in range(n)])
    up = pn.Tensor(shape, [rng.uniform(-1, 1) for _ in range(n)])

    bn_state, pbn_state = pn.NormState(3), pn.NormState(3)
    one_patch = pn.SchemeConfig(candidate_set=[1], subset_size=1, lambda_=1.0)
    b = pn.normalize_with_grad("bn", x, bn_state, up)
    p = pn.normalize_with_grad("pbn", x, pbn_state, up, scheme=one_patch, seed=3)
    assert close(b[0].tolist(), p[0].tolist(), 1e-12)
    assert close(b[1].tolist(), p[1].tolist(), 1e-12)
    assert bn_state.running_mean == pbn_state.running_mean

    state = pn.NormState(3)
    out = pn.normalize("pbn", x, state, scheme=pn.SchemeConfig(), seed=1)
    assert out.shape == shape
    state.eval()
    a = pn.normalize("bn", x, state.copy())
    c = pn.normalize("pbn", x, state.copy(), scheme=pn.SchemeConfig(lambda_=0.2), seed=9)
    assert a.tolist() == c.tolist()

    for kind in pn.NORM_KINDS:
        y = pn.normalize(kind, x, pn.NormState(3), scheme=pn.SchemeConfig(), groups=3)
        assert len(y) == n

    grid = pn.generate_grid(6, 6, 4, split="equal")
    assert grid.rects == [(0, 3, 0, 3), (0, 3, 3, 6), (3, 6, 0, 3), (3, 6, 3, 6)]
    two_tone = pn.Tensor((1, 1, 4, 4), [0.0] * 8 + [1.0] * 8)
    rows = pn.analyze_patches(two_tone, pn.generate_grid(4, 4, 4, split="equal"))
    assert [r["mean"] for r in rows if r["patch"] is not None] == [0.0, 0.0, 1.0, 1.0]
    assert rows[-1]["patch"] is None and rows[-1]["mean"] == 0.5
    assert pn.patch_stats_csv(two_tone, pn.generate_grid(4, 4, 1)).count("\n") == 3

    passed, cases = pn.gradcheck((1, 2, 4, 4), 0)
    assert passed, cases

    images, labels = pn.generate_dataset(0, 16)
    assert images.shape == (16, 3, 16, 16) and sorted(set(labels)) == list(range(8))
    noisy = pn.corrupt(images, "gaussian_noise", 3, seed=1)
    assert all(0.0 <= v <= 1.0 for v in noisy.tolist())

    try:
        pn.SchemeConfig(lambda_=2.0)
    except ValueError as e:
        assert "lambda" in str(e)
    else:
        raise AssertionError("invalid lambda accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()

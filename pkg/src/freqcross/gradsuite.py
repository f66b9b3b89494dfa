"""Finite-difference gradient checks for every layer and a small composed model.

Each case builds float64 inputs from a fixed seed and returns a
:class:`~freqcross.neural.GradcheckReport`. Inputs to max pooling and ReLU
are kept away from ties and kinks so the central differences are valid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FreqCrossConfig, build
from .neural import BatchNorm2d, Tensor, bce_l2_loss, bce_logits_l2_loss, gradcheck, ops
from .neural.gradcheck import GradcheckReport, scalar_probe

H = 1e-4
TOL = 1e-4


@dataclass
class CaseResult:
    name: str
    report: GradcheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(rng, *shape, name="x"):
    t = Tensor(rng.normal(size=shape), requires_grad=True)
    t.name = name
    return t


def _away_from_zero(rng, *shape, name="x", gap=0.1):
    v = rng.normal(size=shape)
    v = np.where(np.abs(v) < gap, np.sign(v + 1e-12) * gap, v)
    t = Tensor(v, requires_grad=True)
    t.name = name
    return t


def _spaced(rng, *shape, name="x"):
    # distinct values at least 0.01 apart, in random positions
    n = int(np.prod(shape))
    t = Tensor((rng.permutation(n) * 0.01 - n * 0.005).reshape(shape), requires_grad=True)
    t.name = name
    return t


def _probe(rng, out_shape):
    return rng.normal(size=out_shape)


def case_linear(rng):
    x, w, b = _t(rng, 4, 5), _t(rng, 3, 5, name="weight"), _t(rng, 3, name="bias")
    wts = _probe(rng, (4, 3))
    return gradcheck(lambda: scalar_probe(ops.linear(x, w, b), wts), [x, w, b], H, TOL)


def case_conv2d(rng):
    x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3, name="weight"), _t(rng, 4, name="bias")
    wts = _probe(rng, (2, 4, 6, 6))
    return gradcheck(lambda: scalar_probe(ops.conv2d(x, w, b, 1, 1), wts), [x, w, b], H, TOL)


def case_conv2d_strided(rng):
    x, w = _t(rng, 2, 2, 7, 7), _t(rng, 3, 2, 3, 3, name="weight")
    wts = _probe(rng, (2, 3, 3, 3))
    return gradcheck(lambda: scalar_probe(ops.conv2d(x, w, None, 2, 0), wts), [x, w], H, TOL)


def case_batchnorm_train(rng):
    bn = BatchNorm2d("bn", 3, np.float64)
    x = _t(rng, 4, 3, 3, 3)
    bn.gamma.data = rng.normal(size=3) + 1.5
    bn.beta.data = rng.normal(size=3)
    bn.gamma.requires_grad = bn.beta.requires_grad = True
    wts = _probe(rng, (4, 3, 3, 3))
    return gradcheck(
        lambda: scalar_probe(ops.batchnorm2d(x, bn.gamma, bn.beta, bn, True), wts),
        [x, bn.gamma, bn.beta], H, TOL, names=["x", "gamma", "beta"],
    )


def case_batchnorm_eval(rng):
    bn = BatchNorm2d("bn", 3, np.float64)
    bn.running_mean = rng.normal(size=3)
    bn.running_var = rng.uniform(0.5, 2.0, size=3)
    x = _t(rng, 2, 3, 4, 4)
    wts = _probe(rng, (2, 3, 4, 4))
    return gradcheck(
        lambda: scalar_probe(ops.batchnorm2d(x, bn.gamma, bn.beta, bn, False), wts),
        [x, bn.gamma, bn.beta], H, TOL, names=["x", "gamma", "beta"],
    )


def case_maxpool(rng):
    x = _spaced(rng, 2, 2, 6, 6)
    wts = _probe(rng, (2, 2, 3, 3))
    return gradcheck(lambda: scalar_probe(ops.maxpool2d(x, 2), wts), [x], H, TOL)


def case_maxpool_padded(rng):
    x = _spaced(rng, 1, 2, 7, 7)
    wts = _probe(rng, (1, 2, 4, 4))
    return gradcheck(lambda: scalar_probe(ops.maxpool2d(x, 3, 2, 1), wts), [x], H, TOL)


def case_relu(rng):
    x = _away_from_zero(rng, 3, 7)
    wts = _probe(rng, (3, 7))
    return gradcheck(lambda: scalar_probe(ops.relu(x), wts), [x], H, TOL)


def case_sigmoid(rng):
    x = _t(rng, 3, 5)
    wts = _probe(rng, (3, 5))
    return gradcheck(lambda: scalar_probe(ops.sigmoid(x), wts), [x], H, TOL)


def case_global_avg_pool(rng):
    x = _t(rng, 2, 3, 4, 5)
    wts = _probe(rng, (2, 3))
    return gradcheck(lambda: scalar_probe(ops.global_avg_pool(x), wts), [x], H, TOL)


def case_dropout(rng):
    x = _t(rng, 4, 6)
    wts = _probe(rng, (4, 6))
    # a fresh generator with a fixed seed per call keeps the mask fixed
    fn = lambda: scalar_probe(ops.dropout(x, 0.5, np.random.default_rng(7), True), wts)  # noqa: E731
    return gradcheck(fn, [x], H, TOL)


def case_concat(rng):
    a, b = _t(rng, 2, 3, name="a"), _t(rng, 2, 4, name="b")
    wts = _probe(rng, (2, 7))
    return gradcheck(lambda: scalar_probe(ops.concat([a, b], axis=1), wts), [a, b], H, TOL)


def case_bce_l2(rng):
    p = Tensor(rng.uniform(0.05, 0.95, size=(6, 1)), requires_grad=True)
    p.name = "p"
    w = _t(rng, 3, 4, name="weight")
    y = rng.integers(0, 2, size=6)
    return gradcheck(lambda: bce_l2_loss(p, y, [w], 0.01), [p, w], H, TOL)


def case_bce_logits_l2(rng):
    # includes saturated logits, where the probability form has a dead zone
    z = Tensor(np.r_[rng.normal(size=4) * 3, -40.0, 40.0].reshape(6, 1), requires_grad=True)
    z.name = "logit"
    w = _t(rng, 3, 4, name="weight")
    y = np.r_[rng.integers(0, 2, size=4), 1, 0]
    return gradcheck(lambda: bce_logits_l2_loss(z, y, [w], 0.01), [z, w], H, TOL)


def case_composed_model(rng, side: int = 16, max_elements: int | None = 12):
    """Tiny preset with all branches, train mode (dropout and batch statistics)."""
    cfg = FreqCrossConfig(spatial_preset="tiny", input_side=side, freq_channels=(4, 4, 4),
                          freq_out_dim=8, radial_bins=6, radial_hidden=5, radial_out_dim=4, head_hidden=8)
    model = build(cfg, rng, np.float64)
    b = 4
    rgb = rng.uniform(size=(b, 3, side, side))
    m_log = rng.normal(size=(b, 1, side, side))
    e = rng.uniform(size=(b, cfg.radial_bins))
    y = np.array([0, 1, 1, 0])
    params = model.parameters()
    for p in params:
        p.requires_grad = True

    def fn():
        out = model.forward(rgb, m_log, e, mode="train", rng=np.random.default_rng(3))
        return bce_logits_l2_loss(out.logit, y, model.decay_parameters(), 1e-2)

    return gradcheck(fn, params, H, TOL, max_elements=max_elements, seed=1, names=[p.name for p in params])


CASES = {
    "linear": case_linear,
    "conv2d": case_conv2d,
    "conv2d_stride2": case_conv2d_strided,
    "batchnorm2d_train": case_batchnorm_train,
    "batchnorm2d_eval": case_batchnorm_eval,
    "maxpool2d": case_maxpool,
    "maxpool2d_padded": case_maxpool_padded,
    "relu": case_relu,
    "sigmoid": case_sigmoid,
    "global_avg_pool": case_global_avg_pool,
    "dropout": case_dropout,
    "concat": case_concat,
    "bce_l2_loss": case_bce_l2,
    "freqcross_tiny": case_composed_model,
    "bce_logits_l2_loss": case_bce_logits_l2,
}


def run_suite(seed: int = 0, cases=None) -> list[CaseResult]:
    results = []
    for name, case in CASES.items():
        if cases is not None and name not in cases:
            continue
        results.append(CaseResult(name, case(np.random.default_rng([seed, len(results)]))))
    return results

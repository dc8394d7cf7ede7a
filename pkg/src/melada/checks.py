"""Quick invariant suite behind ``melada selfcheck``.

Each check returns ``(ok, detail)``; :func:`run_all` runs them in order and
never raises on a failed check (an exception counts as a failure).
"""
from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import SplitMix64, SynthSpec, dataset_sha256, gen_synthetic
from .model import (
    ModelConfig,
    barycenter_identity_check,
    classify,
    controller_loss,
    cross_entropy,
    extract,
    init_params,
    mmnd_estimate,
)
from .signal import lds_smooth, stft_band_energy, tapered_energy

log = logging.getLogger(__name__)

# SHA-256 of dumps(gen_synthetic(SynthSpec())) for the seed-42 defaults.
SYNTH_SHA256 = "6b04cedc41a6c7e14ae324563198d8eaae186975a11634623e6d672bfb271a4c"


def _numeric_grad(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat, g = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return out


def _max_rel(a, n):
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


def check_grl():
    x = np.array([1.5, -2.25, 3e-7])
    xv = ad.leaf(x)
    y = ad.grl(xv)
    up = np.array([0.5, -1.0, 2.0])
    (g,) = ad.grad(ad.sum(y * up), [xv])
    ok = y.value.tobytes() == x.tobytes() and g.value.tobytes() == (-up).tobytes()
    return ok, "forward identity and negated backward"


def check_gradients():
    rng = np.random.default_rng(7)
    cfg = ModelConfig(input_dim=3, hidden=4, clf_hidden=3, ctrl_hidden=3, latent=2)
    p = init_params(cfg, 1)
    x = rng.normal(size=(4, 3, 3))
    y = rng.integers(0, 3, size=4)
    worst = 0.0

    def loss_of(theta, phi):
        return cross_entropy(classify(extract(x, theta), phi), y)

    leaves = {k: ad.leaf(v) for k, v in p.theta.items()}
    grads = ad.grad(loss_of(leaves, p.phi), list(leaves.values()))
    for (k, base), g in zip(p.theta.items(), grads):
        def f(v, k=k):
            th = dict(p.theta)
            th[k] = v
            with ad.no_record():
                return loss_of(th, p.phi).item()
        worst = max(worst, _max_rel(g.value, _numeric_grad(f, base)))

    feats = [rng.normal(size=(5, 4)), rng.normal(size=(3, 4))]
    tau = ad.leaf(rng.normal(size=2))
    (gt,) = ad.grad(controller_loss(feats, p.omega, tau), [tau])

    def f_tau(v):
        with ad.no_record():
            return controller_loss(feats, p.omega, v).item()

    worst = max(worst, _max_rel(gt.value, _numeric_grad(f_tau, tau.value)))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_second_order():
    # d/dw of (t - a * dLc/dt - 2)^2 with Lc = w^2 t^2 / 2, so dLc/dt = w^2 t
    t0, a, w0 = 0.7, 0.3, 1.3
    t, w = ad.leaf(t0), ad.leaf(w0)
    (g,) = ad.grad(w * w * t * t * 0.5, [t], record=True)
    (dw,) = ad.grad((t - a * g - 2.0) ** 2.0, [w])
    exact = 2 * (t0 - a * w0 * w0 * t0 - 2.0) * (-2 * a * w0 * t0)
    err = abs(dw.item() - exact) / abs(exact)
    return err < 1e-12, f"relative error {err:.2e}"


def check_controller_permutation():
    rng = SplitMix64(3)
    cfg = ModelConfig(input_dim=4, hidden=6, ctrl_hidden=5, latent=3)
    p = init_params(cfg, 2)
    worst = 0.0
    for case in range(20):
        sizes = [2 + case % 3, 4, 3 + case % 2]
        feats = [rng.normal(n * 6).reshape(n, 6) for n in sizes]
        base = controller_loss(feats, p.omega, p.tau).item()
        shuffled = [f[rng.permutation(len(f))] for f in feats][::-1]
        worst = max(worst, abs(controller_loss(shuffled, p.omega, p.tau).item() - base))
    return worst <= 1e-9, f"max |delta| {worst:.2e}"


def check_barycenter():
    rng = SplitMix64(5)
    worst = 0.0
    for case in range(50):
        k, d = 2 + case % 9, 1 + (7 * case) % 64
        lhs, rhs = barycenter_identity_check(rng.normal(k * d).reshape(k, d))
        worst = max(worst, abs(lhs - rhs) / max(abs(rhs), 1e-300))
    return worst <= 1e-9, f"max relative gap {worst:.2e}"


def check_mmnd():
    rng = SplitMix64(11)
    cfg = ModelConfig(input_dim=4, hidden=5, ctrl_hidden=4, latent=3)
    omega = init_params(cfg, 3).omega
    ok = True
    for _ in range(20):
        a, b = rng.normal(30).reshape(6, 5), rng.normal(20).reshape(4, 5)
        ab, ba = mmnd_estimate(a, b, omega), mmnd_estimate(b, a, omega)
        ok &= ab == ba and ab >= 0 and mmnd_estimate(a, a, omega) <= 1e-12
    return bool(ok), "symmetric, nonnegative, zero on identical sets"


def check_signal():
    fs = 200
    t = np.arange(fs) / fs
    e = stft_band_energy(np.sin(2 * np.pi * 10 * t)[None, :], fs)[0]
    alpha_share = e[2] / e.sum()
    noise = np.random.default_rng(0).normal(size=fs)
    te, se = tapered_energy(noise)
    parseval = abs(te - se) / te
    flat = lds_smooth(np.full(30, 2.5))
    ok = alpha_share > 0.999999 and parseval < 1e-9 and np.allclose(flat, 2.5, atol=1e-12)
    return ok, f"alpha share {alpha_share:.9f}, Parseval gap {parseval:.1e}"


def check_dataset():
    a = dataset_sha256(gen_synthetic(SynthSpec()))
    b = dataset_sha256(gen_synthetic(SynthSpec()))
    ok = a == b and (SYNTH_SHA256 is None or a == SYNTH_SHA256)
    return ok, a


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "grl": check_grl,
    "gradients": check_gradients,
    "second-order": check_second_order,
    "controller-permutation": check_controller_permutation,
    "barycenter": check_barycenter,
    "mmnd": check_mmnd,
    "signal": check_signal,
    "dataset": check_dataset,
}


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results

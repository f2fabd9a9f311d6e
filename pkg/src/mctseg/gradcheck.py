"""Finite-difference verification gateway.

Runs every differentiable primitive against central differences, then the
full tiny model: the total training loss is differentiated with respect to
the inputs (every coordinate) and with respect to every parameter tensor
(sampled coordinates). The whole suite runs in float64.
"""

import numpy as np

from . import blocks as B
from . import losses as L
from . import model as M
from . import tensor as T
from .model import MODALITIES, ArchConfig, ModalityMask
from .tensor import Tensor

F64 = np.float64
PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-4
H = 1e-4
# model-level wiggles use a smaller h: instance norm concentrates
# pre-activation mass near the LeakyReLU kink, and an h=1e-4 shift of a
# norm beta walks voxels across it; 1e-5 stays below the crossing scale
# while keeping the difference quotient above float64 roundoff
H_MODEL = 1e-5


def _probe(build):
    cache = {}

    def f(x):
        y = build(x)
        if "c" not in cache:
            cache["c"] = np.random.default_rng(4242).normal(size=y.shape)
        return T.tsum(T.cmul(y, cache["c"]))

    return f


def primitive_cases(seed=0):
    """(name, scalar function, base point) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    n = 5
    v = rng.normal(size=n)
    v_safe = np.where(np.abs(v) < 0.2, v + np.sign(v + 0.5) * 0.2, v)
    m = rng.normal(size=(3, 4))
    vol = rng.normal(size=(2, 3, 3, 3))
    w5 = rng.normal(size=(2, 2, 3, 3, 3)) * 0.5
    gm = rng.normal(size=4)
    bt = rng.normal(size=4)
    other = rng.normal(size=n) + 2.5
    keep = np.array([True, False, True, True, False])
    rhs = rng.normal(size=(4, 2))

    t64 = lambda a: Tensor(a, dtype=F64)
    cases = [
        ("add", _probe(lambda x: T.add(x, t64(other))), v),
        ("sub", _probe(lambda x: T.sub(x, t64(other))), v),
        ("mul", _probe(lambda x: T.mul(x, t64(other))), v),
        ("div", _probe(lambda x: T.div(x, t64(other))), v),
        ("scale", _probe(lambda x: T.scale(x, -1.7)), v),
        ("cmul", _probe(lambda x: T.cmul(x, other)), v),
        ("abs", _probe(lambda x: T.absval(x)), v_safe),
        ("leaky_relu", _probe(lambda x: T.leaky_relu(x, 0.01)), v_safe),
        ("gelu", _probe(lambda x: T.gelu(x)), v),
        ("reshape", _probe(lambda x: T.reshape(x, (4, 3))), m),
        ("transpose", _probe(lambda x: T.transpose(x, (1, 0))), m),
        ("concat", _probe(lambda x: T.concat([x, t64(m)], axis=0)), m),
        ("sum", _probe(lambda x: T.tsum(x, axis=1)), m),
        ("mean", _probe(lambda x: T.tmean(x, axis=0)), m),
        ("matmul", _probe(lambda x: T.matmul(x, t64(rhs))), m),
        ("softmax", _probe(lambda x: T.softmax(x, axis=0)), v),
        ("masked_softmax", _probe(lambda x: T.masked_softmax(x, keep, axis=0)), v),
        ("log_softmax", _probe(lambda x: T.log_softmax(x, axis=0)), v),
        ("layer_norm", _probe(lambda x: T.layer_norm(x, t64(gm), t64(bt))), m),
        ("instance_norm", _probe(lambda x: T.instance_norm(x, t64(gm[:2]), t64(bt[:2]))), vol),
        ("conv3d", _probe(lambda x: T.conv3d(x, t64(w5), t64(bt[:2]), stride=1, pad=1)), vol),
        ("conv3d_strided", _probe(lambda x: T.conv3d(x, t64(w5), t64(bt[:2]), stride=2, pad=1)),
         rng.normal(size=(2, 5, 5, 5))),
        ("resize3d", _probe(lambda x: T.resize3d(x, (5, 4, 6))), vol),
    ]
    return cases


def check_primitives(seed=0):
    """[(name, max relative error)] for the primitive battery."""
    results = []
    for name, f, x0 in primitive_cases(seed):
        err = T.finite_diff_check(f, Tensor(x0, dtype=F64), h=H)
        results.append((name, err))
    return results


def _tiny_setup(widths, crop, seed):
    cfg = ArchConfig(widths=widths, num_heads=min(4, widths[4]), ufe_depth=1, ffn_mult=2)
    store = M.build_params(cfg, seed, dtype=F64)
    rng = np.random.default_rng(seed + 1)
    # move the zero-initialized projections off zero so their partners
    # (wq/wk/wv, ffn w1, convblock convs) get nonzero gradients too, and
    # shift the norm affines so no pre-activation sits exactly on the
    # LeakyReLU kink (tiny 1x1x1 maps normalize to exactly beta)
    for key in store.keys():
        if key.endswith((".wo", ".w2", ".lin.w")):
            store.arrays[key] = rng.normal(size=store.arrays[key].shape) * 0.2
        elif key.endswith(".norm.b"):
            store.arrays[key] = rng.uniform(0.2, 0.6, size=store.arrays[key].shape) \
                * rng.choice([-1.0, 1.0], size=store.arrays[key].shape)
        elif key.endswith(".norm.g"):
            store.arrays[key] = rng.uniform(0.8, 1.2, size=store.arrays[key].shape)
    x = {m: rng.normal(size=(1, crop, crop, crop)) for m in MODALITIES}
    target = rng.integers(0, 4, size=(crop, crop, crop))
    mask = ModalityMask((True, True, False, True))
    weights = np.array([0.5, 1.5, 1.0, 1.0])
    return cfg, store, x, target, mask, weights


def _loss_for(store, cfg, xt, target, mask, weights, lambda_mfd=1.0):
    out = M.model_forward(store.view(False), cfg, xt, mask, "train")
    return L.branch_losses(out, target, weights, lambda_mfd=lambda_mfd)


def _wrap_inputs(x):
    return {m: Tensor(x[m], dtype=F64) for m in MODALITIES}


def check_model_inputs(widths=(2, 2, 2, 2, 4), crop=2, seed=0):
    """Max relative error of dL/dx over every input coordinate."""
    cfg, store, x, target, mask, weights = _tiny_setup(widths, crop, seed)

    def f(z):
        xt = _wrap_inputs(x)
        xt[MODALITIES[0]] = z
        return _loss_for(store, cfg, xt, target, mask, weights).l_total

    return T.finite_diff_check(f, Tensor(x[MODALITIES[0]], dtype=F64), h=H_MODEL)


def check_model_params(widths=(2, 4, 8, 16, 32), crop=4, seed=0, coords_per_tensor=4,
                       progress=None):
    """Central differences of the total loss for every parameter tensor.

    Samples up to coords_per_tensor coordinates per tensor (seeded), which
    covers every tensor while keeping the sweep inside the runtime budget.
    Returns [(key, max relative error)].
    """
    cfg, store, x, target, mask, weights = _tiny_setup(widths, crop, seed)

    view = store.view(True)
    with T.GradTape():
        out = M.model_forward(view, cfg, _wrap_inputs(x), mask, "train")
        lb = L.branch_losses(out, target, weights, lambda_mfd=1.0)
        T.backward(lb.l_total)
    grads = view.grads()

    rng = np.random.default_rng(seed + 7)
    results = []
    for key in store.keys():
        arr = store.arrays[key]
        analytic = grads.get(key)
        if analytic is None:
            analytic = np.zeros_like(arr)
        # the distillation loss detaches the teacher, so teacher-encoder
        # parameters train against the objective without that term; the
        # difference quotient must use the same function
        lam = 0.0 if key.startswith("enc.multi.") else 1.0
        size = arr.size
        picks = np.arange(size) if size <= coords_per_tensor else \
            rng.choice(size, size=coords_per_tensor, replace=False)
        worst = 0.0
        for idx in picks:
            orig = arr.flat[idx]
            arr.flat[idx] = orig + H_MODEL
            fp = float(_loss_for(store, cfg, _wrap_inputs(x), target, mask, weights,
                                 lambda_mfd=lam).l_total.data)
            arr.flat[idx] = orig - H_MODEL
            fm = float(_loss_for(store, cfg, _wrap_inputs(x), target, mask, weights,
                                 lambda_mfd=lam).l_total.data)
            arr.flat[idx] = orig
            num = (fp - fm) / (2 * H_MODEL)
            an = float(analytic.flat[idx])
            err = abs(an - num) / max(abs(an), abs(num), 1e-8)
            worst = max(worst, err)
        results.append((key, worst))
        if progress is not None:
            progress(key, worst)
    return results


def run_suite(report=print, corrupt=None, coords_per_tensor=4):
    """The full gateway. Returns (ok, worst_name, worst_err)."""
    if corrupt is not None:
        T.set_gradient_corruption(corrupt)
    try:
        worst_name, worst_err = "", 0.0
        ok = True
        for name, err in check_primitives():
            passed = err < PRIMITIVE_TOL
            ok &= passed
            if err > worst_err:
                worst_name, worst_err = f"primitive:{name}", err
            report(f"primitive {name:<16s} max_rel_err {err:.3e} "
                   f"{'PASS' if passed else 'FAIL'}")

        err = check_model_inputs()
        passed = err < MODEL_TOL
        ok &= passed
        if err > worst_err:
            worst_name, worst_err = "model:inputs", err
        report(f"model    {'inputs':<16s} max_rel_err {err:.3e} "
               f"{'PASS' if passed else 'FAIL'}")

        for key, err in check_model_params(coords_per_tensor=coords_per_tensor):
            passed = err < MODEL_TOL
            ok &= passed
            if err > worst_err:
                worst_name, worst_err = f"param:{key}", err
            report(f"param    {key:<28s} max_rel_err {err:.3e} "
                   f"{'PASS' if passed else 'FAIL'}")
        return ok, worst_name, worst_err
    finally:
        T.set_gradient_corruption(None)

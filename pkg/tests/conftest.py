import numpy as np
import pytest

from eyepad.autodiff import Tensor


def central_diff(f, arrays, h=1e-5):
    """Central finite-difference gradients of scalar f() w.r.t. each array.

    f is re-evaluated with entries of the given arrays perturbed in place;
    it may return a float or a scalar Tensor.
    """

    def evaluate():
        out = f()
        return out.item() if hasattr(out, "item") else float(out)

    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            dn = evaluate()
            flat[i] = orig
            gflat[i] = (up - dn) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-3):
    """Worst-case relative error with a floor so zero-gradient entries
    compare absolutely at the floor scale."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))


def param_tensor(rng, shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


@pytest.fixture(scope="session")
def tiny_bundle():
    """A small clean bundle shared by protocol/trainer tests."""
    from eyepad.synthdata import BundleConfig, build_bundle

    cfg = BundleConfig(
        n_train_users=8,
        n_test_users=6,
        images_per_side=8,
        query_per_side=4,
        gallery_per_side=5,
        n_pad_train_users=6,
        n_pad_test_users=6,
        pad_live_per_user=8,
        pad_lens_per_user=4,
        pad_print_per_user=4,
        seed=11,
    )
    return build_bundle(cfg)

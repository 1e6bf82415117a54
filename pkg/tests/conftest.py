import numpy as np

from aenv.autodiff import Tensor


def finite_difference_check(build_loss, arrays, step=1e-4, rtol=1e-4):
    """Central finite-difference gradient check in float64.

    `build_loss` maps a list of Tensors (one per array in `arrays`) to a
    scalar Tensor. Asserts the relative error of every analytic gradient
    against central differences is below `rtol`.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    loss.backward()

    def eval_with(mod_idx, values):
        args = [Tensor(values.reshape(a.shape)) if j == mod_idx else Tensor(a)
                for j, a in enumerate(arrays)]
        return build_loss(args).data.item()

    for j, (t, base) in enumerate(zip(tensors, arrays)):
        assert t.grad is not None, f"no gradient for input {j}"
        numeric = np.zeros(base.size)
        flat = base.ravel()
        for i in range(flat.size):
            plus = flat.copy()
            plus[i] += step
            minus = flat.copy()
            minus[i] -= step
            numeric[i] = (eval_with(j, plus) - eval_with(j, minus)) / (2 * step)
        numeric = numeric.reshape(base.shape)
        scale = max(np.abs(numeric).max(), np.abs(t.grad).max(), 1e-8)
        rel = np.abs(t.grad - numeric).max() / scale
        assert rel < rtol, f"gradient mismatch on input {j}: rel error {rel:.2e}"
    return True

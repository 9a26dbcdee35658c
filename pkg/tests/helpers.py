"""Finite-difference gradient oracle shared by the test modules."""

import numpy as np


def fd_check(loss_of_params, param_sets, analytic, rng, n_coords=100, step=1e-4, rtol=1e-3):
    """Compare analytic gradients with central differences on random coordinates.

    ``param_sets`` is a list of ParameterSet objects, ``analytic`` a parallel list
    of gradient dicts. Returns the worst relative error seen.
    """
    coords = []
    for i, ps in enumerate(param_sets):
        for name, t in ps.tensors.items():
            for flat in range(t.size):
                coords.append((i, name, flat))
    pick = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    worst = 0.0
    for j in pick:
        i, name, flat = coords[j]
        t = param_sets[i].tensors[name].reshape(-1)
        old = t[flat]
        t[flat] = old + step
        up = loss_of_params()
        t[flat] = old - step
        down = loss_of_params()
        t[flat] = old
        numeric = (up - down) / (2 * step)
        a = analytic[i].get(name, np.zeros_like(param_sets[i].tensors[name])).reshape(-1)[flat]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, rel)
        assert rel < rtol, f"{name}[{flat}]: analytic {a:.6e} vs numeric {numeric:.6e}"
    return worst

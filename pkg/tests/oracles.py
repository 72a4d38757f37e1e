"""Independent reference computations used by the tests."""
import numpy as np


def trapezoid_mollify(radial, r, k, n=400001, jumps=(0.0,)):
    """Fine-grid trapezoid value of ``(s * rho_k)(r)`` for the odd scalar law ``radial``.

    Grid pieces end at the jumps (and their mirror images), so the
    trapezoid rule converges at second order on each smooth piece.
    """
    from scipy.integrate import quad

    z_mass, _ = quad(lambda s: np.exp(-1.0 / (1.0 - s * s)), -1, 1, epsabs=1e-14)
    out = []
    for ri in np.atleast_1d(r):
        lo, hi = ri - 1.0 / k, ri + 1.0 / k
        cuts = sorted({c for j in jumps for c in (j, -j) if lo < c < hi})
        pieces = [lo] + cuts + [hi]
        total = 0.0
        for a, b in zip(pieces, pieces[1:]):
            z = np.linspace(a, b, n)
            s = k * (ri - z)
            kern = np.zeros_like(s)
            inside = np.abs(s) < 1
            kern[inside] = k * np.exp(-1.0 / (1.0 - s[inside] ** 2)) / z_mass
            vals = radial(z) * kern
            # one-sided values at the cuts
            if a in cuts:
                vals[0] = radial(np.array([a + 1e-300 + abs(a) * 1e-15]))[0] * kern[0]
            if b in cuts:
                vals[-1] = radial(np.array([b - 1e-300 - abs(b) * 1e-15]))[0] * kern[-1]
            total += np.trapezoid(vals, z)
        out.append(total)
    return np.array(out)


def matrix_mollifier_mc(selection, D, k, n_samples=200000, seed=0):
    """Monte Carlo value of the full tensor convolution of ``selection`` with a
    radially symmetric bump on the 3-dimensional space of symmetric 2x2 tensors.

    Samples come from the normalized bump density by rejection from the ball
    of radius 1/k.  Low accuracy, used only for consistency checks.
    """
    rng = np.random.default_rng(seed)
    basis = np.array([[[1, 0], [0, 0]], [[0, 0], [0, 1]],
                      [[0, 1], [1, 0]] / np.sqrt(2.0)], dtype=float)
    acc = []
    total = 0
    while total < n_samples:
        x = rng.uniform(-1, 1, (4 * n_samples, 3))
        r2 = np.sum(x * x, axis=1)
        inside = r2 < 1
        x, r2 = x[inside], r2[inside]
        dens = np.exp(-1.0 / (1.0 - r2)) / np.exp(-1.0)
        keep = rng.uniform(0, 1, len(x)) < dens
        x = x[keep][: n_samples - total]
        acc.append(x)
        total += len(x)
    y = np.concatenate(acc) / k
    E = np.einsum("ni,ijk->njk", y, basis)
    vals = selection(D[None] - E)
    return vals.mean(axis=0)


def read_legacy_vtk(path):
    """Minimal legacy-VTK ASCII reader for unstructured triangle grids."""
    tokens = open(path, encoding="ascii").read().split("\n")
    i = 0
    out = {"point_data": {}, "cell_data": {}}
    section = None
    while i < len(tokens):
        line = tokens[i].strip()
        i += 1
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if key == "POINTS":
            n = int(parts[1])
            rows = [tokens[i + j].split() for j in range(n)]
            out["points_text"] = rows
            out["points"] = np.array([[float(v) for v in r] for r in rows])
            i += n
        elif key == "CELLS":
            n = int(parts[1])
            out["cells"] = np.array([[int(v) for v in tokens[i + j].split()] for j in range(n)])
            i += n
        elif key == "CELL_TYPES":
            n = int(parts[1])
            out["cell_types"] = np.array([int(tokens[i + j]) for j in range(n)])
            i += n
        elif key == "POINT_DATA":
            section, count = "point_data", int(parts[1])
        elif key == "CELL_DATA":
            section, count = "cell_data", int(parts[1])
        elif key == "VECTORS":
            out[section][parts[1]] = np.array([[float(v) for v in tokens[i + j].split()] for j in range(count)])
            i += count
        elif key == "SCALARS":
            i += 1  # LOOKUP_TABLE
            out[section][parts[1]] = np.array([float(tokens[i + j]) for j in range(count)])
            i += count
        elif key.startswith("#") or key in ("ASCII", "DATASET") or section is None:
            out.setdefault("header", []).append(line)
    return out

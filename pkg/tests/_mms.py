"""Manufactured solution on the unit square: u = curl(sin^2(pi x) sin^2(pi y) / pi), p = cos(pi x) cos(pi y)."""

import numpy as np

PI = np.pi


def velocity(x, y):
    return np.sin(PI * x) ** 2 * np.sin(2 * PI * y), -np.sin(2 * PI * x) * np.sin(PI * y) ** 2


def pressure(x, y):
    return np.cos(PI * x) * np.cos(PI * y)


def forcing(nu):
    """Body force making (velocity, pressure) an exact steady solution at viscosity ``nu``."""
    def f(x, y):
        ux, uy = velocity(x, y)
        lap_x = 2 * PI**2 * np.sin(2 * PI * y) * (2 * np.cos(2 * PI * x) - 1)
        lap_y = -2 * PI**2 * np.sin(2 * PI * x) * (2 * np.cos(2 * PI * y) - 1)
        dux_dx = PI * np.sin(2 * PI * x) * np.sin(2 * PI * y)
        dux_dy = 2 * PI * np.sin(PI * x) ** 2 * np.cos(2 * PI * y)
        duy_dx = -2 * PI * np.cos(2 * PI * x) * np.sin(PI * y) ** 2
        duy_dy = -dux_dx
        px = -PI * np.sin(PI * x) * np.cos(PI * y)
        py = -PI * np.cos(PI * x) * np.sin(PI * y)
        return (-nu * lap_x + px + ux * dux_dx + uy * dux_dy,
                -nu * lap_y + py + ux * duy_dx + uy * duy_dy)
    return f


def l2_errors(library, sol, scale=1.0):
    """L2 errors of a full solution against the manufactured fields evaluated at ``x / scale``."""
    eu = ep = 0.0
    for m, c in enumerate(sol.topology.cells):
        space = library.spaces[c]
        q = (space.qpoints + sol.topology.origin(m)) / scale
        vals, _ = space.eval_velocity(sol.u[m])
        exact = np.stack(velocity(q[..., 0], q[..., 1]), axis=-1)
        eu += (space.qw[..., None] * (vals - exact) ** 2).sum()
        ph = np.einsum("qi,ti->tq", space.psi, sol.p[m][space.mesh.triangles])
        ep += (space.qw * (ph - pressure(q[..., 0], q[..., 1])) ** 2).sum()
    return np.sqrt(eu), np.sqrt(ep)


def solve_mms(n_edge, nu=0.04, sigma=40.0):
    from crom.fem import ComponentLibrary
    from crom.geometry import ComponentGeometry, build_component_mesh
    from crom.solvers import build_topology, solve_fom

    lib = ComponentLibrary({"empty": build_component_mesh(ComponentGeometry("empty"), n_edge)}, nu, sigma)
    sol, rep = solve_fom(build_topology([["empty"]]), lib, (0.0, 0.0), forcing=forcing(nu))
    return lib, sol, rep

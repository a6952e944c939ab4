"""Decoupled spacetime trajectory optimizer for pouring.

Alternates two updates: the fluid trajectory is refreshed by forward rollout
of the reduced model at every inner iteration, and the joint trajectory is
stepped by a damped SQP iteration whose QP subproblem combines a
Gauss-Newton expansion of the liquid-transfer objective, an exact Laplacian
smoothness Hessian, soft collision penalties (L1 slack or augmented
Lagrangian), hard joint/velocity limit rows, and Levenberg-Marquardt
damping.  Collision contacts are refreshed in the outer loop; damping
adapts on step quality, increasing on rejected steps.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import collision as coll
from .fluid import (FluidState, FluidTrajectory, OutflowCoeffs, QuadraticCurve,
                    azimuth_rotation, outflow_direction_local, rollout,
                    time_to_altitude)
from .geometry import GRAVITY, GeomTables
from .qp import QPProblem, solve_qp
from .robot import (KinematicChain, RobotTrajectory, forward_kinematics,
                    geom_world_poses, jacobians, lean_azimuth, point_jacobian)

GRAV_VEC = np.array([0.0, 0.0, -GRAVITY])


@dataclass
class WorldModel:
    """Static obstacles, the target opening center, and the catch region."""

    obstacles: list                      # (name, shape, pose4x4)
    o_t: np.ndarray                      # target opening center (3,)
    target_region: np.ndarray | None = None   # 2D polygon in the pour plane

    def __post_init__(self):
        self.o_t = np.asarray(self.o_t, dtype=float)


@dataclass
class PlanningProblem:
    chain: KinematicChain
    world: WorldModel
    tables: GeomTables
    coeffs: OutflowCoeffs
    fluid0: FluidState
    n: int = 100
    tau: float = 8.0
    theta_final: float = 0.5 * math.pi
    penalty_mode: str = "al"             # "al" | "l1"
    q_start: np.ndarray | None = None
    q_prepour: np.ndarray | None = None
    weights: tuple = (1.0, 1.0, 0.1)     # transfer, guide, smoothness
    collision_margin: float = 0.005
    adjacency: set = field(default_factory=set)

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("need at least 3 trajectory samples")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.penalty_mode not in ("al", "l1"):
            raise ValueError("penalty_mode must be 'al' or 'l1'")
        if not np.all(np.isfinite(self.world.o_t)):
            raise ValueError("target opening center must be finite")

    @property
    def dt(self) -> float:
        return self.tau / (self.n - 1)


@dataclass
class SolverSettings:
    damping: float = 1.0                 # initial trust-region damping k
    eps: float = 1e-4                    # step max-norm convergence threshold
    eta: float = 10.0                    # L1 penalty weight
    mu: float = 100.0                    # AL quadratic weight
    max_outer: int = 60
    max_inner: int = 25
    qp_tol: float = 1e-10
    damping_min: float = 1e-8
    damping_max: float = 1e8
    penalty_max: float = 1e8

    def __post_init__(self):
        if self.damping <= 0 or self.eps <= 0 or self.eta <= 0 or self.mu <= 0:
            raise ValueError("damping, eps, eta, mu must be positive")


@dataclass
class PlanReport:
    converged: bool
    outer_iterations: int
    inner_iterations: int
    qp_iterations: int
    rejected_steps: int
    cost_transfer: float
    cost_guide: float
    cost_smoothness: float
    cost_penalty: float
    max_violation: float
    min_clearance: float
    predicted_pour_fraction: float
    clamp_events: int
    wall_time: float
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# cost terms
# ---------------------------------------------------------------------------

def smoothness_cost(Q):
    """Joint-space Laplacian penalty with its exact constant Hessian."""
    Q = np.asarray(Q, dtype=float)
    n, dof = Q.shape
    if n < 3:
        raise ValueError("need at least 3 samples")
    lap = Q[:-2] - 2.0 * Q[1:-1] + Q[2:]
    value = 0.5 * float((lap ** 2).sum())
    D = np.zeros((n - 2, n))
    idx = np.arange(n - 2)
    D[idx, idx] = 1.0
    D[idx, idx + 1] = -2.0
    D[idx, idx + 2] = 1.0
    H_small = D.T @ D
    H = np.kron(H_small, np.eye(dof))
    grad = (H @ Q.reshape(-1)).reshape(n, dof)
    return value, grad, H


@dataclass
class TimestepKin:
    theta: float
    phi: float
    dtheta: np.ndarray
    dphi: np.ndarray
    pos: np.ndarray
    J_pos: np.ndarray
    fk: object


def kinematics_along(chain: KinematicChain, Q) -> list:
    out = []
    for q in np.asarray(Q, dtype=float):
        fk = forward_kinematics(chain, q)
        la = lean_azimuth(fk.container)
        jac = jacobians(chain, q)
        out.append(TimestepKin(theta=la.theta, phi=la.phi,
                               dtheta=jac.dtheta_dq, dphi=jac.dphi_dq,
                               pos=fk.container[:3, 3], J_pos=jac.J_pos, fk=fk))
    return out


def _rotation_z_prime(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def _dir_prime(theta: float) -> np.ndarray:
    if theta < 0.5 * math.pi:
        return np.zeros(3)
    return np.array([math.cos(theta), 0.0, -math.sin(theta)])


def transfer_objective(Q, P: FluidTrajectory, problem: PlanningProblem,
                       kin=None):
    """Liquid-transfer cost, gradient and Gauss-Newton Hessian in Q.

    The fluid trajectory P is held fixed (decoupled update).  Each timestep
    weights the squared miss distance of the flight parabola, evaluated
    where it reaches the target-opening altitude, by the outflow area; the
    final sample adds the guiding term pulling the leaning angle to its
    target.  The two pieces carry the problem's transfer and guide weights.
    Timesteps with zero area or no altitude crossing contribute nothing.
    Gradients flow through the leaning angle, azimuth and container
    position; the Hessian keeps only first-order residual terms so it stays
    positive semi-definite.
    """
    Q = np.asarray(Q, dtype=float)
    n, dof = Q.shape
    if kin is None:
        kin = kinematics_along(problem.chain, Q)
    thetas = np.array([k.theta for k in kin])
    tq = problem.tables.interp_many(thetas, P.vol)
    w_obj, w_guide, _ = problem.weights

    value = 0.0
    grad = np.zeros((n, dof))
    H = np.zeros((n * dof, n * dof))
    o_t = problem.world.o_t

    for i in range(n):
        A = float(tq["A"][i])
        dA_dth = float(tq["dA_dtheta"][i])
        if A <= 0.0 and dA_dth == 0.0:
            continue
        k = kin[i]
        v_out = float(P.v_out[i])
        rot = azimuth_rotation(k.phi)
        rot_p = _rotation_z_prime(k.phi)
        e_tilt = np.array([float(tq["ex"][i]), 0.0, float(tq["ez"][i])])
        de_tilt = np.array([float(tq["dex_dtheta"][i]), 0.0,
                            float(tq["dez_dtheta"][i])])
        d_local = outflow_direction_local(k.theta)
        V = v_out * (rot @ d_local)
        E = k.pos + rot @ e_tilt
        curve = QuadraticCurve(gravity=GRAV_VEC, v_out=V, origin=E)
        t_hit = time_to_altitude(curve, o_t)
        if t_hit is None:
            continue
        r = curve.position(t_hit) - o_t

        # dV/dq and dE/dq through (theta, phi, position)
        dV = (v_out * np.outer(rot_p @ d_local, k.dphi)
              + v_out * np.outer(rot @ _dir_prime(k.theta), k.dtheta))
        dE = (k.J_pos + np.outer(rot_p @ e_tilt, k.dphi)
              + np.outer(rot @ de_tilt, k.dtheta))
        dC = t_hit * dV + dE                      # (3, dof), at fixed t
        dCdt = GRAV_VEC * t_hit + V
        denom = float(GRAV_VEC @ dCdt)
        if abs(denom) > 1e-9:
            dt_dq = -(GRAV_VEC @ dC) / denom      # (dof,)
        else:
            dt_dq = np.zeros(dof)
        J_r = dC + np.outer(dCdt, dt_dq)          # (3, dof)

        w = w_obj * max(A, 0.0)
        r2 = float(r @ r)
        value += w * r2
        grad[i] += w_obj * dA_dth * k.dtheta * r2 + 2.0 * w * (J_r.T @ r)
        sl = slice(i * dof, (i + 1) * dof)
        H[sl, sl] += 2.0 * w * (J_r.T @ J_r)

    # guiding term on the final leaning angle
    kN = kin[-1]
    dth = kN.theta - problem.theta_final
    value += w_guide * dth * dth
    grad[-1] += 2.0 * w_guide * dth * kN.dtheta
    slN = slice((n - 1) * dof, n * dof)
    H[slN, slN] += 2.0 * w_guide * np.outer(kN.dtheta, kN.dtheta)
    return value, grad, H


@dataclass
class LinearContact:
    """One linearized separation constraint tied to a single timestep."""

    timestep: int
    sd: float                  # signed distance minus safety margin
    grad: np.ndarray           # d(sd)/dq at that timestep (dof,)
    key: tuple                 # persistent identity across outer iterations


@dataclass
class PenaltyModel:
    mode: str
    value: float               # merit contribution at the linearization point
    grad: np.ndarray           # gradient in flat Q at the linearization point
    contacts: list
    eta: float
    mu: float
    lambdas: np.ndarray

    def constraint_values(self, dq_flat: np.ndarray, n: int, dof: int):
        vals = np.empty(len(self.contacts))
        for j, lc in enumerate(self.contacts):
            sl = slice(lc.timestep * dof, (lc.timestep + 1) * dof)
            vals[j] = lc.sd + float(lc.grad @ dq_flat[sl])
        return vals

    def merit(self, dq_flat: np.ndarray, n: int, dof: int) -> float:
        c = self.constraint_values(dq_flat, n, dof)
        return _penalty_merit(c, self.mode, self.eta, self.mu, self.lambdas)


def _penalty_merit(c, mode, eta, mu, lambdas) -> float:
    if mode == "l1":
        return float(eta * np.maximum(0.0, -c).sum())
    u0 = lambdas / (2.0 * mu)
    val = np.where(c >= u0, -lambdas ** 2 / (4.0 * mu),
                   mu * c ** 2 - lambdas * c)
    return float(val.sum())


def collision_penalty(lin_contacts, mode: str, params, n: int,
                      dof: int) -> PenaltyModel:
    """Soft-penalty model of the linearized separation constraints.

    ``params`` carries eta (L1 weight), mu (AL weight) and per-contact
    multipliers lambdas.  The returned model evaluates the merit penalty at
    trajectory perturbations and exposes the pieces the QP assembly needs.
    """
    eta = float(params.get("eta", 1.0))
    mu = float(params.get("mu", 1.0))
    lambdas = np.asarray(params.get("lambdas",
                                    np.zeros(len(lin_contacts))), dtype=float)
    c0 = np.array([lc.sd for lc in lin_contacts])
    value = _penalty_merit(c0, mode, eta, mu, lambdas) if len(c0) else 0.0
    grad = np.zeros(n * dof)
    for j, lc in enumerate(lin_contacts):
        sl = slice(lc.timestep * dof, (lc.timestep + 1) * dof)
        if mode == "l1":
            dpen = -eta if c0[j] < 0.0 else 0.0
        else:
            u0 = lambdas[j] / (2.0 * mu)
            dpen = 2.0 * mu * c0[j] - lambdas[j] if c0[j] < u0 else 0.0
        grad[sl] += dpen * lc.grad
    return PenaltyModel(mode=mode, value=float(value), grad=grad,
                        contacts=list(lin_contacts), eta=eta, mu=mu,
                        lambdas=lambdas)


# ---------------------------------------------------------------------------
# contact gathering
# ---------------------------------------------------------------------------

def _bodies_at(problem: PlanningProblem, kin_i: TimestepKin):
    return geom_world_poses(problem.chain, kin_i.fk)


def gather_contacts(problem: PlanningProblem, Q, kin=None):
    """Deepest contact per (body, obstacle) pair and timestep, linearized.

    The separation value is shifted by the safety margin so the constraint
    reads sd - margin >= 0.  The gradient treats both witness points as
    rigidly attached to their bodies.
    """
    Q = np.asarray(Q, dtype=float)
    if kin is None:
        kin = kinematics_along(problem.chain, Q)
    margin = problem.collision_margin
    out = []
    geoms = problem.chain.link_geoms
    for i, k in enumerate(kin):
        bodies = _bodies_at(problem, k)
        contacts = coll.deepest_contacts(problem.world.obstacles, bodies,
                                         margin=2.0 * margin + 0.02,
                                         adjacency=problem.adjacency)
        for c in contacts:
            body_names = [b[0] for b in bodies]
            link_a = geoms[body_names.index(c.body_a)].link
            J_a = point_jacobian(problem.chain, k.fk, link_a, c.a)
            if c.body_b in body_names:
                link_b = geoms[body_names.index(c.body_b)].link
                J_b = point_jacobian(problem.chain, k.fk, link_b, c.b)
            else:
                J_b = np.zeros_like(J_a)
            grad = c.n @ (J_a - J_b)
            out.append(LinearContact(timestep=i,
                                     sd=c.signed_distance - margin,
                                     grad=grad,
                                     key=(i, c.body_a, c.body_b)))
    return out


def min_clearance_along(problem: PlanningProblem, Q, kin=None) -> float:
    """Smallest raw separation over all timesteps and checked pairs."""
    if kin is None:
        kin = kinematics_along(problem.chain, np.asarray(Q, dtype=float))
    worst = np.inf
    for k in kin:
        bodies = _bodies_at(problem, k)
        sep = coll.min_separation(problem.world.obstacles, bodies,
                                  adjacency=problem.adjacency)
        worst = min(worst, sep)
    return float(worst)


# ---------------------------------------------------------------------------
# the planner
# ---------------------------------------------------------------------------

def default_initial_trajectory(problem: PlanningProblem) -> np.ndarray:
    """Straight joint-space ramp from the start pose to the pre-pour pose."""
    if problem.q_start is None or problem.q_prepour is None:
        raise ValueError("problem must provide q_start and q_prepour")
    w = np.linspace(0.0, 1.0, problem.n)[:, None]
    return (1.0 - w) * problem.q_start[None, :] + w * problem.q_prepour[None, :]


def _rollout_for(problem: PlanningProblem, kin) -> FluidTrajectory:
    thetas = np.array([k.theta for k in kin])
    return rollout(problem.fluid0, thetas, problem.dt, problem.tables,
                   problem.coeffs)


def _merit(problem, Q, kin, penalty_model, q_ref_flat):
    _, _, w_reg = problem.weights
    P = _rollout_for(problem, kin)
    val_transfer, val_guide = transfer_values(Q, P, problem, kin)
    reg, _, _ = smoothness_cost(Q)
    pen = penalty_model.merit(Q.reshape(-1) - q_ref_flat, problem.n,
                              problem.chain.dof)
    return val_transfer + val_guide + w_reg * reg + pen, P


def transfer_values(Q, P, problem, kin=None):
    """Weighted (transfer, guide) split of the objective, values only."""
    if kin is None:
        kin = kinematics_along(problem.chain, np.asarray(Q, dtype=float))
    thetas = np.array([k.theta for k in kin])
    tq = problem.tables.interp_many(thetas, P.vol)
    o_t = problem.world.o_t
    w_obj, w_guide, _ = problem.weights
    transfer = 0.0
    for i in range(problem.n):
        A = float(tq["A"][i])
        if A <= 0.0:
            continue
        k = kin[i]
        rot = azimuth_rotation(k.phi)
        e_tilt = np.array([float(tq["ex"][i]), 0.0, float(tq["ez"][i])])
        V = float(P.v_out[i]) * (rot @ outflow_direction_local(k.theta))
        E = k.pos + rot @ e_tilt
        curve = QuadraticCurve(gravity=GRAV_VEC, v_out=V, origin=E)
        t_hit = time_to_altitude(curve, o_t)
        if t_hit is None:
            continue
        r = curve.position(t_hit) - o_t
        transfer += A * float(r @ r)
    dth = kin[-1].theta - problem.theta_final
    return w_obj * transfer, w_guide * dth * dth


def plan(problem: PlanningProblem, settings: SolverSettings | None = None,
         Q0=None):
    """Run the decoupled spacetime optimization.

    Outer iterations refresh collision contacts and penalty schedules;
    inner iterations refresh the fluid rollout, expand the objective, solve
    the damped QP and accept or reject the step by the merit function.
    Returns (RobotTrajectory, FluidTrajectory, PlanReport).
    """
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    n, dof = problem.n, problem.chain.dof
    Q = np.asarray(default_initial_trajectory(problem) if Q0 is None else Q0,
                   dtype=float).copy()
    if Q.shape != (n, dof):
        raise ValueError(f"Q0 must have shape ({n}, {dof})")
    lo, hi = problem.chain.lower, problem.chain.upper
    if np.any(Q < lo - 1e-12) or np.any(Q > hi + 1e-12):
        raise ValueError("initial trajectory violates joint limits")

    w_obj, w_guide, w_reg = problem.weights
    damping = settings.damping
    eta, mu = settings.eta, settings.mu
    lam_store: dict = {}
    v_prev = None

    # constant pieces
    _, _, H_reg = smoothness_cost(Q)
    vmax = problem.chain.v_max
    dt = problem.dt

    # velocity rows |q_{i+1} - q_i| <= vmax dt as two >= rows each
    rows = []
    rhs = []
    for i in range(n - 1):
        for d in range(dof):
            row = np.zeros(n * dof)
            row[(i + 1) * dof + d] = 1.0
            row[i * dof + d] = -1.0
            rows.append(row.copy())
            rhs.append(-vmax[d] * dt)
            rows.append(-row)
            rhs.append(-vmax[d] * dt)
    A_vel = np.array(rows)
    c_vel = np.array(rhs)

    lb_q = np.tile(lo, n)
    ub_q = np.tile(hi, n)
    lb_q[:dof] = Q[0]
    ub_q[:dof] = Q[0]

    outer_used = 0
    inner_total = 0
    qp_iters = 0
    rejected = 0
    converged = False
    message = ""

    kin = kinematics_along(problem.chain, Q)

    for outer in range(1, settings.max_outer + 1):
        outer_used = outer
        Q_outer_ref = Q.copy()

        lin_contacts = gather_contacts(problem, Q, kin)
        violation = float(sum(max(0.0, -lc.sd) for lc in lin_contacts))
        if v_prev is not None and violation > 1e-9 and violation > 0.5 * v_prev:
            if problem.penalty_mode == "l1":
                eta = min(eta * 10.0, settings.penalty_max)
            else:
                mu = min(mu * 10.0, settings.penalty_max)
        if problem.penalty_mode == "al":
            for lc in lin_contacts:
                lam_old = lam_store.get(lc.key[1:], 0.0)
                lam_store[lc.key[1:]] = max(0.0, lam_old - 2.0 * mu * lc.sd)
        v_prev = violation

        lambdas = np.array([lam_store.get(lc.key[1:], 0.0)
                            for lc in lin_contacts])
        params = {"eta": eta, "mu": mu, "lambdas": lambdas}

        q_ref_flat = Q.reshape(-1).copy()
        penalty_model = collision_penalty(lin_contacts, problem.penalty_mode,
                                          params, n, dof)

        for inner in range(1, settings.max_inner + 1):
            inner_total += 1
            P = _rollout_for(problem, kin)
            val_obj, grad_obj, H_obj = transfer_objective(Q, P, problem, kin)
            reg_val, grad_reg, _ = smoothness_cost(Q)

            n_slack = len(lin_contacts)
            dim = n * dof + n_slack
            H = np.zeros((dim, dim))
            g = np.zeros(dim)
            qf = Q.reshape(-1)

            # transfer_objective already carries its own weights
            H_q = H_obj + w_reg * H_reg
            grad_q = grad_obj.reshape(-1) + w_reg * grad_reg.reshape(-1)
            H[:n * dof, :n * dof] = H_q
            g[:n * dof] = grad_q - H_q @ qf

            lb = np.concatenate([lb_q, np.zeros(n_slack)])
            ub = np.concatenate([ub_q, np.full(n_slack, np.inf)])
            A_list = [np.column_stack([A_vel, np.zeros((len(A_vel), n_slack))])] \
                if len(A_vel) else []
            c_list = [c_vel] if len(A_vel) else []

            for j, lc in enumerate(lin_contacts):
                sl = slice(lc.timestep * dof, (lc.timestep + 1) * dof)
                a = np.zeros(dim)
                a[sl] = lc.grad
                const = lc.sd - float(lc.grad @ qf[sl])
                if problem.penalty_mode == "al":
                    a[n * dof + j] = -1.0
                    lam_j = lambdas[j]
                    # mu * (a^T x + const)^2 - lam * (a^T x + const)
                    H += 2.0 * mu * np.outer(a, a)
                    g += (2.0 * mu * const - lam_j) * a
                else:
                    # eta * t_j with rows t_j >= -(c_j)
                    g[n * dof + j] += eta
                    row = np.zeros(dim)
                    row[sl] = lc.grad
                    row[n * dof + j] = 1.0
                    A_list.append(row[None, :])
                    c_list.append(np.array([-const]))

            H[np.diag_indices(dim)] += damping
            A_all = np.vstack(A_list) if A_list else None
            c_all = np.concatenate(c_list) if c_list else None

            x0 = np.concatenate([qf, np.zeros(n_slack)])
            sol = solve_qp(QPProblem(H=H, g=g, lb=lb, ub=ub, A=A_all, c=c_all),
                           x0=x0, tol=settings.qp_tol)
            qp_iters += sol.iterations
            Q_star = sol.x[:n * dof].reshape(n, dof)

            step = float(np.abs(Q_star - Q).max())
            if step < settings.eps:
                break

            # trust-region test on the true (decoupled) merit
            kin_star = kinematics_along(problem.chain, Q_star)
            m_cur, _ = _merit(problem, Q, kin, penalty_model, q_ref_flat)
            m_new, _ = _merit(problem, Q_star, kin_star, penalty_model,
                              q_ref_flat)
            model_cur = _qp_objective_at(H, g, x0, lin_contacts, problem,
                                         mu, eta, lambdas, qf, n, dof, damping)
            model_new = float(0.5 * sol.x @ H @ sol.x + g @ sol.x)
            denom = model_cur - model_new
            rho = (m_cur - m_new) / denom if denom > 1e-15 else \
                (1.0 if m_new < m_cur else -1.0)

            if rho > 0.0:
                Q = Q_star
                kin = kin_star
                if rho > 0.75:
                    damping = max(damping * 0.5, settings.damping_min)
                elif rho < 0.25:
                    damping = min(damping * 2.0, settings.damping_max)
            else:
                rejected += 1
                damping = min(damping * 2.0, settings.damping_max)
                if damping >= settings.damping_max:
                    break

        if float(np.abs(Q - Q_outer_ref).max()) < settings.eps and outer > 1:
            converged = True
            break

    if not converged:
        message = "outer iteration cap reached without convergence"

    kin = kinematics_along(problem.chain, Q)
    P = _rollout_for(problem, kin)
    val_transfer, val_guide = transfer_values(Q, P, problem, kin)
    reg_val, _, _ = smoothness_cost(Q)
    lin_contacts = gather_contacts(problem, Q, kin)
    lambdas = np.array([lam_store.get(lc.key[1:], 0.0) for lc in lin_contacts])
    pen_model = collision_penalty(lin_contacts, problem.penalty_mode,
                                  {"eta": eta, "mu": mu, "lambdas": lambdas},
                                  n, dof)
    report = PlanReport(
        converged=converged,
        outer_iterations=outer_used,
        inner_iterations=inner_total,
        qp_iterations=qp_iters,
        rejected_steps=rejected,
        cost_transfer=float(val_transfer),
        cost_guide=float(val_guide),
        cost_smoothness=float(reg_val),
        cost_penalty=float(pen_model.value),
        max_violation=float(max((max(0.0, -lc.sd) for lc in lin_contacts),
                                default=0.0)),
        min_clearance=min_clearance_along(problem, Q, kin),
        predicted_pour_fraction=float(1.0 - P.vol[-1] / max(P.vol[0], 1e-30)),
        clamp_events=P.clamp_events,
        wall_time=time.perf_counter() - t0,
        message=message,
    )
    return RobotTrajectory(Q=Q, tau=problem.tau), P, report


def _qp_objective_at(H, g, x0, lin_contacts, problem, mu, eta, lambdas,
                     qf, n, dof, damping):
    """QP model value at the current point with optimal slack settings."""
    x = x0.copy()
    for j, lc in enumerate(lin_contacts):
        c_j = lc.sd
        if problem.penalty_mode == "al":
            s = max(0.0, (2.0 * mu * c_j - lambdas[j]) / (2.0 * mu + damping))
        else:
            s = max(0.0, -c_j)
        x[n * dof + j] = s
    return float(0.5 * x @ H @ x + g @ x)

"""Per-vehicle edge stack: kinematics, belief, messaging, links and micro-decisions.

Most helpers accept numpy arrays as well as scalars so the simulator can
apply them to a whole fleet at once.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from ._validation import as_generator, check_matrix, check_vector, normalize
from .anneal import TemperatureState, update_temperature
from .exceptions import EmptyPathSet, InvalidCodingGain, InvalidWeights, SingularCovariance
from .qstate import collapse, entangle_neighbors, should_collapse

PSI_FLOOR = 1e-12


@dataclass(frozen=True)
class MicroAction:
    accel: float = 0.0
    lane_change: int = 0

    def __post_init__(self):
        if self.lane_change not in (-1, 0, 1):
            raise ValueError("lane_change must be -1, 0 or +1")


@dataclass(frozen=True)
class LinkMetrics:
    snr_db: float
    distance_m: float
    payload_bits: float = 256 * 8
    phy_rate_bps: float = 6e6
    neighbor_queue: float = 0.0
    neighbor_service_rate: float = 1.0


@dataclass
class VehicleState:
    """Kinematic state ``x = (px, py, vx, vy)`` plus the per-vehicle ledgers."""

    x: np.ndarray
    belief_mean: np.ndarray = None
    belief_cov: np.ndarray = None
    queue_q: float = 0.0
    energy_e: float = 0.0
    psi: np.ndarray = None
    temperature: TemperatureState = field(default_factory=TemperatureState)
    consensus_xi: np.ndarray = None
    cost_prev: float = None
    cost_history: tuple = ()
    d_safe: float = 5.0
    psi_eta: float = 0.5

    def __post_init__(self):
        self.x = check_vector(self.x, "x")
        n = self.x.size
        self.belief_mean = self.x.copy() if self.belief_mean is None else check_vector(self.belief_mean, "belief_mean")
        self.belief_cov = np.eye(n) if self.belief_cov is None else check_matrix(self.belief_cov, "belief_cov")
        if self.queue_q < 0 or self.energy_e < 0:
            raise ValueError("queue and energy ledgers must be nonnegative")
        self.psi = np.ones(1) if self.psi is None else normalize(self.psi, "psi")
        self.consensus_xi = np.zeros(1) if self.consensus_xi is None else check_vector(self.consensus_xi, "consensus_xi")


@dataclass
class VehicleConfig:
    dt: float = 0.1
    u_max: float = 3.0
    d_safe: float = 5.0
    kappa: float = 1.0
    cvar_alpha: float = 0.95
    n_samples: int = 64
    n_actions: int = 7
    v_ref: float = 10.0
    gamma_th_db: float = 5.0
    d_max_m: float = 400.0
    deadline_s: float = 0.08
    gamma0_db: float = 5.0
    steepness: float = 1.0
    coding_gain: float = 0.98
    psi_eta: float = 0.5
    collapse_threshold: float = 0.5
    coupling: float = -0.3
    offload_delta: float = 0.0
    bandwidth_hz: float = 10e6
    chi_drive: float = 1e-3
    chi_comm: float = 1e-9
    priority_alphas: tuple = (0.5, 0.3, 0.2)
    consensus_eta: float = 0.1
    rho_min: float = 0.5
    lyap_lambda: float = 0.01
    lyap_chi: float = 1.0
    w_max: float = 0.0
    obs_noise: float = 0.0
    obs_var: float = 1.0
    speed_noise: float = 0.5
    kkt_step: float = 0.5
    cvar: bool = True


def kinematic_matrices(dt, heading=0.0):
    """Euler double integrator in the plane; acceleration acts along ``heading``."""
    Phi = np.eye(4)
    Phi[0, 2] = Phi[1, 3] = dt
    Gamma = np.array([[0.0], [0.0], [dt * math.cos(heading)], [dt * math.sin(heading)]])
    return Phi, Gamma


def propagate_state(s, control, messages=(), noise_seed=None, Phi=None, Gamma=None, B=None, w_max=0.0, H=None, obs_noise=0.0, dt=0.1):
    """Advance ``x' = Phi x + Gamma u + sum B m + w`` and emit ``y = H x' + n``.

    Noise is uniform in ``[-w_max, w_max]`` (and ``[-obs_noise, obs_noise]``
    for the observation). Returns ``(new_state, y)``.
    """
    x = s.x
    n = x.size
    if Phi is None or Gamma is None:
        heading = math.atan2(x[3], x[2]) if n == 4 else 0.0
        Phi0, Gamma0 = kinematic_matrices(dt, heading) if n == 4 else (np.eye(n), np.zeros((n, 1)))
        Phi = Phi0 if Phi is None else Phi
        Gamma = Gamma0 if Gamma is None else Gamma
    Phi = np.asarray(Phi, dtype=float)
    Gamma = np.asarray(Gamma, dtype=float).reshape(n, -1)
    accel = control.accel if isinstance(control, MicroAction) else control
    u = np.atleast_1d(np.asarray(accel, dtype=float))
    x_new = Phi @ x + Gamma @ u
    for m in messages:
        Bm = np.zeros((n, len(m))) if B is None else np.asarray(B, dtype=float)
        x_new = x_new + Bm @ np.asarray(m, dtype=float)
    rng = as_generator(0 if noise_seed is None else noise_seed)
    if w_max > 0:
        x_new = x_new + rng.uniform(-w_max, w_max, size=n)
    H = np.eye(n) if H is None else np.asarray(H, dtype=float)
    y = H @ x_new
    if obs_noise > 0:
        y = y + rng.uniform(-obs_noise, obs_noise, size=y.size)
    return replace(s, x=x_new), y


def predict_belief(s, Phi, Gamma, u, Q):
    mean = Phi @ s.belief_mean + (np.asarray(Gamma) @ np.atleast_1d(u))
    cov = Phi @ s.belief_cov @ Phi.T + Q
    return replace(s, belief_mean=mean, belief_cov=0.5 * (cov + cov.T))


def update_belief(s, y, H=None, R=None):
    """Kalman measurement update (Joseph form, so the covariance stays PSD)."""
    mean = s.belief_mean
    P = s.belief_cov
    y = np.atleast_1d(np.asarray(y, dtype=float))
    H = np.eye(mean.size) if H is None else np.atleast_2d(np.asarray(H, dtype=float))
    R = np.eye(y.size) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    S = H @ P @ H.T + R
    if np.linalg.cond(S) > 1e14:
        raise SingularCovariance("innovation covariance is singular")
    K = np.linalg.solve(S, H @ P).T
    mean_new = mean + K @ (y - H @ mean)
    A = np.eye(mean.size) - K @ H
    P_new = A @ P @ A.T + K @ R @ K.T
    return replace(s, belief_mean=mean_new, belief_cov=0.5 * (P_new + P_new.T))


def make_message(s, mask=None, cap=None, S=None):
    """Compressed, masked copy of the belief mean with at most ``cap`` nonzeros."""
    xhat = s.belief_mean if isinstance(s, VehicleState) else check_vector(s, "xhat")
    m = xhat.copy() if S is None else np.asarray(S, dtype=float) @ xhat
    if mask is not None:
        keep = np.zeros(m.size, dtype=bool)
        keep[list(mask)] = True
        m = np.where(keep, m, 0.0)
    if cap is None:
        return m
    if cap < 0:
        raise ValueError("cap must be >= 0")
    nz = np.flatnonzero(m)
    if nz.size > cap:
        order = np.argsort(-np.abs(m), kind="stable")
        out = np.zeros_like(m)
        top = order[:cap]
        out[top] = m[top]
        m = out
    return m


def link_latency(payload_bits, phy_rate_bps, neighbor_queue=0.0, neighbor_service_rate=1.0):
    return payload_bits / phy_rate_bps + neighbor_queue / neighbor_service_rate


def link_probability(snr_db, distance_m, gamma_th_db, d_max_m, kappa=1.0):
    return expit(kappa * (snr_db - gamma_th_db)) * expit(kappa * (d_max_m - distance_m))


def link_admissible(m, gamma_th_db, d_max_m, deadline_s):
    latency = link_latency(m.payload_bits, m.phy_rate_bps, m.neighbor_queue, m.neighbor_service_rate)
    ok = m.snr_db >= gamma_th_db and m.distance_m <= d_max_m and latency <= deadline_s
    return bool(ok), float(latency), float(link_probability(m.snr_db, m.distance_m, gamma_th_db, d_max_m))


def packet_success(snr_db, gamma0_db, steepness, coding_gain):
    if not 0 < coding_gain <= 1:
        raise InvalidCodingGain(f"coding gain must lie in (0, 1], got {coding_gain}")
    return coding_gain * expit(steepness * (np.asarray(snr_db, dtype=float) - gamma0_db))


def update_queue(q, service_mu, arrivals):
    return np.maximum(0.0, q - service_mu) + arrivals


def select_phy_profile(rates_per_profile):
    """Profile with the highest achievable rate, or ``(None, 0.0)`` if none."""
    rates = check_vector(rates_per_profile, "rates_per_profile")
    if np.any(rates < 0):
        raise ValueError("rates must be nonnegative")
    k = int(np.argmax(rates))
    if rates[k] <= 0:
        return None, 0.0
    return k, float(rates[k])


def cvar(samples, alpha, axis=-1):
    """Mean of the ``ceil((1 - alpha) n)`` largest samples along ``axis``."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[axis]
    m = max(1, math.ceil((1.0 - alpha) * n - 1e-9))
    part = np.partition(x, n - m, axis=axis)
    tail = np.take(part, np.arange(n - m, n), axis=axis)
    return tail.mean(axis=axis)


def cvar_policy(actions, cost_sampler, alpha, n_samples, seed):
    """Action with the smallest CVaR of sampled costs (lowest index on ties).

    ``cost_sampler(action, rng, n)`` returns ``n`` sampled costs.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if n_samples < 1.0 / (1.0 - alpha) - 1e-9:
        raise ValueError("n_samples must be at least 1/(1-alpha)")
    rng = as_generator(seed)
    scores = [float(cvar(np.asarray(cost_sampler(a, rng, n_samples), dtype=float), alpha)) for a in actions]
    return actions[int(np.argmin(scores))]


def cbf_accel_bound(gap_m, rel_speed, kappa, d_safe, dt):
    """Largest acceleration keeping ``h_dot + kappa h >= 0``."""
    h = gap_m - d_safe
    return (kappa * h - rel_speed) / dt


def safety_filter(action, gap_m, rel_speed, kappa, u_max, d_safe=5.0, dt=0.1):
    """Clip acceleration to the barrier bound and the actuation limits.

    The barrier is ``h = gap - d_safe`` with ``h_dot = -rel_speed - accel dt``,
    where ``rel_speed`` is the closing speed toward the leader.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    accel = action.accel if isinstance(action, MicroAction) else float(action)
    bound = cbf_accel_bound(gap_m, rel_speed, kappa, d_safe, dt)
    a = min(accel, u_max, bound)
    a = max(a, -u_max)
    if isinstance(action, MicroAction):
        return replace(action, accel=float(a))
    return float(a)


def kkt_residual(surrogate_grad, constraint_value, multiplier, constraint_grad=1.0):
    """Sum of stationarity, slackness, dual and primal feasibility violations."""
    if multiplier < 0:
        raise ValueError("multiplier must be >= 0")
    gJ = np.atleast_1d(np.asarray(surrogate_grad, dtype=float))
    gg = np.broadcast_to(np.asarray(constraint_grad, dtype=float), gJ.shape)
    lam = float(multiplier)
    g = float(constraint_value)
    return float(np.linalg.norm(gJ + lam * gg) + abs(lam * g) + max(0.0, -lam) + max(0.0, g))


def update_energy_ledger(e, action, tx_rates, chi_drive, chi_comm):
    if chi_drive < 0 or chi_comm < 0:
        raise ValueError("energy coefficients must be nonnegative")
    accel = action.accel if isinstance(action, MicroAction) else action
    u = np.atleast_1d(np.asarray(accel, dtype=float))
    return e + chi_drive * float(u @ u) + chi_comm * float(np.sum(tx_rates))


def multiplicative_psi_update(psi, grad, eta):
    if eta <= 0:
        raise ValueError("eta must be positive")
    psi = np.maximum(np.asarray(psi, dtype=float), PSI_FLOOR)
    return normalize(np.exp(-eta * np.asarray(grad, dtype=float)) * psi, "updated psi")


def offload_decide(l_local, l_upl, l_proc, l_down, delta):
    fog = l_upl + l_proc + l_down
    flag = int(l_local - fog >= delta)
    return flag, float(fog if flag else l_local)


def shannon_rate(alpha_share, bandwidth_hz, sinr_linear):
    return alpha_share * bandwidth_hz * np.log2(1.0 + np.asarray(sinr_linear, dtype=float))


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def priority_weight(safety, fault_risk, staleness, alphas=(0.5, 0.3, 0.2)):
    a_s, a_f, a_st = alphas
    return a_s * safety + a_f * fault_risk + a_st * staleness


def normalize_priorities(weights):
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        return np.full(w.size, 1.0 / w.size)
    return w / total


def metropolis_weights(adjacency):
    """Metropolis weights ``1/(1 + max(deg_i, deg_j))`` with the diagonal as remainder."""
    A = np.asarray(adjacency, dtype=bool)
    A = A & ~np.eye(A.shape[0], dtype=bool)
    if not np.array_equal(A, A.T):
        raise InvalidWeights("adjacency must be symmetric")
    deg = A.sum(axis=1)
    W = np.where(A, 1.0 / (1.0 + np.maximum(deg[:, None], deg[None, :])), 0.0)
    W[np.diag_indices_from(W)] = 1.0 - W.sum(axis=1)
    return W


def check_consensus_weights(W, atol=1e-12):
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise InvalidWeights("weights must be a square matrix")
    if np.any(W < -atol) or not np.allclose(W, W.T, atol=atol):
        raise InvalidWeights("weights must be symmetric and nonnegative")
    off = W.sum(axis=1) - np.diag(W)
    if np.any(off > 1 + atol):
        raise InvalidWeights("off-diagonal row sums must not exceed one")
    return W


def consensus_step(states, weights, innovations=None, eta=0.0):
    """``xi_i + sum_j w_ij (xi_j - xi_i) + eta_i * innovation_i`` for every node.

    ``innovations`` are the differences between each node's local estimate and
    its current state; ``None`` means zero innovation.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    if X.shape[0] == 1 and np.ndim(states) == 1:
        X = X.T
    W = check_consensus_weights(weights)
    if W.shape[0] != X.shape[0]:
        raise InvalidWeights("weight matrix does not match the number of states")
    off = W - np.diag(np.diag(W))
    out = X + off @ X - off.sum(axis=1)[:, None] * X
    if innovations is not None:
        eta = np.broadcast_to(np.asarray(eta, dtype=float), (X.shape[0],))
        out = out + eta[:, None] * np.asarray(innovations, dtype=float).reshape(X.shape)
    return out


def disagreement(states):
    X = np.atleast_2d(np.asarray(states, dtype=float))
    return float(np.sum((X - X.mean(axis=0)) ** 2))


def contraction_factor(W):
    """Per-step contraction of the squared disagreement: the largest squared
    eigenvalue magnitude of the consensus operator off the consensus direction."""
    W = check_consensus_weights(W)
    off = W - np.diag(np.diag(W))
    M = np.eye(W.shape[0]) + off - np.diag(off.sum(axis=1))
    n = W.shape[0]
    J = np.full((n, n), 1.0 / n)
    return float(np.linalg.norm(M - J, 2) ** 2)


def robust_path_floor(link_probs_per_path, rho_min):
    paths = list(link_probs_per_path)
    if not paths:
        raise EmptyPathSet("no candidate paths")
    rho = min(float(np.prod(np.asarray(p, dtype=float))) for p in paths)
    return rho, rho >= rho_min


def lyapunov_check(V_next, V_prev, x_norm_sq, w_norm_sq, lambda_margin, chi):
    return bool(V_next - V_prev <= -lambda_margin * x_norm_sq + chi * w_norm_sq + 1e-12)


@dataclass
class VehicleInputs:
    """Environment snapshot seen by one vehicle during a tick.

    ``links`` are the candidate links the selector ``psi`` ranges over;
    ``neighbor_psis`` are neighbours' selectors over the same links.
    """

    links: list = field(default_factory=list)
    neighbor_psis: list = field(default_factory=list)
    neighbor_messages: list = field(default_factory=list)
    neighbor_xis: list = field(default_factory=list)
    consensus_weights: list = field(default_factory=list)
    innovation: np.ndarray = None
    gap_m: float = 1e3
    rel_speed: float = 0.0
    arrivals: float = 0.0
    service_mu: float = 0.0
    phy_rates: tuple = (6e6,)
    l_local: float = 0.0
    l_upl: float = 0.0
    l_proc: float = 0.0
    l_down: float = 0.0
    bandwidth_share: float = 1.0
    staleness: float = 0.0
    noise_seed: int = 0
    force_lyapunov_violation: bool = False


def _link_costs(links, cfg):
    lat = np.array([link_latency(m.payload_bits, m.phy_rate_bps, m.neighbor_queue, m.neighbor_service_rate) for m in links])
    prob = np.array([link_probability(m.snr_db, m.distance_m, cfg.gamma_th_db, cfg.d_max_m) for m in links])
    adm = np.array([link_admissible(m, cfg.gamma_th_db, cfg.d_max_m, cfg.deadline_s)[0] for m in links])
    return lat, prob, adm


def step_vehicle(s, env, cfg=None):
    """One tick of the vehicle pipeline; returns ``(new_state, outputs)``."""
    cfg = VehicleConfig() if cfg is None else cfg
    rng = as_generator(env.noise_seed)
    out = {}
    dt = cfg.dt
    n = s.x.size
    speed = float(np.hypot(s.x[2], s.x[3])) if n == 4 else float(s.x[-1])
    heading = math.atan2(s.x[3], s.x[2]) if n == 4 else 0.0
    Phi, Gamma = kinematic_matrices(dt, heading) if n == 4 else (np.eye(n), np.zeros((n, 1)))

    # Sense, predict and update the belief from the previous tick's state.
    y = s.x + (rng.uniform(-cfg.obs_noise, cfg.obs_noise, n) if cfg.obs_noise > 0 else 0.0)
    s = predict_belief(s, Phi, Gamma, 0.0, np.eye(n) * cfg.w_max**2 / 3.0)
    s = update_belief(s, y, R=np.eye(n) * cfg.obs_var)

    message = make_message(s, cap=n)
    out["message"] = message

    # Admissibility-gated transmission.
    K = len(env.links)
    psi = s.psi
    chosen = None
    if K:
        lat, prob, adm = _link_costs(env.links, cfg)
        theta = psi**2 if psi.size == K else np.full(K, 1.0 / K)
        theta = np.where(adm, theta, 0.0)
        if theta.sum() > 0:
            theta = theta / theta.sum()
            chosen = int(np.argmax(theta))
            out["transmitted"] = True
        else:
            chosen = int(np.argmax(prob))
            out["transmitted"] = False
        out["deferred"] = not out["transmitted"]
        out["link"] = chosen
        out["link_prob"] = float(prob[chosen])
        out["theta"] = theta
    else:
        out.update(transmitted=False, deferred=False, link=None, link_prob=1.0, theta=np.ones(1))

    q_new = float(update_queue(s.queue_q, env.service_mu, env.arrivals))
    profile, rate = select_phy_profile(env.phy_rates)
    out["profile"] = profile

    # Risk-aware micro-action over an acceleration grid, then the safety filter.
    grid = np.linspace(-cfg.u_max, cfg.u_max, cfg.n_actions)
    actions = [MicroAction(float(a)) for a in grid]

    def sampler(action, g, m):
        leader = g.normal(0.0, cfg.speed_noise, m)
        v_next = speed + action.accel * dt
        gap_next = env.gap_m - (env.rel_speed + leader + action.accel * dt) * dt
        return (v_next - cfg.v_ref) ** 2 + 10.0 * np.maximum(0.0, s.d_safe - gap_next) ** 2

    if cfg.cvar:
        action = cvar_policy(actions, sampler, cfg.cvar_alpha, cfg.n_samples, rng)
    else:
        means = [float(np.mean(sampler(a, rng, cfg.n_samples))) for a in actions]
        action = actions[int(np.argmin(means))]
    action = safety_filter(action, env.gap_m, env.rel_speed, cfg.kappa, cfg.u_max, s.d_safe, dt)

    # One projected-gradient refinement on the tracking surrogate.
    bound = cbf_accel_bound(env.gap_m, env.rel_speed, cfg.kappa, s.d_safe, dt)
    a = action.accel
    grad_J = 2.0 * dt * (speed + a * dt - cfg.v_ref)
    upper = max(min(cfg.u_max, bound), -cfg.u_max)
    a = float(np.clip(a - cfg.kkt_step * grad_J, -cfg.u_max, upper))
    grad_J = 2.0 * dt * (speed + a * dt - cfg.v_ref)
    g_val = a - bound
    lam = max(0.0, -grad_J) if a >= upper and upper == min(cfg.u_max, bound) else 0.0
    out["kkt_residual"] = kkt_residual(grad_J, g_val, lam)
    action = replace(action, accel=a)

    rates = [rate] if out["transmitted"] else []
    e_new = update_energy_ledger(s.energy_e, action, rates, cfg.chi_drive, cfg.chi_comm)

    u = float(np.clip(action.accel, -cfg.u_max, cfg.u_max))
    out["control"] = u
    s_next, _ = propagate_state(s, u, (), rng, Phi, Gamma, w_max=cfg.w_max)
    w = s_next.x - (Phi @ s.x + Gamma @ np.atleast_1d(u))

    # Selector update, neighbour influence and the collapse trigger.
    collapsed = False
    temperature = s.temperature
    cost = None
    history = s.cost_history
    if K and psi.size == K:
        c = lat / cfg.deadline_s + (1.0 - prob)
        cost = float(np.dot(psi**2, c))
        psi = multiplicative_psi_update(psi, 2.0 * c * psi, s.psi_eta)
        if env.neighbor_psis:
            psi = entangle_neighbors(psi, env.neighbor_psis, [cfg.coupling] * len(env.neighbor_psis))
        history = (history + (cost,))[-temperature.history_window :]
        if s.cost_prev is not None and should_collapse(cost, s.cost_prev, cfg.collapse_threshold):
            psi, _ = collapse(psi)
            collapsed = True
            temperature = update_temperature(temperature, np.array(history), "vehicle")
    out["collapsed"] = collapsed
    out["cost"] = cost

    l_total = offload_decide(env.l_local, env.l_upl, env.l_proc, env.l_down, cfg.offload_delta)
    out["offload"], out["latency"] = l_total
    if chosen is not None:
        sinr = db_to_linear(env.links[chosen].snr_db)
        out["rate"] = float(shannon_rate(env.bandwidth_share, cfg.bandwidth_hz, sinr))
        out["p_success"] = float(packet_success(env.links[chosen].snr_db, cfg.gamma0_db, cfg.steepness, cfg.coding_gain))
    else:
        out["rate"] = 0.0
        out["p_success"] = 0.0

    h = env.gap_m - s.d_safe
    urgency = float(np.clip(1.0 - h / max(s.d_safe, 1e-9), 0.0, 1.0))
    out["priority"] = priority_weight(urgency, 1.0 - out["link_prob"], env.staleness, cfg.priority_alphas)

    xi = s.consensus_xi
    if env.neighbor_xis:
        X = np.vstack([xi] + [np.asarray(v, dtype=float) for v in env.neighbor_xis])
        wts = np.asarray(env.consensus_weights, dtype=float)
        before = float(np.sum((X[1:] - xi) ** 2 * wts[:, None]))
        xi = xi + (wts[:, None] * (X[1:] - xi)).sum(axis=0)
        after = float(np.sum((X[1:] - xi) ** 2 * wts[:, None]))
        out["contracting"] = after <= before + 1e-12
    else:
        out["contracting"] = True
    if env.innovation is not None:
        xi = xi + cfg.consensus_eta * (np.asarray(env.innovation, dtype=float) - s.consensus_xi)

    out["path_floor"], out["path_ok"] = robust_path_floor([[out["link_prob"]]], cfg.rho_min)

    V_prev = (speed - cfg.v_ref) ** 2
    speed_next = float(np.hypot(s_next.x[2], s_next.x[3])) if n == 4 else float(s_next.x[-1])
    V_next = (speed_next - cfg.v_ref) ** 2
    if env.force_lyapunov_violation:
        V_next = V_prev + 1.0 + cfg.lyap_chi * float(w @ w)
    ok = lyapunov_check(V_next, V_prev, 0.0 if V_prev == 0 else V_prev, float(w @ w), cfg.lyap_lambda, cfg.lyap_chi)
    out["lyapunov_ok"] = ok
    d_safe = s.d_safe if ok else s.d_safe * 1.1
    psi_eta = s.psi_eta if ok else s.psi_eta * 0.5

    new_state = replace(
        s_next,
        queue_q=q_new,
        energy_e=e_new,
        psi=psi,
        temperature=temperature,
        consensus_xi=xi,
        cost_prev=cost if cost is not None else s.cost_prev,
        cost_history=history,
        d_safe=d_safe,
        psi_eta=psi_eta,
    )
    return new_state, out

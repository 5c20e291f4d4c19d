"""Tick-driven co-simulation of vehicles, RSUs, fog nodes and the cloud.

Time advances in network ticks of ``net_dt_s``. Mobility moves every
``traffic_dt_s``, vehicles revise their link choice every
``decision_ticks`` network ticks and the cloud re-plans every
``coordination_s`` seconds.

Queues are fluid: each RSU and fog node sees the batch of packets that
reaches it in a tick, and a packet's sojourn is the backlog ahead of it
plus a processor-sharing service time ``base / (1 - load)``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .._validation import stream
from . import _kernels as K
from ..anneal import smoothed_temperature
from ..cloud import CloudConfig, CloudState, CoordinationContext, coordinate
from ..fog import backlog_step, privatize
from ..vehicle import cvar, packet_success
from .world import (
    STREAM_CHANNEL,
    STREAM_CLOUD,
    STREAM_DECISION,
    STREAM_INCIDENT,
    STREAM_LINK,
    STREAM_PLANS,
    STREAM_TRIPS,
    build_world,
)

# Radio: (bandwidth Hz, admission SNR threshold dB) per profile.
PROFILE_11P = (10e6, 5.0)
PROFILE_NR = (20e6, 3.0)
SNR_REF_DB = 32.0
REF_DISTANCE_M = 50.0
PATHLOSS_EXP = 2.7
SHADOW_SIGMA_DB = 4.0
# Shadowing spread grows with range: sigma * (SHADOW_NEAR + d / D_MAX).
SHADOW_NEAR = 0.5
SHADOW_TAU_S = 1.0
D_MAX_M = 500.0
SUCCESS_STEEPNESS = 0.8
CODING_GAIN = 0.995
MAX_ATTEMPTS = 4
BACKOFF_S = (0.0, 0.004, 0.012, 0.028)
MIN_RATE_BPS = 1e6
MAX_AGE_S = 1.0

# Queues.
RSU_BASE_S = 5e-3
FOG_BASE_S = 10e-3
# Extra fog service time per unit of context-memory overflow (cache thrashing).
THRASH_GAIN = 20.0
LOAD_CAP = 0.95
FORBIDDEN_LOAD = 0.95

# Vehicle micro-policy.
N_SAMPLES = 16
CVAR_ALPHA = 0.9
ENTANGLE_COUPLING = -0.6
NEIGHBOR_RANGE_M = 300.0
PSI_ETA = 0.5
POLICY_TAU = 0.1
VEHICLE_T0 = 1.0
VEHICLE_BETA = 0.9
HISTORY = 16
# Stratified standard-normal scenarios for the SNR drift over one decision period.
SNR_SCENARIOS = ndtri((np.arange(N_SAMPLES) + 0.5) / N_SAMPLES)
# Exponential queueing-delay multipliers, paired so a low SNR meets a long wait.
WAIT_SCENARIOS = -np.log((np.arange(N_SAMPLES) + 0.5) / N_SAMPLES)

# Traffic.
BPR_SLOPE = 0.8
MIN_SPEED_MPS = 2.0
CONGESTED = 0.85
INCIDENT_FACTOR = 0.3
INCIDENT_S = 120.0


@dataclass
class MetricsReport:
    """Run-level metrics plus per-tick series.

    ``mean_latency_ms`` and ``att_min`` are ``None`` when nothing was
    delivered or no trip finished. Series hold NaN for ticks without data.
    """

    scenario: str
    variant: str
    seed: int
    mean_latency_ms: float
    pdr_pct: float
    reliability_pct: float
    att_min: float
    nci_pct: float
    packets_sent: int
    packets_delivered: int
    packets_dropped: int
    packets_in_flight: int
    trips_completed: int
    series: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    SUMMARY_FIELDS = (
        "scenario", "variant", "seed", "mean_latency_ms", "pdr_pct", "reliability_pct", "att_min", "nci_pct",
        "packets_sent", "packets_delivered", "packets_dropped", "packets_in_flight", "trips_completed",
    )

    @property
    def conserved(self):
        return self.packets_delivered + self.packets_dropped + self.packets_in_flight == self.packets_sent

    def summary(self):
        return {k: getattr(self, k) for k in self.SUMMARY_FIELDS}


class SimContext(CoordinationContext):
    """Coordinator view of the fog tier for one coordination round."""

    def __init__(self, plan_shares, transport_cost, capacity, memory, backlog, load_pps, interval_s, energy_per_pkt, noise=0.05):
        super().__init__(plan_shares, {}, transport_cost)
        self.capacity = capacity
        self.memory = memory
        self.overflow = (plan_shares / memory[None, :]).max(axis=1) - 1.0
        self.backlog = backlog
        self.load_pps = load_pps
        self.interval_s = interval_s
        self.energy_per_pkt = energy_per_pkt
        self.noise = noise
        self.rho = plan_shares * load_pps / capacity[None, :]
        V_now = float(np.sum((backlog / capacity) ** 2))
        self.V_prev = V_now
        self.x_norm_sq = V_now

    def objective_costs(self, forecast):
        rho = np.minimum(self.rho, 0.99)
        wait = self.backlog / self.capacity + FOG_BASE_S / (1.0 - rho)
        backhaul = self.transport_cost @ forecast
        latency = (self.plan_shares * (wait + backhaul[None, :])).sum(axis=1)
        unserved = np.maximum(self.plan_shares * self.load_pps - self.capacity, 0.0).sum(axis=1)
        return {
            "L": 1e3 * latency,
            "R": self.rho.max(axis=1),
            "E": self.plan_shares @ self.energy_per_pkt,
            "Th": unserved / max(self.load_pps, 1e-9),
        }

    def infeasible(self, forecast):
        return np.flatnonzero((self.rho.max(axis=1) >= FORBIDDEN_LOAD) | (self.overflow > 0)).tolist()

    def violations(self, forecast):
        return np.maximum(np.maximum(self.rho.max(axis=1) - FORBIDDEN_LOAD, self.overflow), 0.0)

    def constraint_samples(self, k, rng):
        z = rng.standard_normal((8, self.capacity.size))
        load = (self.rho[k][None, :] * (1.0 + self.noise * z)).max(axis=1) - FORBIDDEN_LOAD
        return np.maximum(load, self.overflow[k])

    def lyapunov(self, k, rng):
        z = rng.standard_normal((8, self.capacity.size))
        arrivals = self.plan_shares[k] * self.load_pps * (1.0 + self.noise * z)
        q = np.maximum(self.backlog + (arrivals - self.capacity) * self.interval_s, 0.0)
        return ((q / self.capacity) ** 2).sum(axis=1), self.V_prev, self.x_norm_sq


def candidate_plans(world, n_plans, seed):
    """Fog load-share plans: capacity-proportional, uniform, then Dirichlet draws."""
    F = world.fog_capacity.size
    rng = stream(seed, STREAM_PLANS)
    cap = world.fog_capacity / world.fog_capacity.sum()
    plans = [cap, np.full(F, 1.0 / F)]
    if n_plans > 2:
        plans.extend(rng.dirichlet(np.full(F, 4.0), size=n_plans - 2))
    return np.array(plans[:n_plans])


def _cloud_config(cfg):
    return CloudConfig(
        n_plans=cfg.n_plans,
        weights=dict(cfg.weights),
        beta=cfg.beta,
        epsilon=cfg.epsilon,
        risk_delta=cfg.risk_delta,
        qio_eta=cfg.eta,
        fixed_temperature=cfg.variant == "fixed_temp",
        project=cfg.variant != "no_proj",
        transport="greedy" if cfg.variant == "greedy_assign" else "sinkhorn",
    )


class _Mobility:
    """Vehicles on directed grid edges, moving at a BPR-like speed."""

    def __init__(self, world, cfg):
        self.w = world
        self.cfg = cfg
        self.rng = stream(cfg.seed, STREAM_TRIPS)
        self.inc_rng = stream(cfg.seed, STREAM_INCIDENT)
        N = int(cfg.vehicles)
        self.N = N
        E = world.n_edges
        closed = {tuple(e) for e in cfg.closures}
        self.open = np.array([tuple(e) not in closed for e in world.edges.tolist()], dtype=bool) if E else np.zeros(0, bool)
        self.incident_until = np.zeros(E)
        self.node = world.vehicle_origin.astype(np.int64).copy()
        self.edge = -np.ones(N, dtype=np.int64)
        self.s = np.zeros(N)
        self.dest = self.node.copy()
        self.trip_start = np.zeros(N)
        self.trip_times = []
        self.movable = E > 0 and world.n_nodes > 1
        if self.movable:
            for i in range(N):
                self._new_trip(i, self.node[i], 0.0)

    def _new_trip(self, i, node, now):
        w = self.w
        for _ in range(32):
            dest = int(self.rng.integers(w.n_nodes))
            if dest != node and w.next_hop[node, dest] >= 0:
                self.dest[i] = dest
                self.edge[i] = w.edge_index[node, w.next_hop[node, dest]]
                self.s[i] = 0.0
                self.trip_start[i] = now
                return
        self.edge[i] = -1

    def capacity(self, now):
        cap = self.w.edge_capacity.copy()
        cap[self.incident_until > now] *= INCIDENT_FACTOR
        return cap

    def counts(self):
        on = self.edge >= 0
        return np.bincount(self.edge[on], minlength=self.w.n_edges).astype(float)

    def step(self, now, dt):
        w = self.w
        if self.cfg.incident_rate > 0 and w.n_edges:
            n_new = self.inc_rng.poisson(self.cfg.incident_rate * dt / 60.0)
            for e in self.inc_rng.integers(0, w.n_edges, n_new):
                self.incident_until[e] = now + INCIDENT_S
        if not self.movable or self.N == 0:
            return
        cap = self.capacity(now)
        ratio = self.counts() / cap
        speed = np.maximum(w.edge_free_speed * (1.0 - BPR_SLOPE * np.minimum(ratio, 1.0)), MIN_SPEED_MPS)
        moving = self.edge >= 0
        self.s[moving] += speed[self.edge[moving]] * dt
        end = now + dt
        for i in np.flatnonzero(moving & (self.s >= w.edge_length[np.maximum(self.edge, 0)])):
            while self.edge[i] >= 0 and self.s[i] >= w.edge_length[self.edge[i]]:
                self.s[i] -= w.edge_length[self.edge[i]]
                node = int(w.edges[self.edge[i], 1])
                if node == self.dest[i]:
                    self.trip_times.append(end - self.trip_start[i])
                    self._new_trip(i, node, end)
                    break
                self.edge[i] = w.edge_index[node, w.next_hop[node, self.dest[i]]]

    def positions(self):
        w = self.w
        xy = w.node_xy[self.node].copy() if self.N else np.zeros((0, 2))
        on = self.edge >= 0
        if on.any():
            e = self.edge[on]
            tail = w.node_xy[w.edges[e, 0]]
            head = w.node_xy[w.edges[e, 1]]
            frac = np.minimum(self.s[on] / w.edge_length[e], 1.0)[:, None]
            xy[on] = tail + frac * (head - tail)
        return xy

    def nci(self, now):
        if not self.open.any():
            return 0.0
        ratio = self.counts() / self.capacity(now)
        return 100.0 * float(np.mean(ratio[self.open] >= CONGESTED))


def shadow_sigma(dist):
    """Shadowing standard deviation in dB for every vehicle/RSU distance."""
    return SHADOW_SIGMA_DB * (SHADOW_NEAR + np.minimum(dist, D_MAX_M) / D_MAX_M)


def vehicle_decision(variant, snr, sig, in_range, adm, xy, psi, temp, cost_hist, hist_n, gamma_th, base, budget, dt, z, pick_u):
    """Revise every vehicle's RSU choice; returns ``(choice, psi, temp)``.

    Reference implementation built from the vehicle-layer primitives; the
    run loop uses a compiled twin with identical semantics.
    """
    N, R = snr.shape
    snr_s = snr[:, :, None] + sig[:, :, None] * z[None, None, :]
    p_ok = packet_success(snr_s, gamma_th[None, :, None], SUCCESS_STEEPNESS, CODING_GAIN)
    J = base[None, :, None] * WAIT_SCENARIOS[None, None, :] + (1.0 - p_ok) * BACKOFF_S[1] + dt * (snr_s < gamma_th[None, :, None])
    J /= budget
    score = J.mean(axis=2) if variant == "no_cvar" else cvar(J, CVAR_ALPHA, axis=2)
    score = np.where(in_range, score, 10.0)

    # Amplitude update, then neighbor entanglement.
    psi = np.maximum(psi, 1e-6) * np.exp(-PSI_ETA * score)
    psi /= np.linalg.norm(psi, axis=1, keepdims=True)
    if variant != "no_entangle":
        d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2)
        A = (d2 <= NEIGHBOR_RANGE_M**2).astype(float)
        np.fill_diagonal(A, 0.0)
        A /= np.maximum(A.sum(axis=1, keepdims=True), 1.0)
        psi = np.maximum(psi * np.exp(A @ np.log1p(ENTANGLE_COUPLING * psi)), 1e-12)
        psi /= np.linalg.norm(psi, axis=1, keepdims=True)
    theta = np.where(adm, psi * psi, 0.0)
    tsum = theta.sum(axis=1, keepdims=True)
    theta = theta / np.where(tsum > 0, tsum, 1.0)

    # Annealed soft-min over the risk scores, biased by link-use probabilities.
    if variant != "fixed_temp" and hist_n >= 2:
        temp = smoothed_temperature(temp, cost_hist[:, : min(hist_n, HISTORY)].var(axis=1), VEHICLE_BETA, "vehicle")
    final = np.where(adm, score - POLICY_TAU * np.log(np.maximum(theta, 1e-12)), np.inf)
    has = adm.any(axis=1)
    fmin = np.where(has, final.min(axis=1), 0.0)
    w = np.where(adm, np.exp(-(np.where(adm, final, fmin[:, None]) - fmin[:, None]) / temp[:, None]), 0.0)
    cdf = np.cumsum(w, axis=1)
    pick = np.minimum((cdf < (pick_u * cdf[:, -1])[:, None]).sum(axis=1), R - 1)
    return np.where(has, pick, -1), psi, temp


def run(world, cfg):
    """Simulate one scenario/variant/seed and return its MetricsReport."""
    cfg.check()
    dt = float(cfg.net_dt_s)
    n_ticks = int(round(cfg.duration_s / dt))
    traffic_every = max(1, int(round(cfg.traffic_dt_s / dt)))
    coord_every = max(1, int(round(cfg.coordination_s / dt)))
    decide_every = int(cfg.decision_ticks)
    max_age = max(1, int(round(MAX_AGE_S / dt)))
    budget = cfg.latency_budget_v2i_ms / 1e3
    duration = n_ticks * dt
    variant = cfg.variant

    N = int(cfg.vehicles)
    R = world.rsu_xy.shape[0]
    F = world.fog_capacity.size
    mob = _Mobility(world, cfg)

    bandwidth = np.where(world.rsu_nr, PROFILE_NR[0], PROFILE_11P[0]).astype(float)
    gamma_th = np.where(world.rsu_nr, PROFILE_NR[1], PROFILE_11P[1]).astype(float)
    rsu_mu = np.full(R, float(cfg.rsu_service_pps))
    fog_mu = world.fog_capacity.astype(float)
    energy_per_pkt = np.linspace(1.0, 1.3, F) if F else np.zeros(0)
    backoff = np.asarray(BACKOFF_S, dtype=float)

    ch_rng = stream(cfg.seed, STREAM_CHANNEL)
    link_rng = stream(cfg.seed, STREAM_LINK)
    a_shadow = math.exp(-dt / SHADOW_TAU_S)
    b_shadow = math.sqrt(1.0 - a_shadow**2)
    shadow = ch_rng.standard_normal((N, R))

    buffer = np.zeros((N, max_age), dtype=np.int64)
    choice = -np.ones(N, dtype=np.int64)
    psi = np.full((N, R), 1.0 / math.sqrt(R)) if R else np.zeros((N, 0))
    temp = np.full(N, VEHICLE_T0)
    cost_hist = np.zeros((N, HISTORY))
    hist_n = 0

    rsu_q = np.zeros(R)
    fog_q = np.zeros(F)
    rsu_wait = np.full(R, RSU_BASE_S)
    fog_wait = np.full(F, FOG_BASE_S)
    fog_base = np.full(F, FOG_BASE_S)
    route = np.zeros((R, F))
    if R and F:
        route[np.arange(R), world.rsu_fog] = 1.0
    backhaul_rf = np.ascontiguousarray(world.backhaul_s.T)
    plans = candidate_plans(world, int(cfg.n_plans), cfg.seed) if F else None
    ccfg = _cloud_config(cfg)
    cstate = CloudState(risk_delta=cfg.risk_delta)
    zone_acc = np.zeros(R)
    prev_shares = None
    n_coord = 0
    flagged = 0

    stats = np.zeros(K.N_STATS)
    s_lat = np.full(n_ticks, np.nan)
    s_pdr = np.full(n_ticks, np.nan)
    s_rel = np.full(n_ticks, np.nan)
    s_att = np.full(n_ticks, np.nan)
    s_nci = np.zeros(n_ticks)

    snr = np.zeros((N, R))
    adm = np.zeros((N, R), dtype=bool)
    xy = np.zeros((N, 2))
    dist = snr_mean = sig = None
    in_range = None
    gen_acc = 0.0
    nci_now = 0.0
    att_now = np.nan

    t = 0
    while t < n_ticks:
        now = t * dt
        if t % traffic_every == 0:
            if t > 0:
                mob.step(now - cfg.traffic_dt_s, cfg.traffic_dt_s)
            nci_now = mob.nci(now)
            att_now = float(np.mean(mob.trip_times)) / 60.0 if mob.trip_times else np.nan
            xy = mob.positions()
            dist = np.linalg.norm(xy[:, None, :] - world.rsu_xy[None, :, :], axis=2) if R else np.zeros((N, 0))
            snr_mean = SNR_REF_DB - 10.0 * PATHLOSS_EXP * np.log10(np.maximum(dist, 1.0) / REF_DISTANCE_M)
            sig = shadow_sigma(dist)
            in_range = (dist <= D_MAX_M) & world.rsu_up[None, :]
            if t == 0:
                snr = snr_mean + sig * shadow
                adm = in_range & ((snr >= gamma_th[None, :]) | (cfg.channel_success is not None))

        # Cloud coordination: pick a fog load plan and dispatch zones to fogs.
        if t % coord_every == 0 and R and F:
            interval = coord_every * dt
            if t == 0:
                load = max(N * cfg.beacon_hz, 1e-9)
                up = world.rsu_up.astype(float)
                shares = up / up.sum() if up.sum() else np.full(R, 1.0 / R)
            else:
                load = max(stats[K.SENT_ACC] / interval, 1e-9)
                shares = zone_acc / zone_acc.sum() if zone_acc.sum() > 0 else np.full(R, 1.0 / R)
            nu = np.maximum(shares, 1e-3)
            nu = nu / nu.sum()
            crng = stream(cfg.seed, STREAM_CLOUD, n_coord)
            summaries = [np.maximum(privatize(nu, 0.005, crng), 0.0) + 1e-9 for _ in range(F)]
            ctx = SimContext(plans, world.backhaul_s, fog_mu, world.fog_memory, fog_q, load, interval, energy_per_pkt)
            plan, coupling, cstate, rec = coordinate(cstate, summaries, ctx, ccfg, seed=crng, demand_shares=prev_shares)
            fog_base = FOG_BASE_S * (1.0 + THRASH_GAIN * np.maximum(plans[plan] / world.fog_memory - 1.0, 0.0))
            col = coupling.sum(axis=0)
            route = np.ascontiguousarray((coupling / np.where(col > 0, col, 1.0)[None, :]).T)
            flagged += int(rec.flagged)
            prev_shares = nu
            zone_acc[:] = 0.0
            stats[K.SENT_ACC] = 0.0
            n_coord += 1

        if t % decide_every == 0 and R and N:
            downstream = (route * (backhaul_rf + fog_wait[None, :])).sum(axis=1) if F else np.zeros(R)
            drng = stream(cfg.seed, STREAM_DECISION, t)
            pick_u = drng.random(N)
            choice, psi, temp = K.vehicle_decision(
                variant != "no_cvar", variant != "no_entangle", variant != "fixed_temp",
                snr, in_range, adm, xy, psi, temp, cost_hist, hist_n, gamma_th, rsu_wait + downstream, budget, dt,
                SNR_SCENARIOS, WAIT_SCENARIOS, pick_u, sig, SUCCESS_STEEPNESS, CODING_GAIN, BACKOFF_S[1], CVAR_ALPHA,
                PSI_ETA, ENTANGLE_COUPLING, NEIGHBOR_RANGE_M, VEHICLE_BETA, POLICY_TAU,
            )

        nxt = min(n_ticks, (t // traffic_every + 1) * traffic_every, (t // coord_every + 1) * coord_every,
                  (t // decide_every + 1) * decide_every)
        n = nxt - t
        gen = np.zeros(n, dtype=np.int64)
        for j in range(n):
            gen_acc += cfg.beacon_hz * dt
            gen[j] = int(math.floor(gen_acc + 1e-9))
            gen_acc -= gen[j]
        noise = ch_rng.standard_normal((n, N, R), dtype=np.float32)
        uni = link_rng.random((n, N, MAX_ATTEMPTS))
        hist_n = K.network_ticks(
            t, n, dt, duration, budget,
            noise, uni, gen, a_shadow, b_shadow,
            shadow, snr, adm, snr_mean, sig, in_range, dist, gamma_th, bandwidth,
            choice, buffer,
            rsu_q, fog_q, rsu_wait, fog_wait, route, backhaul_rf, rsu_mu, fog_mu,
            RSU_BASE_S, fog_base, LOAD_CAP, backoff, MIN_RATE_BPS, D_MAX_M, SUCCESS_STEEPNESS, CODING_GAIN,
            8.0 * cfg.payload_bytes, -1.0 if cfg.channel_success is None else float(cfg.channel_success),
            bool(cfg.infinite_rate),
            cost_hist, hist_n, zone_acc, stats, s_lat, s_pdr, s_rel,
        )
        s_att[t:nxt] = att_now
        s_nci[t:nxt] = nci_now
        t = nxt

    sent = int(stats[K.SENT])
    delivered = int(stats[K.DELIVERED])
    dropped = int(stats[K.DROPPED])
    in_flight = int(stats[K.IN_FLIGHT]) + int(buffer.sum())
    monitored = stats[K.MONITORED]
    nci_series = s_nci[::traffic_every]
    return MetricsReport(
        scenario=cfg.name,
        variant=variant,
        seed=int(cfg.seed),
        mean_latency_ms=float(1e3 * stats[K.LAT_SUM] / delivered) if delivered else None,
        pdr_pct=100.0 * delivered / (delivered + dropped) if delivered + dropped else 100.0,
        reliability_pct=float(100.0 * stats[K.MET] / monitored) if monitored else 100.0,
        att_min=float(np.mean(mob.trip_times)) / 60.0 if mob.trip_times else None,
        nci_pct=float(np.mean(nci_series)) if nci_series.size else 0.0,
        packets_sent=sent,
        packets_delivered=delivered,
        packets_dropped=dropped,
        packets_in_flight=in_flight,
        trips_completed=len(mob.trip_times),
        series={
            "time_s": np.arange(n_ticks) * dt,
            "latency_ms": s_lat,
            "pdr_pct": s_pdr,
            "reliability_pct": s_rel,
            "att_min": s_att,
            "nci_pct": s_nci,
        },
        extras={"coordinations": n_coord, "flagged_rounds": flagged, "fog_lyapunov_violations": int(stats[K.LYAP])},
    )


def simulate(cfg):
    """Build the world for ``cfg`` and run it."""
    return run(build_world(cfg), cfg)

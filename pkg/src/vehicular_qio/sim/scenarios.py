"""Scenario configuration and the canonical S1-S6 presets."""

import dataclasses
from dataclasses import dataclass, field, fields

from ..exceptions import ConfigError, UnknownScenario

VARIANTS = ("full", "no_entangle", "fixed_temp", "no_proj", "no_cvar", "greedy_assign")
SCENARIOS = ("S1", "S2", "S3", "S4", "S5", "S6")
SCALES = ("desk", "paper")


@dataclass
class ScenarioConfig:
    """Declarative description of one simulation run.

    Optimizer settings (plan population, smoothing, step size, entropic
    regularizer, risk level and objective weights) sit next to the world and
    traffic settings so a single file describes a run.
    """

    name: str = "S1"
    grid_rows: int = 10
    grid_cols: int = 10
    vehicles: int = 100
    rsus: int = 8
    fog_nodes: int = 4
    duration_s: float = 600.0
    traffic_dt_s: float = 1.0
    net_dt_s: float = 0.1
    beacon_hz: float = 10.0
    payload_bytes: int = 256
    latency_budget_v2v_ms: float = 50.0
    latency_budget_v2i_ms: float = 80.0
    demand_multiplier: float = 1.0
    rsu_outage_frac: float = 0.0
    incident_rate: float = 0.0
    fog_cpu_frac: float = 1.0
    nr_fraction: float = 0.0
    closures: tuple = ()
    seed: int = 0
    variant: str = "full"
    edge_length_m: float = 200.0
    free_flow_mps: float = 13.9
    edge_capacity: float = 3.0
    coordination_s: float = 10.0
    decision_ticks: int = 10
    n_plans: int = 128
    beta: float = 0.9
    eta: float = 1e-2
    epsilon: float = 1e-2
    risk_delta: float = 1e-3
    w_L: float = 0.4
    w_R: float = 0.3
    w_E: float = 0.2
    w_Th: float = 0.1
    rsu_service_pps: float = 550.0
    fog_service_pps: float = 700.0
    channel_success: float = None
    infinite_rate: bool = False

    def validate(self):
        """Return every problem as ``(field, message)``; empty when valid."""
        issues = []

        def need(cond, name, msg):
            if not cond:
                issues.append((name, msg))

        for name in ("grid_rows", "grid_cols"):
            need(int(getattr(self, name)) >= 1, name, "must be >= 1")
        for name in ("vehicles", "rsus", "fog_nodes"):
            need(int(getattr(self, name)) >= 0, name, "must be >= 0")
        need(self.fog_nodes >= 1 or self.rsus == 0, "fog_nodes", "must be >= 1 when RSUs exist")
        for name in ("duration_s", "traffic_dt_s", "net_dt_s", "edge_length_m", "free_flow_mps", "edge_capacity",
                     "coordination_s", "rsu_service_pps", "fog_service_pps", "eta", "epsilon"):
            need(getattr(self, name) > 0, name, "must be > 0")
        need(self.beacon_hz >= 0, "beacon_hz", "must be >= 0")
        need(int(self.payload_bytes) > 0, "payload_bytes", "must be > 0")
        need(self.latency_budget_v2v_ms > 0, "latency_budget_v2v_ms", "must be > 0")
        need(self.latency_budget_v2i_ms > 0, "latency_budget_v2i_ms", "must be > 0")
        need(self.demand_multiplier > 0, "demand_multiplier", "must be > 0")
        for name in ("rsu_outage_frac", "nr_fraction"):
            need(0 <= getattr(self, name) <= 1, name, "must lie in [0, 1]")
        need(0 < self.fog_cpu_frac <= 1, "fog_cpu_frac", "must lie in (0, 1]")
        need(self.incident_rate >= 0, "incident_rate", "must be >= 0")
        need(self.variant in VARIANTS, "variant", f"must be one of {', '.join(VARIANTS)}")
        need(int(self.decision_ticks) >= 1, "decision_ticks", "must be >= 1")
        need(int(self.n_plans) >= 2, "n_plans", "must be >= 2")
        need(0 < self.beta < 1, "beta", "must lie in (0, 1)")
        need(0 < self.risk_delta < 1, "risk_delta", "must lie in (0, 1)")
        ws = (self.w_L, self.w_R, self.w_E, self.w_Th)
        need(all(w >= 0 for w in ws) and sum(ws) > 0, "w_L", "objective weights must be nonnegative with a positive sum")
        need(self.channel_success is None or 0 < self.channel_success <= 1, "channel_success", "must lie in (0, 1]")
        need(self.net_dt_s <= self.traffic_dt_s, "net_dt_s", "must not exceed traffic_dt_s")
        return issues

    def check(self):
        issues = self.validate()
        if issues:
            raise ConfigError("; ".join(f"{f}: {m}" for f, m in issues), [(None, f, m) for f, m in issues])
        return self

    @property
    def weights(self):
        return {"L": self.w_L, "R": self.w_R, "E": self.w_E, "Th": self.w_Th}

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["closures"] = [list(e) for e in self.closures]
        return d


FIELD_TYPES = {f.name: f.type for f in fields(ScenarioConfig)}


def scenario(name, scale="desk", **overrides):
    """Canonical configuration for one of the S1-S6 scenarios."""
    if name not in SCENARIOS:
        raise UnknownScenario(f"unknown scenario {name!r}; valid options: {', '.join(SCENARIOS)}")
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; valid options: {', '.join(SCALES)}")
    base = {}
    if scale == "paper":
        base = dict(grid_rows=25, grid_cols=25, vehicles=2000, rsus=40, fog_nodes=12, duration_s=3600.0,
                    rsu_service_pps=2500.0, fog_service_pps=2800.0, edge_capacity=12.0)
    presets = {
        "S1": {},
        "S2": dict(demand_multiplier=2.0, nr_fraction=0.5),
        "S3": dict(incident_rate=2.0),
        "S4": dict(rsu_outage_frac=0.2),
        "S5": dict(beacon_hz=20.0, payload_bytes=512),
        "S6": dict(fog_cpu_frac=0.5),
    }
    params = {**base, **presets[name], **overrides}
    if name == "S2" and "vehicles" not in overrides:
        params["vehicles"] = int(round(params.get("vehicles", ScenarioConfig.vehicles) * params["demand_multiplier"]))
    return ScenarioConfig(name=name, **params).check()

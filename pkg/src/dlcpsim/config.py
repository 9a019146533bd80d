"""Run configuration: TOML files validated fail-closed against typed sections.

Every section rejects unknown keys. Validation errors name the dotted path of
the offending key, e.g. ``workload.n_workers``.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

WIRE_MTU = 1518


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class TopologyConfig(_Section):
    n_core: int = Field(4, ge=1)
    n_tor: int = Field(1, ge=1)
    hosts_per_tor: int = Field(17, ge=1)
    host_link_gbps: float = Field(10.0, gt=0)
    core_link_gbps: float = Field(10.0, gt=0)
    link_delay_ns: int = Field(2000, ge=0)


class SwitchConfig(_Section):
    n_queues: int = Field(8, ge=2, le=64)
    buffer_bytes: int = Field(192 * 1024, gt=0)
    shared_pool_bytes: Optional[int] = Field(None, gt=0)
    thresholds: Literal["none", "uniform", "ladder", "file"] = "none"
    threshold_packets: int = Field(65, ge=0)
    ladder_base_bytes: int = Field(32 * 1024, gt=0)
    ladder_step: float = Field(0.5, ge=0)
    thresholds_file: Optional[str] = None
    lb_policy: Literal["per-flow-ecmp", "per-packet-spray", "source-routed-round-robin"] = "per-flow-ecmp"
    hash_seed: int = 0

    @model_validator(mode="after")
    def _file_needed(self):
        if self.thresholds == "file" and not self.thresholds_file:
            raise ValueError("thresholds = 'file' requires thresholds_file")
        return self


class TransportConfig(_Section):
    loss_bound: float = Field(0.10, ge=0, lt=1)
    pull_factor: float = Field(0.5, ge=0, le=1)
    delta: float = Field(2.0, gt=1)
    period_us: float = Field(200.0, gt=0)
    ai_fraction: float = Field(0.05, gt=0, le=1)
    signal_timeout_mult: float = Field(4.0, gt=0)
    mtu_payload: int = Field(1400, ge=4)


class BaselineConfig(_Section):
    rto_min_ms: float = Field(10.0, gt=0)
    init_window: int = Field(10, ge=1)
    dupack_threshold: int = Field(3, ge=1)
    ecn_mode: Literal["off", "classic", "dctcp"] = "classic"
    dctcp_g: float = Field(1 / 16, gt=0, le=1)
    mss: int = Field(1460, gt=0)


class WorkloadConfig(_Section):
    profile: str = "desk-incast"
    volume_scale: float = Field(1.0, gt=0)
    mode: Literal["ps", "ring-allreduce", "bulk"] = "ps"
    n_workers: int = Field(16, ge=1)
    n_servers: Optional[int] = Field(None, ge=1)
    placement: Literal["dedicated", "colocated"] = "dedicated"
    split_threshold_bytes: int = Field(4 * 1024 * 1024, gt=0)
    iterations: int = Field(5, ge=1)
    compute_jitter: float = Field(0.001, ge=0, lt=1)
    tagging: Literal["none", "layer", "layer+magnitude"] = "none"
    sample_fraction: float = Field(0.001, gt=0, le=1)
    magnitude_sigma: float = Field(1.0, ge=0)
    magnitude_correlation: float = Field(0.999, ge=0, lt=1)
    bulk_bytes: int = Field(4 * 1024 * 1024, gt=0)

    @model_validator(mode="after")
    def _ring_servers(self):
        if self.mode != "ps" and self.n_servers is not None:
            raise ValueError(f"{self.mode} takes no n_servers")
        return self


class BackgroundConfig(_Section):
    load: float = Field(0.0, ge=0, lt=1)
    distribution: str = "websearch"
    transport: Literal["dlcp", "reliable"] = "reliable"


class MetricsConfig(_Section):
    percentiles: list[float] = Field(default_factory=lambda: [50.0, 95.0, 99.0])
    plots: bool = False


class RunSection(_Section):
    name: str = "run"
    transport: Literal["dlcp", "reliable"] = "dlcp"
    seeds: list[int] = Field(default_factory=lambda: [1])
    stop_ms: Optional[float] = Field(None, gt=0)


class RunConfig(_Section):
    run: RunSection = Field(default_factory=RunSection)
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    switch: SwitchConfig = Field(default_factory=SwitchConfig)
    transport: TransportConfig = Field(default_factory=TransportConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    workload: WorkloadConfig = Field(default_factory=WorkloadConfig)
    background: BackgroundConfig = Field(default_factory=BackgroundConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    @model_validator(mode="after")
    def _hosts_fit(self):
        w = self.workload
        hosts = self.topology.n_tor * self.topology.hosts_per_tor
        if w.mode == "bulk":
            if self.topology.n_tor < 2 or w.n_workers > self.topology.hosts_per_tor:
                raise ValueError("bulk mode needs two racks with n_workers hosts each")
            return self
        servers = 0 if w.mode == "ring-allreduce" or w.placement == "colocated" else (w.n_servers or 1)
        if w.n_workers + servers > hosts:
            raise ValueError(f"{w.n_workers} workers + {servers} servers exceed {hosts} hosts")
        return self

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", exclude_none=True)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{path}: {e['msg']}")
    return "; ".join(parts)


def from_dict(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def parse_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"TOML syntax: {err}") from None
    return from_dict(data)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def override(cfg: RunConfig, **sections: dict) -> RunConfig:
    """Copy of ``cfg`` with per-section key overrides, revalidated."""
    data = cfg.to_dict()
    for section, values in sections.items():
        data.setdefault(section, {}).update(values)
    return from_dict(data)


# ------------------------------------------------------------ threshold optimizer
class QueueModelConfig(_Section):
    n_queues: int = Field(7, ge=1)
    buffer_packets: int = Field(120, ge=1)
    arrival_rate: float = Field(0.8, ge=0)
    service_rate: float = Field(1.0, gt=0)
    theta: float = Field(0.5, ge=0, le=1)
    layer_sizes: list[float] = Field(default_factory=lambda: [1.0] * 7, min_length=1)


class CostConfig(_Section):
    source: Literal["anchors", "flat", "file"] = "anchors"
    slope: float = Field(100.0, ge=0)
    file: Optional[str] = None

    @model_validator(mode="after")
    def _file_needed(self):
        if self.source == "file" and not self.file:
            raise ValueError("source = 'file' requires file")
        return self


class SearchConfig(_Section):
    formula: Literal["standard", "printed"] = "standard"
    restarts: int = Field(8, ge=0)
    seed: int = 0
    grid_limit: int = Field(10 ** 6, ge=1)


class OptimizeConfig(_Section):
    model: QueueModelConfig = Field(default_factory=QueueModelConfig)
    cost: CostConfig = Field(default_factory=CostConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.model_dump(mode="json", exclude_none=True))


def load_optimize_config(path: str | Path) -> OptimizeConfig:
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"TOML syntax: {err}") from None
    try:
        return OptimizeConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None

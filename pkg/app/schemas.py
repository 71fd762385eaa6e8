from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


def _split_csv(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _parse_task_map(value):
    """Parse ``"3:1,2;4:3"`` into ``{3: [1, 2], 4: [3]}``; dicts pass through."""
    if value is None or isinstance(value, dict):
        return value or {}
    if not isinstance(value, str):
        raise ValueError("expected a 't:h,h;t:h' mapping")
    parsed: Dict[int, List[int]] = {}
    for chunk in value.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        task, _, members = chunk.partition(":")
        parsed[int(task)] = [int(h) for h in members.split(",") if h.strip()]
    return parsed


# ── Problem ───────────────────────────────────────────────────────────────────

class ProblemConfig(BaseModel):
    p: int = Field(500, ge=1)
    n: int = Field(24, ge=1)
    M: int = Field(24, ge=0)
    T: int = Field(5, ge=1)
    sigma: float = Field(0.0, ge=0.0)

    class Config:
        frozen = True

    @property
    def overparameterized(self) -> bool:
        return self.p > self.n + self.M

    @property
    def closed_form_ready(self) -> bool:
        return self.p > self.n + self.M + 1


class GroundTruthSpec(BaseModel):
    kind: Literal["equal_gap", "orthonormal", "explicit"] = "equal_gap"
    gap_sq: float = Field(1.0, ge=0.0)
    seed: int = Field(7, ge=0)
    vectors_path: Optional[str] = None

    @model_validator(mode="after")
    def explicit_needs_path(self):
        if self.kind == "explicit" and not self.vectors_path:
            raise ValueError("explicit ground truth requires vectors_path")
        return self


# ── Strategy ──────────────────────────────────────────────────────────────────

class PartitionRule(BaseModel):
    mode: Literal["explicit_sets", "gap_threshold", "gradient_cosine", "single_dissimilar"] = "gap_threshold"
    sim_sets: Dict[int, List[int]] = Field(default_factory=dict)
    dis_sets: Dict[int, List[int]] = Field(default_factory=dict)
    tau: float = Field(0.0, ge=-1.0, le=1.0)
    gap_tau: float = 1.0

    class Config:
        frozen = True

    @field_validator("sim_sets", "dis_sets", mode="before")
    @classmethod
    def parse_sets(cls, v):
        return _parse_task_map(v)

    @property
    def is_exogenous(self) -> bool:
        """True when the sets do not depend on the drawn data."""
        return self.mode in ("explicit_sets", "gap_threshold")


class StrategySpec(BaseModel):
    kind: Literal["concurrent", "sequential", "hybrid"] = "concurrent"
    sequential_order: Literal["oldest_first", "newest_first", "explicit"] = "oldest_first"
    explicit_order: Dict[int, List[int]] = Field(default_factory=dict)
    hybrid_partition: PartitionRule = Field(default_factory=PartitionRule)

    class Config:
        frozen = True

    @field_validator("explicit_order", mode="before")
    @classmethod
    def parse_order(cls, v):
        return _parse_task_map(v)

    @property
    def label(self) -> str:
        if self.kind == "sequential" and self.sequential_order != "oldest_first":
            return f"sequential[{self.sequential_order}]"
        if self.kind == "hybrid":
            return f"hybrid[{self.hybrid_partition.mode}]"
        return self.kind


# ── Run configuration (one section per key-value prefix) ─────────────────────

class StrategySection(BaseModel):
    kinds: List[Literal["concurrent", "sequential", "hybrid"]] = Field(
        default_factory=lambda: ["concurrent", "sequential"]
    )
    sequential_order: Literal["oldest_first", "newest_first", "explicit"] = "oldest_first"
    explicit_order: Dict[int, List[int]] = Field(default_factory=dict)

    @field_validator("kinds", mode="before")
    @classmethod
    def parse_kinds(cls, v):
        return _split_csv(v)

    @field_validator("explicit_order", mode="before")
    @classmethod
    def parse_order(cls, v):
        return _parse_task_map(v)

    @field_validator("kinds")
    @classmethod
    def non_empty(cls, v):
        if not v:
            raise ValueError("at least one strategy kind is required")
        return v


class SweepSpec(BaseModel):
    axis: Literal["gap_sq", "M", "p", "sigma"] = "gap_sq"
    grid: List[float] = Field(
        default_factory=lambda: [round(0.1 + 0.2 * k, 10) for k in range(10)]
    )

    @field_validator("grid", mode="before")
    @classmethod
    def parse_grid(cls, v):
        return _split_csv(v)

    @field_validator("grid")
    @classmethod
    def non_empty(cls, v):
        if not v:
            raise ValueError("sweep grid must contain at least one value")
        return v


class RunSettings(BaseModel):
    trials: int = Field(1000, ge=2)
    seed: int = Field(2024, ge=0)
    workers: int = Field(1, ge=1)
    out_dir: str = "results"
    format: Literal["csv", "json"] = "csv"
    redraw_geometry: bool = False
    save_params: bool = False
    allow_uneven: bool = False
    identity_trials: int = Field(10000, ge=2)


class VerifySpec(BaseModel):
    suite: Literal["lemmas", "theorems", "identities", "all"] = "all"


class RunConfig(BaseModel):
    problem: ProblemConfig = Field(default_factory=ProblemConfig)
    ground_truth: GroundTruthSpec = Field(default_factory=GroundTruthSpec)
    strategy: StrategySection = Field(default_factory=StrategySection)
    partition: PartitionRule = Field(default_factory=PartitionRule)
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    run: RunSettings = Field(default_factory=RunSettings)
    verify: VerifySpec = Field(default_factory=VerifySpec)

    @model_validator(mode="after")
    def check_regime(self):
        pb = self.problem
        if pb.p <= pb.n + pb.M:
            raise ValueError(f"problem.p: p must exceed n + M (got p={pb.p}, n+M={pb.n + pb.M})")
        if self.ground_truth.kind == "orthonormal" and pb.p < pb.T:
            raise ValueError(f"ground_truth.kind: orthonormal ground truth needs p >= T (got p={pb.p}, T={pb.T})")
        return self

    def strategy_specs(self) -> List[StrategySpec]:
        return [
            StrategySpec(
                kind=kind,
                sequential_order=self.strategy.sequential_order,
                explicit_order=self.strategy.explicit_order,
                hybrid_partition=self.partition,
            )
            for kind in self.strategy.kinds
        ]


# ── Reports ───────────────────────────────────────────────────────────────────

class CheckRow(BaseModel):
    check: str
    point: Dict[str, float]
    status: Literal["pass", "fail", "marginal", "skipped"]
    margin: Optional[float] = None
    values: Dict[str, float] = Field(default_factory=dict)
    preconditions: Dict[str, bool] = Field(default_factory=dict)
    skipped_reason: Optional[str] = None


class CheckReport(BaseModel):
    name: str
    grid_description: str
    rows: List[CheckRow] = Field(default_factory=list)

    @property
    def failures(self) -> List[CheckRow]:
        return [r for r in self.rows if r.status == "fail"]

    @property
    def marginal(self) -> List[CheckRow]:
        return [r for r in self.rows if r.status == "marginal"]

    @property
    def worst_margin(self) -> Optional[float]:
        asserted = [r.margin for r in self.rows if r.status != "skipped" and r.margin is not None]
        return min(asserted) if asserted else None

    @property
    def passed(self) -> bool:
        return not self.failures

    def counts(self) -> Dict[str, int]:
        out = {"pass": 0, "fail": 0, "marginal": 0, "skipped": 0}
        for row in self.rows:
            out[row.status] += 1
        return out


class OrderingEntry(BaseModel):
    family: Literal["c_i", "c_ijk", "d_0T", "d_ijkT"]
    index: List[int]
    concurrent: float
    sequential: float
    margin: float
    holds: bool
    equal: bool


class OrderingReport(BaseModel):
    T: int
    p: int
    n: int
    M: int
    entries: List[OrderingEntry] = Field(default_factory=list)
    preconditions: Dict[str, bool] = Field(default_factory=dict)

    def family_holds(self, family: str) -> bool:
        return all(e.holds for e in self.entries if e.family == family)

    @property
    def all_hold(self) -> bool:
        return all(e.holds for e in self.entries)

    @property
    def all_equal(self) -> bool:
        return all(e.equal for e in self.entries)

    @property
    def violations(self) -> List[OrderingEntry]:
        return [e for e in self.entries if not e.holds]

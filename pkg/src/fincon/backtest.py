"""Deterministic backtest harness around the manager-analyst hierarchy.

The daily loop: assemble the observation, fan analyst steps out (a barrier
waits for every instance), check the risk state carried from the prior
day's close, run the manager decision (risk-averse clause when alerting),
solve portfolio weights where applicable, realize PnL on the close-to-close
transition, recompute CVaR and the within-episode trigger, reflect when
triggered, and send feedback. Decisions for day t always use data dated
at most t; PnL realizes on the t -> t+1 transition.

Training (``train``) loops episodes over the training range and runs the
over-episode belief update after every episode from the second on, stopping
at the configured maximum or when the action overlap converges. Testing
(``test``) inherits prompts and memory from a training run directory and
runs a single pass with the within-episode control active and the belief
machinery disabled.

All run artifacts (config.used.json, trajectory JSONL, beliefs, prompts,
memory snapshot, report.json, metrics.csv) are written with canonical
serialization so identical invocations produce byte-identical directories.
"""

from __future__ import annotations

import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date as Date
from pathlib import Path

import numpy as np

from . import _kernels
from .agents import (
    DAILY_ANALYST_ROLES,
    KIND_FOR_ROLE,
    MANAGER,
    NO_SIGNAL,
    RISK_CONTROL,
    AnalystSlice,
    Message,
    PromptSet,
    Router,
    StepContext,
    Topology,
    analyst_id,
    analyst_step,
    build_profiles,
    manager_step,
    reflect_step,
    send_feedback,
    single_stock_weights,
)
from .data_ingest import MarketData, assemble_observation, log_return
from .errors import (
    ConfigError,
    EmptySeries,
    EmptyTrajectory,
    EpisodeAborted,
    FinconError,
    InsufficientData,
    InsufficientSamples,
    LengthMismatch,
    MissingTrainingArtifacts,
    MissingTrajectory,
    NonPositiveValue,
    TooFewPairs,
    ZeroVolatility,
)
from .llm_gateway import LlmGateway
from .memory import HashEmbedder, MemoryEvent, MemoryStore
from .portfolio import MVInputs, ReturnPanel, scale_to_positions, shrink_estimates, solve_mean_variance
from .risk_control import (
    ASPECT_FOR_ROLE,
    RiskState,
    alert_trigger,
    compare_and_update,
    convergence_check,
    cvar,
    var_cvar,
    within_episode_check,
)

TRADING_DAYS_PER_YEAR = 252


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_DECAY_RATIOS = {
    "news": 0.90,
    "ecc_transcript": 0.97,
    "form10q": 0.97,
    "form10k": 0.99,
    "analyst_report": 0.95,
    "data": 0.90,
    "manager": 0.95,
}

DEFAULTS = {
    "data_ingest": {"momentum_window": 20},
    "memory": {
        "top_k": 5,
        "embedder_dim": 64,
        "default_importance": 0.5,
        "decay_ratios": DEFAULT_DECAY_RATIOS,
    },
    "llm": {
        "temperature_decision": 0.3,
        "temperature_belief": 0.0,
        "max_retries": 2,
        "min_interval": 0.0,
    },
    "agents": {
        "analyst_roles": list(DAILY_ANALYST_ROLES),
        "workers": 2,
        "general_config": "",
        "profile_texts": {},
        "profile_files": {},
    },
    "risk": {
        "cvar_alpha": 0.01,
        "min_cvar_history": 10,
        "min_run_length": 2,
        "convergence_tau": 0.8,
        "convergence_epsilon": 1e-6,
    },
    "portfolio": {
        "shrinkage_lambda": 0.3,
        "estimation_window": 60,
        "min_news": 800,
        "pool_size": 3,
        "fractional_shares": True,
        "solver_obj_tol": 1e-10,
        "solver_step_tol": 1e-8,
        "solver_max_iter": 10_000,
    },
    "backtest": {
        "discount_alpha": 1.0,
        "max_episodes": 4,
        "capital": 100_000.0,
        "position_size": 1.0,
        "risk_free_daily": 0.0,
        "annualize_sharpe": False,
        "feedback_threshold_mult": 2.0,
        "feedback_window": 20,
        "train_run_dir": None,
        "resume": False,
    },
}


def _merge_defaults(section: str, user: dict) -> dict:
    merged = dict(DEFAULTS[section])
    for key, value in user.items():
        if key not in merged:
            raise ConfigError(f"unknown key {section}.{key}")
        if key == "decay_ratios":
            ratios = dict(DEFAULT_DECAY_RATIOS)
            ratios.update(value)
            value = ratios
        merged[key] = value
    return merged


def _parse_date(text: str, label: str) -> Date:
    try:
        y, m, d = (int(p) for p in str(text).split("-"))
        return Date(y, m, d)
    except (ValueError, AttributeError):
        raise ConfigError(f"{label}: bad date {text!r}") from None


@dataclass
class RunConfig:
    """One run's full, resolved configuration (a single JSON document)."""

    mode: str
    tickers: list[str]
    price_paths: dict[str, str]
    document_paths: list[str]
    train_start: Date
    train_end: Date
    test_start: Date
    test_end: Date
    data_ingest: dict
    memory: dict
    llm: dict
    agents: dict
    risk: dict
    portfolio: dict
    backtest: dict
    seed: int | None = None
    raw: dict = field(default_factory=dict)

    @property
    def is_portfolio(self) -> bool:
        return len(self.tickers) > 1

    @classmethod
    def from_dict(cls, payload: dict, base_dir: str | Path = ".") -> "RunConfig":
        base = Path(base_dir)
        mode = payload.get("mode", "train")
        if mode not in ("train", "test"):
            raise ConfigError(f"mode must be train or test, got {mode!r}")
        tickers = list(payload.get("tickers", []))
        if not tickers:
            raise ConfigError("tickers must be a non-empty list")
        data = payload.get("data", {})
        prices = {t: str(base / p) for t, p in data.get("prices", {}).items()}
        for t in tickers:
            if t not in prices:
                raise ConfigError(f"data.prices missing ticker {t}")
        documents = [str(base / p) for p in data.get("documents", [])]
        dates = payload.get("dates", {})
        for key in ("train_start", "train_end", "test_start", "test_end"):
            if key not in dates:
                raise ConfigError(f"dates.{key} is required")
        train_start = _parse_date(dates["train_start"], "dates.train_start")
        train_end = _parse_date(dates["train_end"], "dates.train_end")
        test_start = _parse_date(dates["test_start"], "dates.test_start")
        test_end = _parse_date(dates["test_end"], "dates.test_end")
        if not train_start <= train_end:
            raise ConfigError("train_start must not exceed train_end")
        if not test_start <= test_end:
            raise ConfigError("test_start must not exceed test_end")
        if not train_end < test_start:
            raise ConfigError("the training range must precede the test range")
        sections = {
            name: _merge_defaults(name, payload.get(name, {}))
            for name in ("data_ingest", "memory", "llm", "agents", "risk",
                         "portfolio", "backtest")
        }
        # profile texts may live in referenced plain-text files
        texts = dict(sections["agents"]["profile_texts"])
        for role, rel in sections["agents"]["profile_files"].items():
            file_path = base / rel
            if not file_path.exists():
                raise ConfigError(f"agents.profile_files[{role}]: {file_path} not found")
            texts[role] = file_path.read_text()
        sections["agents"]["profile_texts"] = texts
        alpha = sections["backtest"]["discount_alpha"]
        if not 0.0 < alpha <= 1.0:
            raise ConfigError(f"backtest.discount_alpha must be in (0,1], got {alpha}")
        cvar_alpha = sections["risk"]["cvar_alpha"]
        if not 0.0 < cvar_alpha < 1.0:
            raise ConfigError(f"risk.cvar_alpha must be in (0,1), got {cvar_alpha}")
        for role in sections["agents"]["analyst_roles"]:
            if role not in DAILY_ANALYST_ROLES:
                raise ConfigError(f"unknown analyst role {role!r}")
        return cls(
            mode=mode, tickers=tickers, price_paths=prices, document_paths=documents,
            train_start=train_start, train_end=train_end,
            test_start=test_start, test_end=test_end,
            seed=payload.get("seed"),
            raw=payload,
            **sections,
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(payload, base_dir=path.parent)

    def resolved_dict(self) -> dict:
        """Fully resolved config (defaults merged) for config.used.json."""
        out = {
            "mode": self.mode,
            "tickers": list(self.tickers),
            "data": self.raw.get("data", {}),
            "dates": {
                "train_start": self.train_start.isoformat(),
                "train_end": self.train_end.isoformat(),
                "test_start": self.test_start.isoformat(),
                "test_end": self.test_end.isoformat(),
            },
        }
        if self.seed is not None:
            out["seed"] = self.seed
        for name in ("data_ingest", "memory", "llm", "agents", "risk", "portfolio",
                     "backtest"):
            out[name] = getattr(self, name)
        return out


# ---------------------------------------------------------------------------
# performance metrics
# ---------------------------------------------------------------------------

def daily_pnl(action: float, price_t: float, price_next: float) -> float:
    """One day's PnL for a signed position: action * ln(p_next / p_t)."""
    return action * log_return(price_t, price_next)


def cumulative_return(pnls) -> float:
    """Sum of daily log returns, in percent."""
    values = list(pnls)
    if not values:
        raise EmptyTrajectory("no PnL records")
    return 100.0 * math.fsum(values)


def sharpe_ratio(pnls, risk_free_daily: float = 0.0, annualize: bool = False) -> float:
    """Mean excess PnL over its sample (n-1) standard deviation."""
    values = [float(x) for x in pnls]
    if len(values) < 2:
        raise InsufficientData(f"need at least 2 days, got {len(values)}")
    std = statistics.stdev(values)
    if std == 0.0:
        raise ZeroVolatility("PnL standard deviation is zero")
    ratio = (statistics.fmean(values) - risk_free_daily) / std
    if annualize:
        ratio *= math.sqrt(TRADING_DAYS_PER_YEAR)
    return ratio


def max_drawdown(values) -> float:
    """Largest running-peak-to-value decline of a positive series, in percent."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise EmptySeries("no values")
    if np.any(arr <= 0):
        raise NonPositiveValue("drawdown needs positive values")
    return 100.0 * _kernels.drawdown_fraction(arr)


def objective_value(pnls, alpha: float) -> float:
    """Discounted PnL sum: sum over t of alpha**t * r_t, t zero-based."""
    return math.fsum(alpha**t * r for t, r in enumerate(pnls))


def equity_curve(pnls, capital: float) -> list[float]:
    """Capital compounded through exp(r_t) each day."""
    out = []
    level = capital
    for r in pnls:
        level *= math.exp(r)
        out.append(level)
    return out


def rolling_sigma_threshold(pnls, window: int = 20, mult: float = 2.0) -> float | None:
    """Feedback significance bar: mult x rolling std of recent PnL.

    None (no feedback possible) until two PnL points exist or while the
    rolling standard deviation is zero.
    """
    recent = list(pnls)[-window:]
    if len(recent) < 2:
        return None
    std = statistics.stdev(recent)
    if std == 0.0:
        return None
    return mult * std


@dataclass(frozen=True)
class MetricsReport:
    cr_pct: float
    sharpe: float | None
    mdd_pct: float
    var: float
    cvar: float
    alpha: float
    days: int
    objective: float
    pnl_series: str

    def to_dict(self) -> dict:
        return {
            "cr_pct": self.cr_pct,
            "sharpe": self.sharpe,
            "mdd_pct": self.mdd_pct,
            "var": self.var,
            "cvar": self.cvar,
            "alpha": self.alpha,
            "days": self.days,
            "objective": self.objective,
            "pnl_series": self.pnl_series,
        }


def build_report(pnls, capital: float, cvar_alpha: float, risk_free_daily: float,
                 annualize: bool, discount_alpha: float,
                 pnl_series: str = "metrics.csv") -> MetricsReport:
    """Compute every report metric from the PnL series alone."""
    values = list(pnls)
    if not values:
        raise EmptyTrajectory("no PnL records")
    try:
        sharpe = sharpe_ratio(values, risk_free_daily, annualize)
    except (ZeroVolatility, InsufficientData):
        sharpe = None
    var_value, cvar_value = var_cvar(values, cvar_alpha)
    return MetricsReport(
        cr_pct=cumulative_return(values),
        sharpe=sharpe,
        mdd_pct=max_drawdown(equity_curve(values, capital)),
        var=var_value,
        cvar=cvar_value,
        alpha=cvar_alpha,
        days=len(values),
        objective=objective_value(values, discount_alpha),
        pnl_series=pnl_series,
    )


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

def signed_rank_sums(a, b) -> tuple[float, float, list[float]]:
    """(W+, W-, tied-rank sizes) after dropping zero differences."""
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise LengthMismatch(f"paired series lengths differ: {len(a)} vs {len(b)}")
    diffs = [x - y for x, y in zip(a, b) if x != y]
    n = len(diffs)
    if n < 6:
        raise TooFewPairs(f"need at least 6 nonzero differences, got {n}")
    order = sorted(range(n), key=lambda i: abs(diffs[i]))
    ranks = [0.0] * n
    tie_sizes: list[float] = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and abs(diffs[order[j + 1]]) == abs(diffs[order[i]]):
            j += 1
        avg_rank = (i + j + 2) / 2.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg_rank
        tie_sizes.append(float(j - i + 1))
        i = j + 1
    w_plus = sum(r for d, r in zip(diffs, ranks) if d > 0)
    w_minus = sum(r for d, r in zip(diffs, ranks) if d < 0)
    return w_plus, w_minus, tie_sizes


def _exact_signed_rank_cdf(w: int, n: int) -> float:
    """P(W <= w) under the null, by subset-sum counting over ranks 1..n."""
    total = n * (n + 1) // 2
    counts = [0] * (total + 1)
    counts[0] = 1
    for rank in range(1, n + 1):
        for s in range(total, rank - 1, -1):
            counts[s] += counts[s - rank]
    return sum(counts[: w + 1]) / 2.0**n


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired series.

    Zero differences are dropped; at least six must remain. The statistic is
    the smaller of the positive and negative rank sums. The p-value uses the
    exact null distribution for n <= 25 without ties, and a tie-corrected
    normal approximation with continuity correction otherwise.
    """
    w_plus, w_minus, tie_sizes = signed_rank_sums(a, b)
    n = int(sum(tie_sizes))
    w = min(w_plus, w_minus)
    has_ties = any(t > 1 for t in tie_sizes)
    if n <= 25 and not has_ties:
        p = min(1.0, 2.0 * _exact_signed_rank_cdf(int(round(w)), n))
        return w, p
    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0
    variance -= sum(t**3 - t for t in tie_sizes) / 48.0
    if variance <= 0:
        raise InsufficientData("zero variance in signed ranks")
    z = (w - mean + 0.5) / math.sqrt(variance)
    p = min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))
    return w, p


# ---------------------------------------------------------------------------
# trajectory records
# ---------------------------------------------------------------------------

@dataclass
class DayRecord:
    date: Date
    directions: dict[str, str]
    weights: dict[str, float]
    target_shares: dict[str, float]
    pnl: float
    cvar: float
    alert: bool
    trigger: str | None
    reflections: list[dict]
    reasoning: str
    insights: dict[str, str]
    cited_memory_ids: list[str]

    def to_record(self) -> dict:
        return {
            "date": self.date.isoformat(),
            "directions": self.directions,
            "weights": self.weights,
            "target_shares": self.target_shares,
            "pnl": self.pnl,
            "cvar": self.cvar,
            "alert": self.alert,
            "trigger": self.trigger,
            "reflections": self.reflections,
            "reasoning": self.reasoning,
            "insights": self.insights,
            "cited_memory_ids": self.cited_memory_ids,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DayRecord":
        y, m, d = (int(p) for p in rec["date"].split("-"))
        return cls(
            date=Date(y, m, d),
            directions=dict(rec["directions"]),
            weights={k: float(v) for k, v in rec["weights"].items()},
            target_shares={k: float(v) for k, v in rec["target_shares"].items()},
            pnl=float(rec["pnl"]),
            cvar=float(rec["cvar"]),
            alert=bool(rec["alert"]),
            trigger=rec["trigger"],
            reflections=list(rec["reflections"]),
            reasoning=str(rec["reasoning"]),
            insights=dict(rec["insights"]),
            cited_memory_ids=list(rec["cited_memory_ids"]),
        )


@dataclass
class Trajectory:
    episode: object
    days: list[DayRecord]
    objective: float = 0.0
    complete: bool = True

    def pnls(self) -> list[float]:
        return [d.pnl for d in self.days]

    def action_labels(self) -> list[str]:
        """Direction labels flattened per (date, ticker) for overlap comparison."""
        labels = []
        for day in self.days:
            for ticker in sorted(day.directions):
                labels.append(day.directions[ticker])
        return labels

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(d.to_record(), sort_keys=True, separators=(",", ":")) + "\n"
            for d in self.days)

    @classmethod
    def from_jsonl(cls, path: str | Path, episode: object, discount_alpha: float) -> "Trajectory":
        days = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    days.append(DayRecord.from_record(json.loads(line)))
        traj = cls(episode=episode, days=days)
        traj.objective = objective_value(traj.pnls(), discount_alpha)
        return traj


# ---------------------------------------------------------------------------
# run directory writer
# ---------------------------------------------------------------------------

def _dump_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


class RunWriter:
    """Writes every run artifact with canonical, reproducible serialization."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        p = self.run_dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_config(self, config: RunConfig) -> None:
        self.path("config.used.json").write_text(_dump_json(config.resolved_dict()))

    def write_trajectory(self, tag: object, trajectory: Trajectory) -> None:
        self.path(f"trajectory_{tag}.jsonl").write_text(trajectory.to_jsonl())

    def write_failed(self, tag: object, days: list[DayRecord], error: str) -> None:
        lines = [json.dumps(d.to_record(), sort_keys=True, separators=(",", ":"))
                 for d in days]
        lines.append(json.dumps({"FAILED": error}, sort_keys=True, separators=(",", ":")))
        self.path(f"trajectory_{tag}.FAILED.jsonl").write_text("\n".join(lines) + "\n")

    def write_belief(self, episode: int, update) -> None:
        self.path("beliefs", f"episode_{episode}.json").write_text(update.to_json() + "\n")

    def write_prompt_set(self, prompts: PromptSet) -> None:
        self.path("prompts", "final", "prompt_set.json").write_text(
            _dump_json(prompts.to_dict()))

    def write_prompt_log(self, tag: object, entries: list[dict]) -> None:
        text = "".join(
            json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in entries)
        self.path("prompts", f"assembled_{tag}.jsonl").write_text(text)

    def write_memory(self, store: MemoryStore) -> None:
        store.save_jsonl(self.path("memory", "snapshot.jsonl"))

    def write_report(self, report: MetricsReport) -> None:
        self.path("report.json").write_text(_dump_json(report.to_dict()))

    def write_metrics_csv(self, days: list[DayRecord], capital: float) -> None:
        equity = equity_curve([d.pnl for d in days], capital)
        lines = ["date,pnl,equity,cvar,alert"]
        for day, eq in zip(days, equity):
            lines.append(f"{day.date.isoformat()},{day.pnl!r},{eq!r},{day.cvar!r},"
                         f"{int(day.alert)}")
        self.path("metrics.csv").write_text("\n".join(lines) + "\n")

    def write_summary(self, name: str, payload: dict) -> None:
        self.path(name).write_text(_dump_json(payload))

    def write_checkpoint(self, episode: int, prompts: PromptSet, objectives: list,
                         taus: list, store: MemoryStore) -> None:
        payload = {
            "episode": episode,
            "prompts": prompts.to_dict(),
            "objectives": objectives,
            "taus": taus,
        }
        self.path("state", f"checkpoint_{episode}.json").write_text(_dump_json(payload))
        store.save_jsonl(self.path("state", f"memory_{episode}.jsonl"))


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

class BacktestEngine:
    """Drives episodes over a loaded market with one gateway and one store."""

    def __init__(self, config: RunConfig, market: MarketData, gateway: LlmGateway,
                 store: MemoryStore | None = None, writer: RunWriter | None = None):
        self.config = config
        self.market = market
        self.gateway = gateway
        self.store = store if store is not None else MemoryStore(calendar=market.calendar)
        self.writer = writer
        self.embedder = HashEmbedder(dim=config.memory["embedder_dim"])
        roles = list(config.agents["analyst_roles"])
        self.analyst_ids = {
            analyst_id(role, ticker): role
            for role in roles for ticker in config.tickers
        }
        general = config.agents["general_config"] or (
            f"Investment task: {'portfolio management' if config.is_portfolio else 'single stock trading'} "
            f"on {', '.join(config.tickers)}. Objective: maximize cumulative discounted PnL "
            f"while controlling downside risk."
        )
        self.profiles = build_profiles(config.tickers, roles, general,
                                       config.agents.get("profile_texts") or None)
        self.topology = Topology(sorted(self.analyst_ids))
        self.router = Router(self.topology)
        self.belief_update_calls = 0
        self.prompt_log: dict[object, list[dict]] = {}

    # -- helpers ------------------------------------------------------------

    def _decision_days(self, start: Date, end: Date) -> list[Date]:
        days = [d for d in self.market.calendar if start <= d <= end]
        if not days:
            raise ConfigError(f"no trading days between {start} and {end}")
        if self.market.trading_day_after(days[-1]) is None:
            raise ConfigError(
                f"price files must extend at least one bar beyond {days[-1]} "
                "to realize the final day's PnL")
        return days

    def _analyst_slice(self, role: str, ticker: str, obs, date: Date) -> AnalystSlice:
        ticker_slice = obs.tickers[ticker]
        if role == "data_analyst":
            indicators = dict(ticker_slice.indicators)
            asset_returns = self.market.log_returns_to(ticker, date)
            if asset_returns:
                indicators["cvar"] = cvar(asset_returns, self.config.risk["cvar_alpha"])
            bar = ticker_slice.bar
            price_line = (f"close={bar.close!r} adj_close={bar.adj_close!r} "
                          f"volume={bar.volume}")
            return AnalystSlice(ticker=ticker, indicators=indicators, price_line=price_line)
        kind = KIND_FOR_ROLE[role]
        docs = tuple(d for d in ticker_slice.documents if d.kind == kind)
        return AnalystSlice(ticker=ticker, documents=docs)

    def _step_context(self, episode: object, temperature: float) -> StepContext:
        return StepContext(
            store=self.store,
            gateway=self.gateway,
            embedder=self.embedder,
            episode=episode,
            top_k=self.config.memory["top_k"],
            temperature=temperature,
            max_retries=self.config.llm["max_retries"],
            default_importance=self.config.memory["default_importance"],
        )

    def _log_prompts(self, episode: object, entries: list[dict]) -> None:
        self.prompt_log.setdefault(episode, []).extend(
            sorted(entries, key=lambda e: (e["date"], e["phase"], e["agent_id"])))

    def _solve_weights(self, decision, date: Date) -> dict[str, float]:
        cfg = self.config
        if not cfg.is_portfolio:
            return single_stock_weights(decision, cfg.backtest["position_size"])
        window = cfg.portfolio["estimation_window"]
        histories = {t: self.market.log_returns_to(t, date, max_window=window)
                     for t in cfg.tickers}
        t_len = min(len(h) for h in histories.values())
        if t_len < 2:
            raise InsufficientSamples(
                f"need at least 2 aligned daily returns before {date}; "
                "provide warmup bars before the simulation range")
        matrix = np.column_stack([histories[t][-t_len:] for t in cfg.tickers])
        panel = ReturnPanel(tickers=tuple(cfg.tickers), dates=tuple(range(t_len)),
                            returns=matrix)
        mu, sigma = shrink_estimates(panel, cfg.portfolio["shrinkage_lambda"])
        directions = tuple(decision.directions[t] for t in cfg.tickers)
        w = solve_mean_variance(
            MVInputs(mu=mu, sigma=sigma, directions=directions),
            obj_tol=cfg.portfolio["solver_obj_tol"],
            step_tol=cfg.portfolio["solver_step_tol"],
            max_iter=cfg.portfolio["solver_max_iter"],
        )
        return {t: float(w[i]) for i, t in enumerate(cfg.tickers)}

    # -- episode loop ---------------------------------------------------------

    def run_episode(self, prompts: PromptSet, mode: str, episode: object,
                    start: Date, end: Date) -> Trajectory:
        """One pass over [start, end]; returns the trajectory.

        A gateway failure aborts the episode: the partial trajectory is
        written as a FAILED artifact (when a writer is attached) and
        EpisodeAborted propagates.
        """
        cfg = self.config
        days = self._decision_days(start, end)
        records: list[DayRecord] = []
        try:
            self._run_days(prompts, mode, episode, days, records)
        except FinconError as exc:
            if self.writer is not None:
                self.writer.write_failed(episode, records, f"{type(exc).__name__}: {exc}")
            raise EpisodeAborted(episode, exc) from exc
        trajectory = Trajectory(episode=episode, days=records)
        trajectory.objective = objective_value(trajectory.pnls(),
                                               cfg.backtest["discount_alpha"])
        last_date = records[-1].date
        summary = (f"Episode {episode} summary: objective "
                   f"{trajectory.objective!r}, cumulative return "
                   f"{cumulative_return(trajectory.pnls())!r}%.")
        self.store.add(MemoryEvent(
            event_id=f"{MANAGER}:{episode}:{last_date.isoformat()}:episode",
            owner=MANAGER,
            layer="episodic",
            content=summary,
            embedding=self.embedder.embed(summary),
            initial_importance=cfg.memory["default_importance"],
            decay_ratio=cfg.memory["decay_ratios"]["manager"],
            created_at=last_date,
        ))
        return trajectory

    def _run_days(self, prompts: PromptSet, mode: str, episode: object,
                  days: list[Date], records: list[DayRecord]) -> None:
        cfg = self.config
        ctx = self._step_context(episode, cfg.llm["temperature_decision"])
        decay = cfg.memory["decay_ratios"]
        risk_state = RiskState.initial()
        pnl_history: list[float] = []
        prev_rho: float | None = None
        workers = max(1, int(cfg.agents["workers"]))
        instance_ids = sorted(self.analyst_ids)
        for day in days:
            obs = assemble_observation(day, cfg.tickers, self.market)
            day_entries: list[dict] = []

            def run_one(aid: str):
                role = self.analyst_ids[aid]
                ticker = aid.split(":", 1)[1]
                obs_slice = self._analyst_slice(role, ticker, obs, day)
                belief = prompts.belief_block.get(ASPECT_FOR_ROLE.get(role, ""))
                ratio = decay["data"] if role == "data_analyst" else decay[KIND_FOR_ROLE[role]]
                return analyst_step(self.profiles[aid], prompts.analyst_prompts[aid],
                                    belief, obs_slice, day, ctx, ratio)

            if workers > 1 and len(instance_ids) > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(run_one, instance_ids))
            else:
                results = [run_one(aid) for aid in instance_ids]
            insights = {}
            for aid, (message, entry) in zip(instance_ids, results):
                insights[aid] = message
                self.router.send(Message(sender=aid, recipient=MANAGER, kind="insight",
                                         payload=message))
                if entry is not None:
                    day_entries.append(entry)

            decision, entry = manager_step(
                self.profiles[MANAGER], prompts, insights, risk_state, day, ctx,
                cfg.tickers, instance_ids, decay["manager"])
            day_entries.append(entry)
            self.router.send(Message(sender=MANAGER, recipient=RISK_CONTROL,
                                     kind="decision", payload=decision))

            decision.weights = self._solve_weights(decision, day)
            decision.check_weight_signs()
            closes = np.array([self.market.close(t, day) for t in cfg.tickers])
            shares = scale_to_positions(
                np.array([decision.weights[t] for t in cfg.tickers]),
                cfg.backtest["capital"], closes,
                fractional=cfg.portfolio["fractional_shares"])

            next_day = self.market.trading_day_after(day)
            r_t = math.fsum(
                decision.weights[t] * log_return(self.market.close(t, day),
                                                 self.market.close(t, next_day))
                for t in cfg.tickers)
            pnl_history.append(r_t)
            rho_t = cvar(pnl_history, cfg.risk["cvar_alpha"])
            provisional = RiskState(date=day, cvar=rho_t, prev_cvar=prev_rho,
                                    alert=False, history_len=len(pnl_history))
            trigger = alert_trigger(provisional, r_t, cfg.risk["min_cvar_history"])
            checked = within_episode_check(provisional, r_t, cfg.risk["min_cvar_history"])

            reflections: list[dict] = []
            if checked.alert:
                day_summary = (f"PnL {r_t!r}, CVaR {rho_t!r} "
                               f"(previous {prev_rho!r}), trigger {trigger}.")
                reflection, r_entry = reflect_step(
                    self.profiles[MANAGER], trigger, day_summary, day, ctx,
                    decay["manager"])
                reflections.append({"trigger": reflection.trigger, "text": reflection.text})
                day_entries.append(r_entry)

            threshold = rolling_sigma_threshold(
                pnl_history, cfg.backtest["feedback_window"],
                cfg.backtest["feedback_threshold_mult"])
            reporting = [aid for aid, m in insights.items()
                         if m.distilled_insight != NO_SIGNAL]
            send_feedback(decision, r_t, threshold, reporting, insights, day, ctx,
                          self.router, decay, self.analyst_ids)

            records.append(DayRecord(
                date=day,
                directions=dict(decision.directions),
                weights={t: decision.weights[t] for t in cfg.tickers},
                target_shares={t: float(shares[i]) for i, t in enumerate(cfg.tickers)},
                pnl=r_t,
                cvar=rho_t,
                alert=checked.alert,
                trigger=trigger,
                reflections=reflections,
                reasoning=decision.reasoning,
                insights={aid: m.distilled_insight for aid, m in insights.items()},
                cited_memory_ids=list(decision.cited_memory_ids),
            ))
            self._log_prompts(episode, day_entries)
            risk_state = checked
            prev_rho = rho_t


# ---------------------------------------------------------------------------
# train / test drivers
# ---------------------------------------------------------------------------

def _load_market(config: RunConfig) -> MarketData:
    return MarketData.load(
        config.price_paths, config.document_paths,
        range_start=config.train_start, range_end=config.test_end,
        momentum_window=config.data_ingest["momentum_window"],
    )


def train(config: RunConfig, gateway: LlmGateway, run_dir: str | Path,
          market: MarketData | None = None):
    """Run the training stage; returns (final prompts, trajectories, updates).

    From episode 2 on, each completed episode triggers a belief update
    comparing it with its predecessor; training stops at the episode cap or
    when the overlap/objective convergence rule fires. With ``resume`` set,
    episodes whose trajectory and checkpoint already exist are reloaded
    instead of re-run.
    """
    market = market if market is not None else _load_market(config)
    writer = RunWriter(run_dir)
    writer.write_config(config)
    engine = BacktestEngine(config, market, gateway, writer=writer)
    prompts = PromptSet.initial(engine.profiles)
    trajectories: list[Trajectory] = []
    updates = []
    objectives: list[float] = []
    taus: list[float] = []
    max_episodes = int(config.backtest["max_episodes"])
    start_episode = 1

    if config.backtest.get("resume"):
        start_episode, prompts, objectives, taus, trajectories = _resume_state(
            config, writer, engine, prompts)

    for k in range(start_episode, max_episodes + 1):
        trajectory = engine.run_episode(prompts, "train", k,
                                        config.train_start, config.train_end)
        trajectories.append(trajectory)
        objectives.append(trajectory.objective)
        writer.write_trajectory(k, trajectory)
        writer.write_prompt_log(k, engine.prompt_log.get(k, []))
        if k >= 2:
            update, prompts = compare_and_update(
                trajectories[-2], trajectories[-1],
                (objectives[-2], objectives[-1]),
                prompts, gateway, engine.analyst_ids,
                min_run=config.risk["min_run_length"],
                max_retries=config.llm["max_retries"])
            engine.belief_update_calls += 1
            updates.append(update)
            taus.append(update.learning_rate)
            writer.write_belief(k, update)
            engine.router.send(Message(sender=RISK_CONTROL, recipient=MANAGER,
                                       kind="belief_update", payload=update))
            for target in update.target_agents:
                if target != MANAGER:
                    engine.router.send(Message(sender=MANAGER, recipient=target,
                                               kind="belief_update", payload=update))
        writer.write_checkpoint(k, prompts, objectives, taus, engine.store)
        if convergence_check(taus, objectives,
                             tau_threshold=config.risk["convergence_tau"],
                             epsilon=config.risk["convergence_epsilon"],
                             max_episodes=max_episodes):
            break

    writer.write_prompt_set(prompts)
    writer.write_memory(engine.store)
    last = trajectories[-1]
    report = build_report(last.pnls(), config.backtest["capital"],
                          config.risk["cvar_alpha"], config.backtest["risk_free_daily"],
                          config.backtest["annualize_sharpe"],
                          config.backtest["discount_alpha"])
    writer.write_report(report)
    writer.write_metrics_csv(last.days, config.backtest["capital"])
    writer.write_summary("train_summary.json", {
        "episodes_run": len(trajectories),
        "objectives": objectives,
        "taus": taus,
        "belief_updates": len(updates),
        "belief_update_calls": engine.belief_update_calls,
        "message_count": engine.router.count(),
    })
    return prompts, trajectories, updates


def _resume_state(config: RunConfig, writer: RunWriter, engine: BacktestEngine,
                  prompts: PromptSet):
    """Reload the newest checkpoint so training continues after an abort."""
    alpha = config.backtest["discount_alpha"]
    last_done = 0
    for k in range(1, int(config.backtest["max_episodes"]) + 1):
        if (writer.run_dir / f"trajectory_{k}.jsonl").exists() and \
                (writer.run_dir / "state" / f"checkpoint_{k}.json").exists():
            last_done = k
    if last_done == 0:
        return 1, prompts, [], [], []
    payload = json.loads((writer.run_dir / "state" / f"checkpoint_{last_done}.json").read_text())
    prompts = PromptSet.from_dict(payload["prompts"])
    objectives = [float(x) for x in payload["objectives"]]
    taus = [float(x) for x in payload["taus"]]
    engine.store = MemoryStore.load_jsonl(
        writer.run_dir / "state" / f"memory_{last_done}.jsonl",
        calendar=engine.market.calendar)
    trajectories = [
        Trajectory.from_jsonl(writer.run_dir / f"trajectory_{k}.jsonl", k, alpha)
        for k in range(1, last_done + 1)
    ]
    return last_done + 1, prompts, objectives, taus, trajectories


def test(config: RunConfig, gateway: LlmGateway, run_dir: str | Path,
         market: MarketData | None = None):
    """Run the test stage from inherited training artifacts.

    The within-episode risk control stays active; the belief-update machinery
    is never invoked (the counter lands in test_summary.json as proof).
    Returns (trajectory, report).
    """
    train_dir = config.backtest.get("train_run_dir")
    if not train_dir:
        raise MissingTrainingArtifacts("backtest.train_run_dir is not configured")
    train_dir = Path(train_dir)
    prompt_path = train_dir / "prompts" / "final" / "prompt_set.json"
    memory_path = train_dir / "memory" / "snapshot.jsonl"
    if not prompt_path.exists() or not memory_path.exists():
        raise MissingTrainingArtifacts(
            f"missing training artifacts under {train_dir} "
            "(expected prompts/final/prompt_set.json and memory/snapshot.jsonl)")
    prompts = PromptSet.from_dict(json.loads(prompt_path.read_text()))
    market = market if market is not None else _load_market(config)
    writer = RunWriter(run_dir)
    writer.write_config(config)
    store = MemoryStore.load_jsonl(memory_path, calendar=market.calendar)
    engine = BacktestEngine(config, market, gateway, store=store, writer=writer)
    trajectory = engine.run_episode(prompts, "test", "test",
                                    config.test_start, config.test_end)
    writer.write_trajectory("test", trajectory)
    writer.write_prompt_log("test", engine.prompt_log.get("test", []))
    report = build_report(trajectory.pnls(), config.backtest["capital"],
                          config.risk["cvar_alpha"], config.backtest["risk_free_daily"],
                          config.backtest["annualize_sharpe"],
                          config.backtest["discount_alpha"])
    writer.write_report(report)
    writer.write_metrics_csv(trajectory.days, config.backtest["capital"])
    writer.write_memory(engine.store)
    writer.write_summary("test_summary.json", {
        "days": len(trajectory.days),
        "belief_update_calls": engine.belief_update_calls,
        "message_count": engine.router.count(),
    })
    return trajectory, report


def recompute_report(run_dir: str | Path, config: RunConfig) -> MetricsReport:
    """Rebuild report.json and metrics.csv from the newest trajectory on disk."""
    run_dir = Path(run_dir)
    candidates = [run_dir / "trajectory_test.jsonl"]
    candidates += sorted(run_dir.glob("trajectory_[0-9]*.jsonl"), reverse=True)
    path = next((p for p in candidates if p.exists()), None)
    if path is None:
        raise MissingTrajectory(f"no trajectory file in {run_dir}")
    tag = path.stem.replace("trajectory_", "")
    trajectory = Trajectory.from_jsonl(path, tag, config.backtest["discount_alpha"])
    writer = RunWriter(run_dir)
    report = build_report(trajectory.pnls(), config.backtest["capital"],
                          config.risk["cvar_alpha"], config.backtest["risk_free_daily"],
                          config.backtest["annualize_sharpe"],
                          config.backtest["discount_alpha"])
    writer.write_report(report)
    writer.write_metrics_csv(trajectory.days, config.backtest["capital"])
    return report

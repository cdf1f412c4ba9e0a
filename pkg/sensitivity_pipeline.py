"""
LangGraph Sensitivity Pipeline
Implements: Load Config → Build Model → Command (simulate | sens | variance-study | lambda-star | weak-sigma | mlmc | rr) → Emit Outputs
"""

import logging
import os
from typing import Any, Dict, List, Optional, TypedDict

from langgraph.graph import END, StateGraph

import settings
from engines import (
    EstimatorKind,
    EstimatorSpec,
    ExperimentConfig,
    InvalidParameter,
    MlmcEngine,
    MonteCarloEngine,
    RichardsonEngine,
    SensitivityError,
    fd_run,
)
from engines.extrapolation import RRJob, horizon_for_sigma
from engines.harness import (
    McJob,
    StudyResult,
    lambda_star_estimate,
    lambda_star_sweep,
    moment_profile,
    summary_payload,
    variance_vs_T_study,
    weak_convergence_study,
    write_csv,
    write_json,
)
from engines.mlmc import MlmcJob, level_variance_study, mlmc_complexity_study

logger = logging.getLogger("sdesens.pipeline")

COMMAND_NODES = {
    "simulate": "simulate",
    "sens": "sens",
    "variance-study": "variance_study",
    "lambda-star": "lambda_star",
    "weak-sigma": "weak_sigma",
    "mlmc": "mlmc",
    "rr": "rr",
}

# Config keys that change how a run executes but never what it computes.
EXECUTION_KEYS = ("workers", "out_dir", "write_csv")


class SensitivityState(TypedDict, total=False):
    """State carried through the sensitivity pipeline"""
    # Request
    command: str
    config_path: str
    overrides: Dict[str, Any]

    # Resolved experiment
    config: Any  # ExperimentConfig
    model: Any  # SdeModel
    params: Any  # ModelParams

    # Results
    result: Any  # StudyResult
    csv_key: str  # key into settings.CSV_HEADERS, empty for JSON-only commands
    outputs: List[str]

    # Pipeline state
    current_step: str
    pipeline_status: str  # "active", "completed", "error"
    error_message: str


class SensitivityPipeline:
    """LangGraph-based pipeline running one experiment command end to end"""

    def __init__(self):
        """Initialize the pipeline with its engines"""
        self.mc_engine = MonteCarloEngine()
        self.mlmc_engine = MlmcEngine()
        self.rr_engine = RichardsonEngine()

        self.workflow = self._create_workflow()

    def _create_workflow(self) -> StateGraph:
        """Create the command workflow"""
        workflow = StateGraph(SensitivityState)

        workflow.add_node("load_config", self._load_config_node)
        workflow.add_node("build_model", self._build_model_node)
        workflow.add_node("simulate", self._simulate_node)
        workflow.add_node("sens", self._sens_node)
        workflow.add_node("variance_study", self._variance_study_node)
        workflow.add_node("lambda_star", self._lambda_star_node)
        workflow.add_node("weak_sigma", self._weak_sigma_node)
        workflow.add_node("mlmc", self._mlmc_node)
        workflow.add_node("rr", self._rr_node)
        workflow.add_node("emit_outputs", self._emit_outputs_node)

        workflow.set_entry_point("load_config")

        workflow.add_conditional_edges(
            "load_config",
            self._should_continue_after_load_config,
            {
                "build_model": "build_model",
                END: END
            }
        )

        # Command routing
        workflow.add_conditional_edges(
            "build_model",
            self._should_continue_after_build_model,
            {**{node: node for node in COMMAND_NODES.values()}, END: END}
        )

        for node in COMMAND_NODES.values():
            workflow.add_conditional_edges(
                node,
                self._should_continue_after_command,
                {
                    "emit_outputs": "emit_outputs",
                    END: END
                }
            )

        workflow.add_edge("emit_outputs", END)
        return workflow.compile()

    # =========================================================================
    # NODES
    # =========================================================================

    def _fail(self, state: SensitivityState, error: Exception) -> SensitivityState:
        state["error_message"] = str(error)
        state["pipeline_status"] = "error"
        logger.error(settings.PIPELINE_ERROR_MESSAGE.format(error_message=error))
        return state

    def _load_config_node(self, state: SensitivityState) -> SensitivityState:
        """Node 1: Merge the config file and command-line overrides"""
        logger.debug("[load_config] resolving configuration")
        state["current_step"] = "load_config"
        try:
            command = state.get("command", "")
            if command not in COMMAND_NODES:
                raise InvalidParameter(f"unknown command '{command}'")
            path = state.get("config_path")
            base = ExperimentConfig.from_file(path) if path else ExperimentConfig()
            config = base.merged(state.get("overrides") or {})
            if config.study and config.study not in settings.STUDIES.get(command, ()):
                raise InvalidParameter(f"command '{command}' has no study '{config.study}'")
            state["config"] = config
        except (SensitivityError, OSError, ValueError, TypeError) as e:
            return self._fail(state, e)
        return state

    def _build_model_node(self, state: SensitivityState) -> SensitivityState:
        """Node 2: Build the model and its parameters"""
        state["current_step"] = "build_model"
        try:
            config = state["config"]
            model = config.build_model()
            state["model"] = model
            state["params"] = config.build_params(model)
            logger.debug(f"[build_model] {model.name} with {state['params']}")
        except SensitivityError as e:
            return self._fail(state, e)
        return state

    def _horizon(self, state: SensitivityState) -> float:
        config = state["config"]
        if config.T == "auto":
            return horizon_for_sigma(state["params"].sigma, t_max=config.t_max)
        return float(config.T)

    def _mc_job(self, state: SensitivityState, spec: EstimatorSpec, T: float) -> McJob:
        config = state["config"]
        return McJob(state["model"], state["params"], spec, T, config.policy(), config.paths, config.seed,
                     config.workers, config.batch_size, config.allow_blowups, config.clamp)

    def _run_command(self, state: SensitivityState, step: str, body) -> SensitivityState:
        state["current_step"] = step
        logger.info(f"[{step}] running")
        try:
            result, csv_key = body(state)
            state["result"] = result
            state["csv_key"] = csv_key
        except SensitivityError as e:
            return self._fail(state, e)
        return state

    def _simulate_node(self, state: SensitivityState) -> SensitivityState:
        """Plain observable E[phi(X_T)], or the fourth-moment profile"""
        def body(state):
            config = state["config"]
            if config.study == "moments":
                T = settings.MOMENT_HORIZON if config.T == "auto" else float(config.T)
                profile = moment_profile(state["model"], state["params"], T, config.paths, config.spacing,
                                         config.window, config.policy(), config.seed, config.batch_size)
                return StudyResult(profile.rows, estimate=profile.ratio, total_cost=profile.total_cost), "moments"
            T = self._horizon(state)
            run = self.mc_engine.run(self._mc_job(state, EstimatorSpec(EstimatorKind.VALUE), T))
            return StudyResult([], estimate=run.stats.mean, stderr=run.stats.stderr, total_cost=run.total_cost,
                               extra={"variance": run.stats.variance, "n": run.stats.n, "T": T}), ""
        return self._run_command(state, "simulate", body)

    def _sens_node(self, state: SensitivityState) -> SensitivityState:
        """One sensitivity estimate (any estimator kind, or the finite-difference oracle)"""
        def body(state):
            config = state["config"]
            T = self._horizon(state)
            policy = config.policy()
            if config.estimator == "fd":
                direction = None if config.direction is None else tuple(config.direction)
                fd = fd_run(state["model"], state["params"], T, policy, config.seed, config.fd_epsilon,
                            config.paths, config.fd_target, direction, config.batch_size)
                estimate, stderr, cost = fd.mean, fd.stderr, fd.cost
                n = config.paths - fd.dropped
                variance = stderr ** 2 * n
            else:
                run = self.mc_engine.run(self._mc_job(state, config.spec(), T))
                estimate, stderr, cost = run.stats.mean, run.stats.stderr, run.total_cost
                n, variance = run.stats.n, run.stats.variance
            extra = {"variance": variance, "n": n, "T": T, "h": policy.typical_step, "cost": cost}
            return StudyResult([], estimate=estimate, stderr=stderr, total_cost=cost, extra=extra), ""
        return self._run_command(state, "sens", body)

    def _variance_study_node(self, state: SensitivityState) -> SensitivityState:
        """Estimator variance over the T grid"""
        return self._run_command(state, "variance_study",
                                 lambda s: (variance_vs_T_study(s["config"]), "variance-study"))

    def _lambda_star_node(self, state: SensitivityState) -> SensitivityState:
        """Convergence speed lambda* of E[phi(X_t)]"""
        def body(state):
            config = state["config"]
            T_max = self._horizon(state)
            kwargs = dict(window=config.window, spacing=config.spacing, policy=config.policy(),
                          seed=config.seed, workers=config.workers, batch_size=config.batch_size)
            if config.study == "sweep":
                return lambda_star_sweep(state["model"], state["params"], config.sigma_grid, T_max,
                                         config.paths, **kwargs), "lambda-sweep"
            result = lambda_star_estimate(state["model"], state["params"], T_max, config.paths, **kwargs)
            return StudyResult(result.rows, result.fit, estimate=result.lambda_star,
                               total_cost=result.total_cost), "lambda-star"
        return self._run_command(state, "lambda_star", body)

    def _weak_sigma_node(self, state: SensitivityState) -> SensitivityState:
        """Weak error against the deterministic reference over the sigma grid"""
        def body(state):
            config = state["config"]
            result = weak_convergence_study(state["model"], state["params"], config.theta_grid, config.sigma_grid,
                                            config.spec(), config.paths, config.seed, config.policy(), config.T,
                                            workers=config.workers, batch_size=config.batch_size,
                                            t_max=config.t_max)
            return result, "weak-sigma"
        return self._run_command(state, "weak_sigma", body)

    def _mlmc_node(self, state: SensitivityState) -> SensitivityState:
        """Multilevel estimate, or the level-variance and complexity studies"""
        def body(state):
            config = state["config"]
            model, params, spec = state["model"], state["params"], config.spec()
            mlmc_config = config.mlmc_config()
            if config.study == "levels":
                rows = level_variance_study(model, params, spec, config.T_grid, mlmc_config, config.seed,
                                            config.paths, config.levels or [0, 1])
                return StudyResult(rows), "level-variance"
            T = self._horizon(state)
            if config.study == "complexity":
                rows = mlmc_complexity_study(model, params, spec, T, config.eps_grid or [config.eps],
                                             mlmc_config, config.seed)
                return StudyResult(rows, total_cost=int(sum(r["mlmc_cost"] for r in rows))), "mlmc-complexity"
            report = self.mlmc_engine.run(MlmcJob(model, params, spec, T, mlmc_config, config.seed))
            extra = {"alpha": report.alpha, "beta": report.beta, "gamma": report.gamma}
            return StudyResult(report.to_rows(), estimate=report.estimate, stderr=report.stderr,
                               total_cost=int(report.total_cost), extra=extra), "mlmc"
        return self._run_command(state, "mlmc", body)

    def _rr_node(self, state: SensitivityState) -> SensitivityState:
        """Richardson-Romberg extrapolation in the volatility"""
        def body(state):
            config = state["config"]
            job = RRJob(state["model"], state["params"], config.spec(), config.order, config.T, config.policy(),
                        config.paths, config.seed, config.batch_size, config.t_max)
            result = self.rr_engine.run(job)
            extra = {"order": result.scheme.order, "sigmas": list(result.scheme.sigmas), "T": result.T}
            return StudyResult(result.to_rows(), estimate=result.estimate, stderr=result.stderr,
                               total_cost=result.total_cost, extra=extra), "rr"
        return self._run_command(state, "rr", body)

    def _emit_outputs_node(self, state: SensitivityState) -> SensitivityState:
        """Final node: write <command>.json and, when the command has a table, <command>.csv"""
        state["current_step"] = "emit_outputs"
        config, result, command = state["config"], state["result"], state["command"]
        params = {k: v for k, v in config.to_dict().items() if k not in EXECUTION_KEYS}
        payload = summary_payload(command, params, result.estimate, result.stderr, result.fit,
                                  result.total_cost, config.seed, **result.extra)
        outputs = []
        try:
            outputs.append(write_json(os.path.join(config.out_dir, f"{command}.json"), payload))
            csv_key = state.get("csv_key", "")
            if config.write_csv and csv_key:
                outputs.append(write_csv(os.path.join(config.out_dir, f"{command}.csv"),
                                         settings.CSV_HEADERS[csv_key], result.rows))
        except OSError as e:
            return self._fail(state, e)
        state["outputs"] = outputs
        state["pipeline_status"] = "completed"
        for path in outputs:
            logger.info(f"[emit_outputs] wrote {path}")
        return state

    # =========================================================================
    # ROUTING
    # =========================================================================

    def _should_continue_after_load_config(self, state: SensitivityState) -> str:
        """Stop when the configuration could not be resolved"""
        if state.get("pipeline_status") == "error":
            return END
        return "build_model"

    def _should_continue_after_build_model(self, state: SensitivityState) -> str:
        """Route to the node of the requested command"""
        if state.get("pipeline_status") == "error":
            return END
        return COMMAND_NODES[state["command"]]

    def _should_continue_after_command(self, state: SensitivityState) -> str:
        """Emit outputs unless the command failed"""
        if state.get("pipeline_status") == "error":
            return END
        return "emit_outputs"

    def run_pipeline(self, command: str, overrides: Optional[Dict[str, Any]] = None,
                     config_path: Optional[str] = None) -> SensitivityState:
        """
        Run one command through the workflow.

        Args:
            command: One of settings.COMMANDS
            overrides: Config keys set on the command line (None values are ignored)
            config_path: Optional JSON config file

        Returns:
            The final pipeline state
        """
        initial_state: SensitivityState = {
            "command": command,
            "config_path": config_path or "",
            "overrides": dict(overrides or {}),
            "outputs": [],
            "csv_key": "",
            "current_step": "load_config",
            "pipeline_status": "active",
            "error_message": "",
        }
        return self.workflow.invoke(initial_state)

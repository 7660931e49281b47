"""Receding-horizon executor and evaluation reports.

At each decision point the action source proposes a chunk; the executor
realizes the first keyframe action through per-arm IK, interpolates to
the joint target with the environment's rate limit, applies the gripper
command on arrival, and repeats. IK failures trigger re-prediction (a
bounded number of times); every prediction is counted toward the
kinematic feasibility rate.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass

import numpy as np

from . import policy as pol
from . import tasks as tk
from .diffusion import make_schedule
from .errors import NoConvergence, Unreachable
from .kinematics import arm_pose_from_vector, ik_solve, split_theta, _arm_chains
from .tasks import TaskSpec, observe
from .training import Config, policy_shape


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    collisions: int
    ik_failures: int
    predictions: int
    feasible_predictions: int


def run_episode(spec: TaskSpec, seed: int, action_fn, cfg: Config) -> EpisodeResult:
    """Drive one episode with ``action_fn(obs_history) -> (m_chunk, 16)``."""
    model = tk.task_model(spec)
    chains = _arm_chains(model)
    state = tk.env_reset(spec, seed)
    decision_obs = [observe(state)]
    collisions = 0
    ik_failures = 0
    predictions = 0
    feasible = 0
    retries = 0

    def step_env(targets, grips):
        nonlocal state, collisions
        state = tk.env_step(state, targets, grips)
        if tk.self_collision_check(model, state.theta, spec.collision_clearance).colliding:
            collisions += 1

    while state.time < spec.step_budget and not state.succeeded:
        hist = decision_obs[-(cfg.history + 1):]
        while len(hist) < cfg.history + 1:
            hist.insert(0, hist[0])
        chunk = np.asarray(action_fn(hist))
        act = chunk[0]
        predictions += 1

        per_arm = split_theta(model, state.theta)
        targets = dict(per_arm)
        ok = True
        for arm in ("left", "right"):
            pose, _ = arm_pose_from_vector(act, arm)
            try:
                targets[arm] = ik_solve(chains[arm], pose, per_arm[arm],
                                        max_iters=cfg.ik_max_iters,
                                        pos_tol=cfg.ik_pos_tol, rot_tol=cfg.ik_rot_tol)
            except (Unreachable, NoConvergence):
                ok = False
        if ok:
            feasible += 1
            retries = 0
        else:
            ik_failures += 1
            retries += 1
            if retries > cfg.ik_retries:
                break
            continue  # re-predict with fresh noise

        grips_cmd = (act[7], act[15])
        tgt = np.concatenate([targets["left"], targets["right"]])
        start = state.theta.copy()
        for s in range(1, cfg.exec_substeps + 1):
            if state.time >= spec.step_budget or state.succeeded:
                break
            step_env(start + (tgt - start) * (s / cfg.exec_substeps), state.grippers)
        # settle: the rate limit may lag behind large interpolation steps
        settle = 0
        while (settle < 12 and state.time < spec.step_budget and not state.succeeded
               and float(np.max(np.abs(state.theta - tgt))) > 1e-9):
            step_env(tgt, state.grippers)
            settle += 1
        for _ in range(cfg.exec_hold):
            if state.time >= spec.step_budget or state.succeeded:
                break
            step_env(tgt, grips_cmd)
        if not state.succeeded and state.time < spec.step_budget:
            # make sure the gripper command lands even when holds ran out
            if tuple(1.0 if g > 0.5 else 0.0 for g in grips_cmd) != state.grippers:
                step_env(tgt, grips_cmd)
        decision_obs.append(observe(state))

    return EpisodeResult(
        success=bool(state.succeeded), steps=state.time, collisions=collisions,
        ik_failures=ik_failures, predictions=predictions, feasible_predictions=feasible,
    )


def policy_action_fn(params: dict[str, np.ndarray], cfg: Config, spec: TaskSpec,
                     rng: np.random.Generator):
    """Action source sampling from the trained diffuser."""
    model = tk.task_model(spec)
    shape = policy_shape(cfg, model)
    sched = make_schedule(cfg.diffusion_k, cfg.beta_start, cfg.beta_end)

    def fn(obs_history):
        chunk = pol.predict(obs_history, params, sched, shape, model, spec.workspace,
                            rng, reverse_steps=cfg.reverse_steps or None,
                            zero_hr=cfg.zero_hr, zero_hg=cfg.zero_hg)
        return chunk.actions

    return fn


def replay_action_fn(demo: tk.Demonstration):
    """Action source that replays a demonstration's keyframe actions."""
    actions = [demo.steps[k].ee for k in demo.keyframes]
    state = {"i": 0}

    def fn(obs_history):
        act = actions[min(state["i"], len(actions) - 1)]
        state["i"] += 1
        return act[None, :]

    return fn


def rollout(spec: TaskSpec, params: dict[str, np.ndarray], cfg: Config,
            episode_seed: int, rng_seed) -> EpisodeResult:
    rng = np.random.default_rng(rng_seed)
    return run_episode(spec, episode_seed, policy_action_fn(params, cfg, spec, rng), cfg)


def _episode_job(args):
    params, cfg_dict, episode = args
    cfg = Config.from_dict(cfg_dict)
    spec = tk.get_task(cfg.task)
    return episode, rollout(spec, params, cfg, *episode_seeds(cfg.seed, episode))


def episode_seeds(base_seed: int, episode: int) -> tuple[int, list]:
    """(env seed, predictor rng seed material) for one evaluation episode."""
    return base_seed * 1_000_003 + episode, [base_seed, episode]


def evaluate(params: dict[str, np.ndarray], cfg: Config, episodes: int,
             seed: int, workers: int = 1) -> dict:
    """Run evaluation episodes and build the (deterministic) run report.

    Episode e uses env seed derived from (seed, e), so reports are
    byte-identical across runs and worker counts. Wall-clock timing is
    returned separately by the CLI, never inside the report.
    """
    spec = tk.get_task(cfg.task)
    eval_cfg_dict = cfg.to_dict()
    eval_cfg = Config.from_dict(eval_cfg_dict)
    eval_cfg.seed = seed
    results: list[tuple[int, EpisodeResult]] = []
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            jobs = [(params, eval_cfg.to_dict(), e) for e in range(episodes)]
            results = list(pool.imap_unordered(_episode_job, jobs))
    else:
        for e in range(episodes):
            results.append((e, rollout(spec, params, eval_cfg,
                                       *episode_seeds(seed, e))))
    results.sort(key=lambda r: r[0])

    rows = []
    for e, r in results:
        rows.append({
            "episode": e, "success": r.success, "steps": r.steps,
            "collisions": r.collisions, "ik_failures": r.ik_failures,
            "predictions": r.predictions, "feasible_predictions": r.feasible_predictions,
        })
    n = max(len(rows), 1)
    total_preds = sum(r["predictions"] for r in rows)
    aggregates = {
        "success_rate": sum(r["success"] for r in rows) / n,
        "mean_collisions": sum(r["collisions"] for r in rows) / n,
        "mean_ik_failures": sum(r["ik_failures"] for r in rows) / n,
        "feasibility_rate": (sum(r["feasible_predictions"] for r in rows) / total_preds
                             if total_preds else 0.0),
        "mean_steps": sum(r["steps"] for r in rows) / n,
    }
    return {
        "schema": "kinediff-report/1",
        "task": spec.name,
        "seed": seed,
        "episodes": rows,
        "aggregates": aggregates,
        "config": cfg.to_dict(),
    }


def timed_evaluate(*args, **kwargs) -> tuple[dict, float]:
    t0 = _time.perf_counter()
    report = evaluate(*args, **kwargs)
    return report, _time.perf_counter() - t0

"""Training: config, dataset assembly from demonstrations, the AdamW
optimizer with warmup + cosine decay, the batched gradient step over the
combined loss, and checkpoint persistence.

Checkpoints are a directory holding ``manifest.json`` (config echo plus
a parameter table of name/shape/offset) and ``params.bin``, the raw
little-endian float64 blob.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import diffusion as diff
from . import policy as pol
from .autodiff import Tape
from .errors import IoError, NonFiniteLoss, SchemaViolation
from .graph import build_spatial_graph, build_st_graph, feature_width, normalized_adjacency
from .tasks import Demonstration, get_task, object_state_width, task_model
from .urdf import RobotModel

logger = logging.getLogger(__name__)

CKPT_SCHEMA = "kinediff-ckpt/1"


@dataclass
class Config:
    """Training configuration; defaults mirror the reference settings."""

    model: str = "planar_bimanual_3dof"
    task: str = "lift_plate_2d"
    seed: int = 0
    demos: str = ""
    history: int = 2
    m_chunk: int = 2
    lam: float = 0.9
    diffusion_k: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    reverse_steps: int = 0  # 0 = full K-step reverse loop
    lr: float = 2e-4
    weight_decay: float = 1e-6
    warmup_steps: int = 5000
    total_steps: int = 150000
    batch_size: int = 64
    zero_hr: bool = False
    zero_hg: bool = False
    exec_substeps: int = 8
    exec_hold: int = 2
    ik_pos_tol: float = 0.012
    ik_rot_tol: float = 0.1
    ik_max_iters: int = 150
    ik_retries: int = 3

    _GROUPS = {
        "diffusion": {"K": "diffusion_k", "beta_start": "beta_start",
                      "beta_end": "beta_end", "reverse_steps": "reverse_steps"},
        "optimizer": {"lr": "lr", "weight_decay": "weight_decay",
                      "warmup_steps": "warmup_steps", "total_steps": "total_steps",
                      "batch_size": "batch_size"},
        "ablations": {"zero_hr": "zero_hr", "zero_hg": "zero_hg"},
        "executor": {"substeps": "exec_substeps", "hold": "exec_hold",
                     "ik_pos_tol": "ik_pos_tol", "ik_rot_tol": "ik_rot_tol",
                     "ik_max_iters": "ik_max_iters", "ik_retries": "ik_retries"},
    }

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        d = dict(d)
        kwargs = {}
        if "lambda" in d:
            kwargs["lam"] = float(d.pop("lambda"))
        for group, mapping in cls._GROUPS.items():
            sub = d.pop(group, {})
            for key, attr in mapping.items():
                if key in sub:
                    kwargs[attr] = sub[key]
        for key, val in d.items():
            if not hasattr(cls, key) and key not in cls.__dataclass_fields__:
                raise SchemaViolation(f"unknown config key {key!r}")
            kwargs[key] = val
        return cls(**kwargs)

    def to_dict(self) -> dict:
        flat = asdict(self)
        out = {"lambda": flat.pop("lam")}
        for group, mapping in self._GROUPS.items():
            out[group] = {key: flat.pop(attr) for key, attr in mapping.items()}
        out.update(flat)
        return out

    @classmethod
    def load(cls, path: str) -> "Config":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        except OSError as exc:
            raise IoError(str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"config {path}: {exc}") from exc


@dataclass(eq=False)
class TrainSample:
    """One decision point: inputs plus keyframe targets."""

    obs_flat: np.ndarray       # ((history+1) * obs_width,)
    instruction_id: int
    graph_features: np.ndarray  # (m * T, D_f)
    a0_chunk: np.ndarray       # (16 * m_chunk,)
    a_joint: np.ndarray        # (m,)
    obs_history: list = field(default_factory=list)


def policy_shape(cfg: Config, model: RobotModel) -> pol.PolicyShape:
    spec = get_task(cfg.task)
    return pol.PolicyShape(
        m=model.m,
        obs_width=pol.obs_width(model, object_state_width(spec)),
        history=cfg.history,
        m_chunk=cfg.m_chunk,
        d_f=feature_width(model),
    )


def build_samples(demos: list[Demonstration], cfg: Config, model: RobotModel) -> list[TrainSample]:
    """Decision points are the start plus every non-final keyframe; the
    targets are the next m_chunk keyframe pose vectors (repeating the last
    one when the demo runs out) and the next keyframe's joint vector."""
    spec = get_task(cfg.task)
    workspace = spec.workspace
    samples: list[TrainSample] = []
    for demo in demos:
        kfs = demo.keyframes
        last = kfs[-1]
        decisions = sorted(set([0] + [k for k in kfs if k != last]))
        for pos, d in enumerate(decisions):
            hist_idx = decisions[max(0, pos - cfg.history):pos + 1]
            while len(hist_idx) < cfg.history + 1:
                hist_idx.insert(0, hist_idx[0])
            obs_hist = [demo.steps[i].obs for i in hist_idx]
            nexts = [k for k in kfs if k > d][:cfg.m_chunk]
            while len(nexts) < cfg.m_chunk:
                nexts.append(nexts[-1] if nexts else last)
            a0 = np.concatenate([demo.steps[k].ee for k in nexts])
            slices = [build_spatial_graph(model, o.joint_config, workspace) for o in obs_hist]
            st = build_st_graph(slices, len(slices))
            samples.append(TrainSample(
                obs_flat=np.concatenate([pol.flatten_observation(o) for o in obs_hist]),
                instruction_id=obs_hist[-1].instruction_id,
                graph_features=st.features,
                a0_chunk=a0,
                a_joint=demo.steps[nexts[0]].joint_config.copy(),
                obs_history=obs_hist,
            ))
    return samples


def st_adjacency(model: RobotModel, cfg: Config) -> np.ndarray:
    """The (shared) normalized ST-graph adjacency for this config."""
    spec = get_task(cfg.task)
    theta0 = np.zeros(model.m)
    slices = [build_spatial_graph(model, theta0, spec.workspace)] * (cfg.history + 1)
    st = build_st_graph(slices, cfg.history + 1)
    return normalized_adjacency(st.nodes, st.edges)


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-6, warmup_steps: int = 5000,
                 total_steps: int = 150000):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_at(self, t: int) -> float:
        if self.warmup_steps > 0 and t <= self.warmup_steps:
            return self.lr * t / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        frac = min(max(t - self.warmup_steps, 0) / span, 1.0)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        self.t += 1
        lr_t = self.lr_at(self.t)
        for name, g in grads.items():
            p = params[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** self.t)
            vhat = v / (1.0 - self.b2 ** self.t)
            p -= lr_t * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)
        return lr_t


def train_step(batch: list[TrainSample], params: dict[str, np.ndarray],
               sched: diff.NoiseSchedule, opt: AdamW, cfg: Config,
               model: RobotModel, a_hat: np.ndarray,
               rng: np.random.Generator, shape: pol.PolicyShape) -> dict[str, float]:
    """One gradient step over a batch; returns the loss values."""
    tape = Tape()
    pv = pol.params_to_vars(params, tape)

    obs_flat = np.stack([s.obs_flat for s in batch])
    instr = [s.instruction_id for s in batch]
    a0 = np.stack([s.a0_chunk for s in batch])
    a_joint_true = np.stack([s.a_joint for s in batch])

    h_b = pol.encode_batch(obs_flat, instr, pv, shape)
    h_g = pol.gcn_batch([s.graph_features for s in batch], a_hat, pv, zero_hg=cfg.zero_hg)
    a_joint = pol.joint_head(h_b, h_g, pv)
    h_r = pol.reference_batch(a_joint, model, zero_hr=cfg.zero_hr)
    cond = ad.concat([h_b, h_g, h_r], axis=1)

    ks = [int(k) for k in rng.integers(1, sched.K + 1, size=len(batch))]
    eps = rng.standard_normal(a0.shape)
    a_k = np.stack([diff.add_noise(a0[i], ks[i], eps[i], sched) for i in range(len(batch))])
    pred = pol.denoise_batch(a_k, ks, cond, pv, shape)

    l_ee = diff.mse(a0, pred)
    l_joint = diff.mse(a_joint_true, a_joint)
    loss = diff.loss_total(l_ee, l_joint, cfg.lam)
    values = {"loss": float(loss.value), "loss_ee": float(l_ee.value),
              "loss_joint": float(l_joint.value)}
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLoss(f"step {opt.t + 1}: {values}")

    grads = ad.backward(loss)
    grad_by_name = {name: grads[var.idx] for name, var in pv.items()}
    values["lr"] = opt.step(params, grad_by_name)
    return values


def train(cfg: Config, demos: list[Demonstration], out_dir: str | None = None,
          log_every: int = 100, on_step=None) -> dict[str, np.ndarray]:
    """Full training run; returns the trained parameters.

    When ``out_dir`` is given, writes the checkpoint plus ``train_log.csv``
    with per-step loss values.
    """
    model = task_model(get_task(cfg.task))
    shape = policy_shape(cfg, model)
    samples = build_samples(demos, cfg, model)
    if not samples:
        raise SchemaViolation("no training samples built from demos")
    params = pol.init_params(shape, seed=cfg.seed)
    logger.info("policy has %d parameters over %d tensors",
                pol.param_count(params), len(params))
    print(f"parameters: {pol.param_count(params)}", flush=True)

    sched = diff.make_schedule(cfg.diffusion_k, cfg.beta_start, cfg.beta_end)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                warmup_steps=cfg.warmup_steps, total_steps=cfg.total_steps)
    a_hat = st_adjacency(model, cfg)
    rng = np.random.default_rng(cfg.seed)

    log_rows = []
    for step in range(1, cfg.total_steps + 1):
        idx = rng.integers(0, len(samples), size=min(cfg.batch_size, len(samples)))
        batch = [samples[i] for i in idx]
        values = train_step(batch, params, sched, opt, cfg, model, a_hat, rng, shape)
        log_rows.append((step, values["loss"], values["loss_ee"], values["loss_joint"],
                         values["lr"]))
        if on_step is not None:
            on_step(step, values)
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.5f (ee %.5f joint %.5f)", step,
                        values["loss"], values["loss_ee"], values["loss_joint"])

    if out_dir is not None:
        save_checkpoint(out_dir, params, cfg)
        with open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8") as f:
            f.write("step,loss,loss_ee,loss_joint,lr\n")
            for row in log_rows:
                f.write(",".join(repr(v) for v in row) + "\n")
    return params


# --- checkpoints ---

def save_checkpoint(out_dir: str, params: dict[str, np.ndarray], cfg: Config) -> None:
    os.makedirs(out_dir, exist_ok=True)
    names = sorted(params)
    offset = 0
    table = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"schema": CKPT_SCHEMA, "config": cfg.to_dict(),
                "blob": "params.bin", "dtype": "<f8", "params": table}
    try:
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(os.path.join(out_dir, "params.bin"), "wb") as f:
            f.write(b"".join(blobs))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_checkpoint(ckpt_dir: str) -> tuple[dict[str, np.ndarray], Config]:
    try:
        with open(os.path.join(ckpt_dir, "manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        with open(os.path.join(ckpt_dir, "params.bin"), "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"manifest: {exc}") from exc
    if manifest.get("schema") != CKPT_SCHEMA:
        raise SchemaViolation(f"unexpected checkpoint schema {manifest.get('schema')!r}")
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape)
        params[entry["name"]] = arr.copy()
    cfg = Config.from_dict(manifest["config"])
    return params, cfg

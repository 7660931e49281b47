"""The conditional action diffuser: observation encoder with FiLM
fusion, graph encoder hookup, joint head with its differentiable-FK
reference, the x0-predicting denoiser, and chunked action prediction.

Networks run on the autodiff tape; the batched entry points operate on
(B, .) matrices while the per-sample graph and FK paths loop inside the
batch. Parameters live in a flat name -> array dict.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffusion as diff
from .autodiff import Tape, Var
from .errors import HistoryLengthMismatch, ShapeMismatch
from .graph import (
    GCNParams,
    Box,
    build_spatial_graph,
    build_st_graph,
    feature_width,
    gcn_forward,
    normalized_adjacency,
)
from .kinematics import dfk, normalize_action
from .tasks import Observation
from .urdf import RobotModel

EMBED_DIM = 512      # instruction embedding width
ENC_HIDDEN = 64      # observation encoder width (H_B)
FILM_LAYERS = 3
GCN_HIDDEN = 128
DENOISER_HIDDEN = 256
DENOISER_LAYERS = 3
STEP_EMBED_DIM = 32
POSE_REF_WIDTH = 14  # two arms, position 3 + quaternion 4 each
ACTION_WIDTH = 16


@dataclass
class PolicyShape:
    """Widths derived from the model, task, and config."""

    m: int
    obs_width: int        # one flattened observation
    history: int          # historical observations (n); input is n+1 obs
    m_chunk: int
    vocab: int = 8
    d_f: int = 0          # graph feature width

    @property
    def action_dim(self) -> int:
        return ACTION_WIDTH * self.m_chunk

    @property
    def encoder_in(self) -> int:
        return self.obs_width * (self.history + 1)

    @property
    def cond_dim(self) -> int:
        return ENC_HIDDEN + GCN_HIDDEN + POSE_REF_WIDTH

    @property
    def denoiser_in(self) -> int:
        return self.action_dim + STEP_EMBED_DIM + self.cond_dim


def flatten_observation(obs: Observation) -> np.ndarray:
    """Numeric view of one observation; the instruction id stays separate."""
    return np.concatenate([
        [obs.timestep / 100.0],
        obs.joint_config,
        obs.ee_poses,
        obs.object_state,
    ])


def obs_width(model: RobotModel, object_state_width: int) -> int:
    return 1 + model.m + ACTION_WIDTH + object_state_width


def init_params(shape: PolicyShape, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameter dict. FiLM blocks start as identity modulation."""
    rng = np.random.default_rng(seed)

    def he(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))

    params: dict[str, np.ndarray] = {}
    params["embed"] = rng.normal(0.0, 1.0, (shape.vocab, EMBED_DIM))
    params["enc.w1"] = he(shape.encoder_in, ENC_HIDDEN)
    params["enc.b1"] = np.zeros(ENC_HIDDEN)
    params["enc.w2"] = he(ENC_HIDDEN, ENC_HIDDEN)
    params["enc.b2"] = np.zeros(ENC_HIDDEN)
    for i in range(FILM_LAYERS):
        params[f"film{i}.wg"] = rng.normal(0.0, 0.01, (EMBED_DIM, ENC_HIDDEN))
        params[f"film{i}.bg"] = np.ones(ENC_HIDDEN)
        params[f"film{i}.wb"] = rng.normal(0.0, 0.01, (EMBED_DIM, ENC_HIDDEN))
        params[f"film{i}.bb"] = np.zeros(ENC_HIDDEN)
    gcn = GCNParams.create(shape.d_f, GCN_HIDDEN, 4, rng)
    for i, (w, b) in enumerate(zip(gcn.weights, gcn.biases)):
        params[f"gcn{i}.w"] = w
        params[f"gcn{i}.b"] = b
    params["joint.w"] = he(ENC_HIDDEN + GCN_HIDDEN, shape.m)
    params["joint.b"] = np.zeros(shape.m)
    dims = [shape.denoiser_in] + [DENOISER_HIDDEN] * DENOISER_LAYERS
    for i in range(DENOISER_LAYERS):
        params[f"den.w{i}"] = he(dims[i], dims[i + 1])
        params[f"den.b{i}"] = np.zeros(dims[i + 1])
    params["den.wout"] = rng.normal(0.0, 0.01, (DENOISER_HIDDEN, shape.action_dim))
    params["den.bout"] = np.zeros(shape.action_dim)
    return params


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def params_to_vars(params: dict[str, np.ndarray], tape: Tape) -> dict[str, Var]:
    return {name: tape.leaf(arr) for name, arr in params.items()}


def step_embedding(k: int, dim: int = STEP_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step index."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _instruction_rows(pv: dict[str, Var], ids: list[int], vocab: int) -> Var:
    """(B, EMBED_DIM) instruction embeddings via a one-hot gather, so the
    table still receives gradients."""
    onehot = np.zeros((len(ids), vocab))
    for r, i in enumerate(ids):
        if not 0 <= i < vocab:
            raise ShapeMismatch(f"instruction id {i} outside vocabulary {vocab}")
        onehot[r, i] = 1.0
    return ad.matmul(pv["embed"].tape.const(onehot), pv["embed"])


def encode_batch(obs_flat: np.ndarray, instr_ids: list[int],
                 pv: dict[str, Var], shape: PolicyShape) -> Var:
    """Fused observation encoding H_B for a batch, shape (B, 64)."""
    tape = pv["enc.w1"].tape
    if obs_flat.shape[1] != shape.encoder_in:
        raise HistoryLengthMismatch(
            f"flattened width {obs_flat.shape[1]} != expected {shape.encoder_in}")
    x = tape.const(obs_flat)
    h = ad.leaky_relu(ad.matmul(x, pv["enc.w1"]) + pv["enc.b1"])
    h = ad.matmul(h, pv["enc.w2"]) + pv["enc.b2"]
    e_t = _instruction_rows(pv, instr_ids, shape.vocab)
    for i in range(FILM_LAYERS):
        gamma = ad.matmul(e_t, pv[f"film{i}.wg"]) + pv[f"film{i}.bg"]
        beta = ad.matmul(e_t, pv[f"film{i}.wb"]) + pv[f"film{i}.bb"]
        h = ad.leaky_relu(gamma * h + beta)
    return h


def encode_observation(obs_history: list[Observation], pv: dict[str, Var],
                       shape: PolicyShape) -> Var:
    """Single-sample H_B of width 64 from n+1 observations, oldest first."""
    if len(obs_history) != shape.history + 1:
        raise HistoryLengthMismatch(
            f"need {shape.history + 1} observations, got {len(obs_history)}")
    flat = np.concatenate([flatten_observation(o) for o in obs_history])[None, :]
    h = encode_batch(flat, [obs_history[-1].instruction_id], pv, shape)
    return ad.reshape(h, (ENC_HIDDEN,))


def _graph_prop(h: Var, a_hat: np.ndarray, batch: int, nodes: int) -> Var:
    """Apply the shared normalized adjacency to a (B*N, F) node stack.

    Fused (einsum) twin of the per-graph matmul in graph.gcn_forward;
    backward applies the transposed adjacency. Parity with gcn_forward is
    pinned by tests.
    """
    def forward(hv):
        f = hv.shape[1]
        return np.einsum("ij,bjf->bif", a_hat, hv.reshape(batch, nodes, f),
                         optimize=True).reshape(batch * nodes, f)

    def backward(input_vals, out, grad):
        f = grad.shape[1]
        g = np.einsum("ji,bjf->bif", a_hat, grad.reshape(batch, nodes, f),
                      optimize=True).reshape(batch * nodes, f)
        return (g,)

    return ad.custom([h], forward, backward)


def gcn_batch(feature_rows: list[np.ndarray], a_hat: np.ndarray,
              pv: dict[str, Var], zero_hg: bool = False) -> Var:
    """(B, 128) graph embeddings over a shared adjacency.

    All samples propagate in one fused stack; the mean-pool per graph is
    a constant block matrix.
    """
    tape = pv["gcn0.w"].tape
    b = len(feature_rows)
    if zero_hg:
        return tape.const(np.zeros((b, GCN_HIDDEN)))
    nodes = feature_rows[0].shape[0]
    h = tape.const(np.vstack(feature_rows))
    for i in range(4):
        h = ad.leaky_relu(
            ad.matmul(_graph_prop(h, a_hat, b, nodes), pv[f"gcn{i}.w"]) + pv[f"gcn{i}.b"])
    pool = np.zeros((b, b * nodes))
    for r in range(b):
        pool[r, r * nodes:(r + 1) * nodes] = 1.0 / nodes
    return ad.matmul(tape.const(pool), h)


def joint_head(h_b: Var, h_g: Var, pv: dict[str, Var]) -> Var:
    """Affine projection of [H_B, H_G] to the joint configuration."""
    single = len(h_b.shape) == 1
    if single:
        h_b = ad.reshape(h_b, (1, h_b.shape[0]))
        h_g = ad.reshape(h_g, (1, h_g.shape[0]))
    if h_b.shape[1] != ENC_HIDDEN or h_g.shape[1] != GCN_HIDDEN:
        raise ShapeMismatch(f"joint_head widths {h_b.shape} {h_g.shape}")
    out = ad.matmul(ad.concat([h_b, h_g], axis=1), pv["joint.w"]) + pv["joint.b"]
    return ad.reshape(out, (out.shape[1],)) if single else out


def reference(a_joint: Var, model: RobotModel) -> Var:
    """Pose reference H_R for one joint prediction; delegates to dfk."""
    return dfk(a_joint, model)


def reference_batch(a_joint: Var, model: RobotModel, zero_hr: bool = False) -> Var:
    """(B, 14) pose references, one fused FK replay per row."""
    tape = a_joint.tape
    b = a_joint.shape[0]
    if zero_hr:
        return tape.const(np.zeros((b, POSE_REF_WIDTH)))
    from .kinematics import dfk_fast

    rows = []
    for r in range(b):
        row = ad.reshape(ad.slice_(a_joint, 0, r, r + 1), (a_joint.shape[1],))
        rows.append(ad.reshape(dfk_fast(row, model), (1, POSE_REF_WIDTH)))
    return ad.concat(rows, axis=0)


def denoise_batch(a_k: np.ndarray, ks: list[int], cond: Var,
                  pv: dict[str, Var], shape: PolicyShape) -> Var:
    """x0 prediction for a batch of noisy chunks at (possibly) mixed steps."""
    tape = pv["den.w0"].tape
    if a_k.shape != (len(ks), shape.action_dim):
        raise ShapeMismatch(f"a_k shape {a_k.shape}")
    if cond.shape != (len(ks), shape.cond_dim):
        raise ShapeMismatch(f"cond shape {cond.shape}")
    emb = np.stack([step_embedding(k) for k in ks])
    h = ad.concat([tape.const(a_k), tape.const(emb), cond], axis=1)
    for i in range(DENOISER_LAYERS):
        h = ad.leaky_relu(ad.matmul(h, pv[f"den.w{i}"]) + pv[f"den.b{i}"])
    return ad.matmul(h, pv["den.wout"]) + pv["den.bout"]


def denoise(a_k: np.ndarray, k: int, cond: Var, pv: dict[str, Var],
            shape: PolicyShape) -> Var:
    """Single-sample denoiser over [a_k || step embedding || H_B, H_G, H_R]."""
    a_k = np.asarray(a_k, dtype=np.float64).reshape(-1)
    if cond.shape == (shape.cond_dim,):
        cond = ad.reshape(cond, (1, shape.cond_dim))
    out = denoise_batch(a_k[None, :], [k], cond, pv, shape)
    return ad.reshape(out, (shape.action_dim,))


def build_condition(obs_history: list[Observation], pv: dict[str, Var],
                    shape: PolicyShape, model: RobotModel, workspace: Box,
                    zero_hr: bool = False, zero_hg: bool = False) -> Var:
    """C = [H_B, H_G, H_R] for one decision point, shape (1, cond_dim)."""
    if len(obs_history) != shape.history + 1:
        raise HistoryLengthMismatch(
            f"need {shape.history + 1} observations, got {len(obs_history)}")
    flat = np.concatenate([flatten_observation(o) for o in obs_history])[None, :]
    h_b = encode_batch(flat, [obs_history[-1].instruction_id], pv, shape)
    slices = [build_spatial_graph(model, o.joint_config, workspace) for o in obs_history]
    st = build_st_graph(slices, len(slices))
    a_hat = normalized_adjacency(st.nodes, st.edges)
    h_g = gcn_batch([st.features], a_hat, pv, zero_hg=zero_hg)
    a_joint = joint_head(h_b, h_g, pv)
    h_r = reference_batch(a_joint, model, zero_hr=zero_hr)
    return ad.concat([h_b, h_g, h_r], axis=1)


@dataclass
class ActionChunk:
    """m_chunk consecutive keyframe actions, each a bimanual pose vector."""

    actions: np.ndarray                       # (m_chunk, 16), normalized
    quat_fallback: list = field(default_factory=list)

    def __len__(self):
        return self.actions.shape[0]


def predict(obs_history: list[Observation], params: dict[str, np.ndarray],
            sched, shape: PolicyShape, model: RobotModel, workspace: Box,
            rng: np.random.Generator, reverse_steps: int | None = None,
            zero_hr: bool = False, zero_hg: bool = False) -> ActionChunk:
    """Sample an action chunk by running the reverse loop under C."""
    tape = Tape()
    pv = params_to_vars(params, tape)
    cond = build_condition(obs_history, pv, shape, model, workspace,
                           zero_hr=zero_hr, zero_hg=zero_hg)

    def denoise_fn(a_k, k):
        return denoise(a_k, k, cond, pv, shape).value

    a0 = diff.reverse_sample(denoise_fn, sched, shape.action_dim, rng,
                             reverse_steps=reverse_steps)
    actions = np.zeros((shape.m_chunk, ACTION_WIDTH))
    fallback = []
    for c in range(shape.m_chunk):
        vec, meta = normalize_action(a0[c * ACTION_WIDTH:(c + 1) * ACTION_WIDTH])
        actions[c] = vec
        fallback.append(meta["fallback_quat"])
    return ActionChunk(actions=actions, quat_fallback=fallback)

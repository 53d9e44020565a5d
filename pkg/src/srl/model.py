"""Video object-centric network: encoder, slot attention, broadcast decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    num_slots: int = 5
    slot_dim: int = 32
    enc_dim: int = 32
    proj_dim: int = 16
    backbone_dim: int = 32
    hidden_dim: int = 64
    patch_size: int = 8
    num_patches: int = 49
    n_iters: int = 2
    first_frame_iters: int = 3
    color_gain: float = 3.0
    positional: bool = True


@dataclass
class ModelOutput:
    backbone: Tensor  # [T, N, D_b], detached
    encoded: Tensor  # [T, N, D_e]
    slots: Tensor  # [T, S, D_s]
    attn: Tensor  # [S, T, N]
    mask: Tensor  # [S, T, N]
    decoded: Tensor  # [T, N, D_b]
    per_slot: Tensor  # [S, T, N, D_b]


@dataclass
class Projections:
    z: Tensor
    y: Tensor
    v: Tensor


@dataclass
class PseudoLabels:
    l_attn: np.ndarray
    l_mask: np.ndarray


# ---------------------------------------------------------------------------
# frozen backbone substitute


def make_embedder(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded random patch projection; never trained."""
    rng = np.random.default_rng([seed, 0xB0B])
    p = cfg.patch_size
    n_pos = 2 if cfg.positional else 0
    n_proj = cfg.backbone_dim - 3 - n_pos
    if n_proj < 1:
        raise ValueError(f"backbone_dim {cfg.backbone_dim} too small for colour/positional channels")
    w = rng.normal(0.0, 1.0 / np.sqrt(p * p * 3), size=(p * p * 3, n_proj))
    return {"w_pix": w, "color_gain": np.array(cfg.color_gain)}


def patchify(frames: np.ndarray, p: int) -> np.ndarray:
    """[T, H, W, 3] -> [T, N, p*p*3] with patches in row-major grid order."""
    t, h, w, c = frames.shape
    if h % p or w % p:
        raise ValueError(f"frame size H={h}, W={w} not divisible by patch size p={p}")
    x = frames.reshape(t, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(t, (h // p) * (w // p), p * p * c)


def extract_backbone_features(frames: np.ndarray, embedder: dict, cfg: ModelConfig) -> Tensor:
    p = cfg.patch_size
    patches = patchify(np.asarray(frames, dtype=np.float64), p)
    proj = patches @ embedder["w_pix"]
    mean_color = patches.reshape(*patches.shape[:2], p * p, 3).mean(axis=2) * embedder["color_gain"]
    blocks = [proj, mean_color]
    if cfg.positional:
        gh, gw = frames.shape[1] // p, frames.shape[2] // p
        yy, xx = np.meshgrid(np.linspace(-1, 1, gh), np.linspace(-1, 1, gw), indexing="ij")
        pos = np.stack([yy.ravel(), xx.ravel()], axis=-1)
        blocks.append(np.broadcast_to(pos, (patches.shape[0], *pos.shape)))
    return Tensor(np.concatenate(blocks, axis=-1))


# ---------------------------------------------------------------------------
# trainable parameters


def _dense(rng, n_in, n_out, gain=1.0):
    lim = gain * np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def fourier_positions(n: int, dim: int, rng: np.random.Generator, bandwidth: float = 2.0) -> np.ndarray:
    """Random Fourier features of the square patch grid's coordinates, [n, dim]."""
    side = int(round(np.sqrt(n)))
    if side * side != n:
        return rng.normal(0, 1, (n, dim))
    yy, xx = np.meshgrid(np.linspace(-1, 1, side), np.linspace(-1, 1, side), indexing="ij")
    coords = np.stack([yy.ravel(), xx.ravel()], axis=-1)
    freqs = rng.normal(0, bandwidth, (2, dim))
    phase = rng.uniform(0, 2 * np.pi, dim)
    return np.sqrt(2.0) * np.sin(coords @ freqs + phase)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 0x5107])
    ds, de, db, h, c = cfg.slot_dim, cfg.enc_dim, cfg.backbone_dim, cfg.hidden_dim, cfg.proj_dim
    raw = {
        "enc.w1": _dense(rng, db, h), "enc.b1": np.zeros(h),
        "enc.w2": _dense(rng, h, de), "enc.b2": np.zeros(de),
        "sa.ln_in.g": np.ones(de), "sa.ln_in.b": np.zeros(de),
        "sa.w_k": _dense(rng, de, ds), "sa.w_v": _dense(rng, de, ds),
        "sa.ln_slot.g": np.ones(ds), "sa.ln_slot.b": np.zeros(ds),
        "sa.w_q": _dense(rng, ds, ds),
        "sa.gru.w_ih": _dense(rng, ds, 3 * ds), "sa.gru.w_hh": _dense(rng, ds, 3 * ds),
        "sa.gru.b_ih": np.zeros(3 * ds), "sa.gru.b_hh": np.zeros(3 * ds),
        "sa.ln_mlp.g": np.ones(ds), "sa.ln_mlp.b": np.zeros(ds),
        "sa.mlp.w1": _dense(rng, ds, h), "sa.mlp.b1": np.zeros(h),
        "sa.mlp.w2": _dense(rng, h, ds, gain=0.05), "sa.mlp.b2": np.zeros(ds),
        "sa.slot_mu": rng.normal(0, 1, ds), "sa.slot_logstd": np.zeros(ds),
        "pred.w1": _dense(rng, ds, h), "pred.b1": np.zeros(h),
        "pred.w2": _dense(rng, h, ds, gain=0.1), "pred.b2": np.zeros(ds),
        "dec.pos": fourier_positions(cfg.num_patches, ds, rng),
        "dec.w1_slot": _dense(rng, ds, h), "dec.w1_pos": _dense(rng, ds, h), "dec.b1": np.zeros(h),
        "dec.w2": _dense(rng, h, h), "dec.b2": np.zeros(h),
        "dec.w3": _dense(rng, h, db + 1), "dec.b3": np.zeros(db + 1),
    }
    # start the binding loop close to soft k-means: queries read slots
    # directly, values live in key space, the GRU mostly copies the update
    raw["sa.w_q"] = np.eye(ds)
    raw["sa.w_v"] = raw["sa.w_k"].copy()
    raw["sa.gru.w_ih"][:, 2 * ds :] = np.eye(ds)
    raw["sa.gru.w_hh"][:, 2 * ds :] *= 0.1
    raw["sa.gru.b_ih"][ds : 2 * ds] = 3.0
    for head, n_in in (("z", db), ("y", db), ("v", de)):
        raw[f"head.{head}.w1"] = _dense(rng, n_in, h)
        raw[f"head.{head}.b1"] = np.zeros(h)
        raw[f"head.{head}.w2"] = _dense(rng, h, c)
        raw[f"head.{head}.b2"] = np.zeros(c)
    return {k: ad.parameter(v) for k, v in raw.items()}


def _mlp(x, params, prefix):
    hid = ad.relu(ad.linear(x, params[prefix + "w1"], params[prefix + "b1"]))
    return ad.linear(hid, params[prefix + "w2"], params[prefix + "b2"])


# ---------------------------------------------------------------------------
# forward pieces


def encode(feats: Tensor, params: dict) -> Tensor:
    return _mlp(feats, params, "enc.")


def init_slots(params: dict, num_slots: int, rng: np.random.Generator) -> Tensor:
    noise = rng.standard_normal((num_slots, params["sa.slot_mu"].shape[0]))
    return params["sa.slot_mu"] + ad.exp(params["sa.slot_logstd"]) * noise


def slot_attention_frame(feats_t: Tensor, init: Tensor, params: dict, n_iters: int) -> tuple[Tensor, Tensor]:
    """Iterative competitive binding of slots to one frame's features.

    Returns the refined slots [S, D_s] and the final-iteration attention
    [S, N], normalised over slots.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    ds = init.shape[-1]
    x = ad.layer_norm(feats_t, params["sa.ln_in.g"], params["sa.ln_in.b"])
    k = ad.matmul(x, params["sa.w_k"])
    v = ad.matmul(x, params["sa.w_v"])
    k_t = ad.swap_last(k)
    gru = {
        "w_ih": params["sa.gru.w_ih"], "w_hh": params["sa.gru.w_hh"],
        "b_ih": params["sa.gru.b_ih"], "b_hh": params["sa.gru.b_hh"],
    }
    slots = init
    attn = None
    for _ in range(n_iters):
        q = ad.matmul(ad.layer_norm(slots, params["sa.ln_slot.g"], params["sa.ln_slot.b"]), params["sa.w_q"])
        logits = ad.scale(ad.matmul(q, k_t), ds**-0.5)
        attn = ad.softmax(logits, axis=0)
        weights = attn + 1e-8
        weights = weights / ad.tsum(weights, axis=1, keepdims=True)
        updates = ad.matmul(weights, v)
        slots = ad.gru_cell(updates, slots, gru)
        slots = slots + _mlp(ad.layer_norm(slots, params["sa.ln_mlp.g"], params["sa.ln_mlp.b"]), params, "sa.mlp.")
    return slots, attn


def propagate_slots(slots_prev: Tensor, params: dict) -> Tensor:
    return slots_prev + _mlp(slots_prev, params, "pred.")


def decode(slots: Tensor, params: dict) -> tuple[Tensor, Tensor, Tensor]:
    """Spatial-broadcast decoding of [T, S, D_s] slots.

    Returns (decoded [T, N, D_b], mask [S, T, N], per_slot [S, T, N, D_b]).
    The first layer acts on concat(slot, position); it is evaluated as the
    sum of the two partial products so the tiled input is never built.
    """
    t, s, _ = slots.shape
    a = ad.reshape(ad.matmul(slots, params["dec.w1_slot"]), (t, s, 1, -1))
    b = ad.matmul(params["dec.pos"], params["dec.w1_pos"])
    hid = ad.relu(a + b + params["dec.b1"])
    hid = ad.relu(ad.linear(hid, params["dec.w2"], params["dec.b2"]))
    out = ad.linear(hid, params["dec.w3"], params["dec.b3"])  # [T, S, N, D_b + 1]
    db = out.shape[-1] - 1
    feats = out[..., :db]
    mask = ad.softmax(out[..., db], axis=1)  # [T, S, N]
    decoded = ad.tsum(ad.reshape(mask, (*mask.shape, 1)) * feats, axis=1)
    return decoded, ad.transpose(mask, (1, 0, 2)), ad.transpose(feats, (1, 0, 2, 3))


def project(params: dict, decoded: Tensor, backbone: Tensor, encoded: Tensor) -> Projections:
    return Projections(
        z=_mlp(decoded, params, "head.z."),
        y=_mlp(backbone.detach(), params, "head.y."),
        v=_mlp(encoded, params, "head.v."),
    )


def pseudo_labels(attn, mask) -> PseudoLabels:
    """Per-patch argmax over the slot axis; ties resolve to the lowest slot."""
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return PseudoLabels(l_attn=np.argmax(a, axis=0), l_mask=np.argmax(m, axis=0))


def forward(frames: np.ndarray, params: dict, embedder: dict, cfg: ModelConfig, rng: np.random.Generator) -> ModelOutput:
    backbone = extract_backbone_features(frames, embedder, cfg)
    return forward_features(backbone, params, cfg, rng)


def forward_features(backbone: Tensor, params: dict, cfg: ModelConfig, rng: np.random.Generator) -> ModelOutput:
    if backbone.shape[1] != params["dec.pos"].shape[0]:
        raise ValueError(f"video has {backbone.shape[1]} patches, model expects {params['dec.pos'].shape[0]}")
    encoded = encode(backbone, params)
    slots_t = init_slots(params, cfg.num_slots, rng)
    all_slots, all_attn = [], []
    for t in range(backbone.shape[0]):
        if t > 0:
            slots_t = propagate_slots(slots_t, params)
        iters = cfg.first_frame_iters if t == 0 else cfg.n_iters
        slots_t, attn_t = slot_attention_frame(encoded[t], slots_t, params, iters)
        all_slots.append(slots_t)
        all_attn.append(attn_t)
    slots = ad.stack(all_slots, axis=0)
    attn = ad.stack(all_attn, axis=1)
    decoded, mask, per_slot = decode(slots, params)
    return ModelOutput(backbone, encoded, slots, attn, mask, decoded, per_slot)

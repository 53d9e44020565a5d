"""Training loop, Adam, configuration files and evaluation harness."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import metrics
from . import model as M
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .synthdata import VideoSample, read_dataset

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "eta", "recon", "slot_contrast", "cl_dec", "cl_enc", "reg", "total")
EVAL_SEED_OFFSET = 1_000_003


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "data.bin"
    total_steps: int = 3000
    batch_size: int = 1
    lr: float = 4e-4
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    num_slots: int = 5
    slot_dim: int = 32
    enc_dim: int = 32
    proj_dim: int = 16
    backbone_dim: int = 32
    hidden_dim: int = 64
    patch_size: int = 8
    n_iters: int = 2
    first_frame_iters: int = 3
    top_k: int = 0  # 0 -> 8 * T
    num_penalized: int = -1  # -1 -> floor(S / 2)
    tau: float = 0.1
    lambda_reg: float = 0.1
    lambda_cl: float = 0.1
    reg_end: float = 0.1
    cl_start: float = 0.2
    anchor_limit: int = 256
    objective: str = "srl"  # or "base" for the reconstruction + slot-contrast ablation
    embed_seed: int = 0
    seed: int = 0
    checkpoint: str = "model.ckpt"
    loss_log: str = "loss.csv"

    def __post_init__(self):
        self.validate()

    @property
    def penalized(self) -> int:
        return self.num_slots // 2 if self.num_penalized < 0 else self.num_penalized

    def k_for(self, t: int) -> int:
        return 8 * t if self.top_k <= 0 else self.top_k

    def schedule(self) -> L.StageSchedule:
        return L.StageSchedule(self.reg_end, self.cl_start, self.lambda_reg, self.lambda_cl)

    def model_config(self, num_patches: int) -> M.ModelConfig:
        return M.ModelConfig(
            num_slots=self.num_slots, slot_dim=self.slot_dim, enc_dim=self.enc_dim,
            proj_dim=self.proj_dim, backbone_dim=self.backbone_dim, hidden_dim=self.hidden_dim,
            patch_size=self.patch_size, num_patches=num_patches, n_iters=self.n_iters,
            first_frame_iters=self.first_frame_iters,
        )

    def validate(self) -> None:
        if self.total_steps < 1 or self.batch_size < 1 or self.num_slots < 1:
            raise ConfigError("total_steps, batch_size and num_slots must be positive")
        if min(self.lr, self.tau, self.lambda_reg, self.lambda_cl) <= 0:
            raise ConfigError("lr, tau and loss weights must be positive")
        if not 0 < self.reg_end <= self.cl_start < 1:
            raise ConfigError(f"stage boundaries must satisfy 0 < reg_end <= cl_start < 1")
        if self.objective not in ("srl", "base"):
            raise ConfigError(f"objective must be 'srl' or 'base', got {self.objective!r}")
        if self.num_slots > 1 and not 1 <= self.penalized <= self.num_slots - 1:
            raise ConfigError(f"num_penalized={self.penalized} out of range for {self.num_slots} slots")


def _coerce(f, raw: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; '#' starts a comment; keys must be TrainConfig fields."""
    known = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(known[key], raw)
    return values


def load_config(path=None, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    known = {f.name: f for f in fields(TrainConfig)}
    for key, raw in overrides.items():
        if raw is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(known[key], raw) if isinstance(raw, str) else raw
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` (arrays or leaf Tensors)."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if isinstance(p, ad.Tensor):
            p.data = p.data - step
        else:
            p -= step


def learning_rate(cfg: TrainConfig, step: int) -> float:
    warm = max(1, int(round(cfg.warmup_frac * cfg.total_steps)))
    return cfg.lr * min(1.0, (step + 1) / warm)


# ---------------------------------------------------------------------------
# state and persistence


@dataclass
class TrainState:
    config: TrainConfig
    params: dict[str, ad.Tensor]
    embedder: dict
    model_cfg: M.ModelConfig
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0
    history: list[list[float]] = field(default_factory=list)


def new_state(cfg: TrainConfig, sample: VideoSample) -> TrainState:
    t, h, w = sample.gt_masks.shape
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ConfigError(f"frame size H={h}, W={w} not divisible by patch size {cfg.patch_size}")
    mcfg = cfg.model_config((h // cfg.patch_size) * (w // cfg.patch_size))
    return TrainState(cfg, M.init_params(mcfg, cfg.seed), M.make_embedder(mcfg, cfg.embed_seed), mcfg)


def save_state(state: TrainState, path) -> None:
    tensors: dict[str, np.ndarray] = {f"param/{k}": v.data for k, v in state.params.items()}
    for k, v in state.adam.m.items():
        tensors[f"adam.m/{k}"] = v
    for k, v in state.adam.v.items():
        tensors[f"adam.v/{k}"] = v
    tensors["state/step"] = np.array([state.step, state.adam.t], dtype=np.int64)
    tensors["state/num_slots"] = np.array([state.config.num_slots], dtype=np.int64)
    tensors["state/history"] = np.array(state.history, dtype=np.float64).reshape(-1, len(LOSS_COLUMNS))
    tensors["state/config"] = np.frombuffer(json.dumps(asdict(state.config)).encode(), dtype=np.uint8)
    save_tensors(tensors, path)


def load_state(path, config: TrainConfig | None = None) -> TrainState:
    raw = load_tensors(path)
    stored = TrainConfig(**json.loads(bytes(raw["state/config"]).decode()))
    if config is None:
        config = stored
    n_slots = int(raw["state/num_slots"][0])
    if config.num_slots != n_slots:
        raise CheckpointError(f"checkpoint has {n_slots} slots but config asks for {config.num_slots}")
    params = {k[len("param/"):]: ad.parameter(v) for k, v in raw.items() if k.startswith("param/")}
    mcfg = stored.model_config(params["dec.pos"].shape[0])
    adam = AdamState(
        m={k[len("adam.m/"):]: v.copy() for k, v in raw.items() if k.startswith("adam.m/")},
        v={k[len("adam.v/"):]: v.copy() for k, v in raw.items() if k.startswith("adam.v/")},
        t=int(raw["state/step"][1]),
    )
    return TrainState(
        config=config, params=params, embedder=M.make_embedder(mcfg, stored.embed_seed), model_cfg=mcfg,
        adam=adam, step=int(raw["state/step"][0]), history=raw["state/history"].tolist(),
    )


def write_loss_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def read_loss_log(path) -> list[list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [[float(x) for x in r] for r in rows[1:]]


# ---------------------------------------------------------------------------
# one step


def compute_losses(state: TrainState, sample: VideoSample, eta: float, rng: np.random.Generator) -> L.LossBreakdown:
    """Forward one video and combine the stage-active loss terms."""
    cfg, sched = state.config, state.config.schedule()
    stage = L.stage_of(eta, sched)
    out = M.forward(sample.frames, state.params, state.embedder, state.model_cfg, rng)
    recon = L.loss_recon(out.decoded, out.backbone)
    sc = L.loss_slot_contrast(out.slots, cfg.tau)
    reg = cl_dec = cl_enc = 0.0
    if cfg.objective == "srl" and stage == "reg" and cfg.num_slots > 1:
        penalized = L.select_penalized_slots(out.slots, out.attn, cfg.penalized)
        reg = L.loss_reg(out.attn, penalized)
    elif cfg.objective == "srl" and stage == "cl":
        t, n = out.backbone.shape[:2]
        anchors = L.default_anchors(t, n, cfg.anchor_limit, rng)
        labels = M.pseudo_labels(out.attn, out.mask)
        proj = M.project(state.params, out.decoded, out.backbone, out.encoded)
        cl_dec = L.loss_cl_dec(proj, labels, cfg.tau, anchors)
        cl_enc = L.loss_cl_enc(proj, out.backbone, labels, min(cfg.k_for(t), t * n - 1), cfg.tau, anchors)
    return L.stage_total(recon, sc, cl_dec, cl_enc, reg, eta, sched)


def train_step(state: TrainState, videos: list[VideoSample]) -> list[float]:
    cfg = state.config
    step = state.step
    eta = step / cfg.total_steps
    rng = np.random.default_rng([cfg.seed, step])
    picks = rng.integers(len(videos), size=cfg.batch_size)
    ad.zero_grads(state.params.values())
    parts = []
    with ad.training_mode():
        for idx in picks:
            parts.append(compute_losses(state, videos[int(idx)], eta, rng))
        total = parts[0].total_tensor
        for b in parts[1:]:
            total = total + b.total_tensor
        total = ad.scale(total, 1.0 / len(parts))
        comps = np.mean([b.row() for b in parts], axis=0)
        if not np.all(np.isfinite(comps)):
            named = dict(zip(LOSS_COLUMNS[2:], comps.tolist()))
            raise TrainingError(f"non-finite loss at step {step}: {named}")
        ad.backward(total)
    grads = {k: p.grad for k, p in state.params.items()}
    adam_step(state.params, grads, state.adam, learning_rate(cfg, step), (cfg.beta1, cfg.beta2), cfg.adam_eps)
    row = [float(step), eta, *comps.tolist()]
    state.history.append(row)
    state.step += 1
    return row


def train(
    cfg: TrainConfig,
    videos: list[VideoSample] | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
    log_every: int = 0,
) -> TrainState:
    """Run (or continue) training; writes the checkpoint and loss log from ``cfg``.

    ``stop_after`` halts once that many total steps have run, without
    changing the schedule, so a later resume continues the same trajectory.
    """
    if videos is None:
        path = Path(cfg.dataset)
        if not path.exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        videos = read_dataset(path)
    if not videos:
        raise ConfigError("dataset is empty")
    state = load_state(resume, cfg) if resume else new_state(cfg, videos[0])
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    while state.step < end:
        row = train_step(state, videos)
        if log_every and state.step % log_every == 0:
            log.info("step %d eta %.3f total %.4f", int(row[0]), row[1], row[-1])
    if cfg.checkpoint:
        save_state(state, cfg.checkpoint)
    if cfg.loss_log:
        write_loss_log(state.history, cfg.loss_log)
    return state


# ---------------------------------------------------------------------------
# evaluation


def predict_labels(state: TrainState, sample: VideoSample) -> np.ndarray:
    """Pixel-resolution slot ids from the decoder masks, [T, H, W]."""
    rng = np.random.default_rng([state.config.seed, EVAL_SEED_OFFSET])
    out = M.forward(sample.frames, state.params, state.embedder, state.model_cfg, rng)
    labels = M.pseudo_labels(out.attn, out.mask).l_mask
    _, h, w = sample.gt_masks.shape
    return metrics.upsample_labels(labels, h, w, state.model_cfg.patch_size)


def evaluate(
    state: TrainState,
    videos: list[VideoSample],
    out_csv: str | Path | None = None,
    predict: Callable[[VideoSample], np.ndarray] | None = None,
) -> list[dict]:
    """Score every video; ``predict`` replaces the model (used as a test hook)."""
    if predict is None:
        def predict(sample):
            return predict_labels(state, sample)
    rows = []
    for vid, sample in enumerate(videos):
        scores = metrics.score_video(predict(sample), sample.gt_masks)
        rows.append({"video_id": vid, **scores})
    if out_csv:
        metrics.write_metrics_csv(rows, out_csv)
    return rows


def summarize(rows: list[dict]) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in metrics.METRIC_COLUMNS[1:]}


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_masks(state: TrainState, videos: list[VideoSample], out_dir) -> Path:
    """One PGM per frame with slot ids as pixel values, plus manifest.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for vid, sample in enumerate(videos):
        labels = predict_labels(state, sample)
        for t, frame in enumerate(labels):
            name = f"video{vid:04d}_frame{t:03d}.pgm"
            write_pgm(out_dir / name, frame)
            lines.append(f"{vid} {t} {name}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("video_id frame file\n" + "\n".join(lines) + "\n")
    return manifest


def load_exported(out_dir) -> dict[int, np.ndarray]:
    out_dir = Path(out_dir)
    frames: dict[int, dict[int, np.ndarray]] = {}
    for line in (out_dir / "manifest.txt").read_text().splitlines()[1:]:
        vid, t, name = line.split()
        frames.setdefault(int(vid), {})[int(t)] = read_pgm(out_dir / name)
    return {v: np.stack([f[t] for t in sorted(f)]) for v, f in frames.items()}


"""Training loop, AdamW, evaluation and checkpoints.

Checkpoint layout (little-endian)::

    b"CATS" | u32 version | u32 header_len | header JSON (utf-8) | raw tensor bytes

The JSON header carries both configs, the step counter, the batch sampler's
RNG state and a table of ``(name, shape, dtype, offset)`` for every stored
array: parameters under ``param/``, Adam moments under ``m/`` and ``v/``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from catsagg.aggregator import AggregatorConfig, AggregatorParams, cats_forward, collapse_levels
from catsagg.correlation import CorrelationStack, FeatureStack, Orientation, build_correlation, resize_normalize
from catsagg.engine import Tape, Tensor
from catsagg.errors import ConfigurationError, EvaluationError, FormatError, NonFiniteError, TrainingError, UsageError
from catsagg.flow import FlowField, KeypointSet, aepe, pck, soft_argmax, transfer_keypoints

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CATS"
CHECKPOINT_VERSION = 1
PCK_ALPHAS = (0.05, 0.1, 0.15)
LOG_FIELDS = ("step", "loss", "aepe", "pck05", "pck10", "pck15")


@dataclass
class TrainConfig:
    lr_aggregator: float = 3e-5
    # kept for parity with backbone fine-tuning; nothing reads it without a backbone
    lr_feature_path: float = 3e-6
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 1000
    lr_milestones: list[tuple[int, float]] | None = None
    seed: int = 0
    eval_every: int = 0
    tau: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError(f"betas must lie in [0, 1), got {self.betas}")
        if self.lr_aggregator <= 0 or self.lr_feature_path <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and max_steps >= 0")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype}")
        if self.lr_milestones is None:
            merged: dict[int, float] = {}
            # short runs can put both milestones on one step; their factors compound
            for s in (int(self.max_steps * 0.5), int(self.max_steps * 0.75)):
                merged[s] = merged.get(s, 1.0) * 0.5
            self.lr_milestones = sorted(merged.items())
        self.lr_milestones = [(int(s), float(m)) for s, m in self.lr_milestones]
        steps = [s for s, _ in self.lr_milestones]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigurationError(f"lr milestones must be strictly increasing, got {steps}")

    def lr_at(self, step: int) -> float:
        """Learning rate for the update that takes ``step`` to ``step + 1``."""
        lr = self.lr_aggregator
        for s, mult in self.lr_milestones:
            if step >= s:
                lr *= mult
        return lr


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: AggregatorParams | dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    cfg: TrainConfig,
    lr: float | None = None,
) -> None:
    """One AdamW update in place, weight decay decoupled from the adaptive step."""
    lr = cfg.lr_aggregator if lr is None else lr
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape or v.shape != p.shape:
            raise UsageError(f"optimizer moments for {name} do not match parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= lr * update + lr * cfg.weight_decay * p.data


# ------------------------------------------------------------------ batching


@dataclass
class PreparedPair:
    """Resized/normalised features and raw correlation, computed once per pair."""

    d_s: FeatureStack
    d_t: FeatureStack
    corr: np.ndarray
    gt_flow: np.ndarray
    gt_valid: np.ndarray
    kps: KeypointSet
    grid: tuple[int, int]
    tag: str = ""


def prepare_pair(pair, grid: tuple[int, int], dtype=np.float64) -> PreparedPair:
    """``pair`` is anything with ``d_s``, ``d_t``, ``gt_flow`` and ``kps``."""
    d_s = resize_normalize(pair.d_s, grid)
    d_t = resize_normalize(pair.d_t, grid)
    corr = build_correlation(d_t, d_s).maps.data
    cast = lambda s: FeatureStack([lvl.astype(dtype) for lvl in s.levels], s.image_id, s.source_kind)  # noqa: E731
    gt = pair.gt_flow
    if gt.grid != grid:
        raise ConfigurationError(f"ground-truth flow grid {gt.grid} differs from model grid {grid}")
    return PreparedPair(
        cast(d_s),
        cast(d_t),
        corr.astype(dtype),
        gt.numpy().astype(dtype),
        np.asarray(gt.valid, dtype=bool),
        pair.kps,
        grid,
        getattr(pair, "seed", ""),
    )


@dataclass
class Batch:
    corr: CorrelationStack
    d_s: FeatureStack
    d_t: FeatureStack
    gt: FlowField


def collate(items: Sequence[PreparedPair]) -> Batch:
    grid = items[0].grid

    def stack_features(attr: str) -> FeatureStack:
        stacks = [getattr(it, attr) for it in items]
        levels = [np.stack([s.levels[l] for s in stacks]) for l in range(stacks[0].num_levels)]
        return FeatureStack(levels, f"batch-{attr}", stacks[0].source_kind)

    corr = CorrelationStack(Tensor(np.stack([it.corr for it in items])), Orientation.ROWS_TARGET, grid)
    gt = FlowField(grid, Tensor(np.stack([it.gt_flow for it in items])), np.stack([it.gt_valid for it in items]))
    return Batch(corr, stack_features("d_s"), stack_features("d_t"), gt)


def model_flow(batch: Batch, params: AggregatorParams, cfg: AggregatorConfig, tau: float) -> FlowField:
    refined = cats_forward(batch.corr, batch.d_s, batch.d_t, params, cfg)
    return soft_argmax(collapse_levels(refined), batch.corr.grid, tau)


def batch_loss(batch: Batch, params: AggregatorParams, cfg: AggregatorConfig, tau: float) -> Tensor:
    return aepe(model_flow(batch, params, cfg, tau), batch.gt)


# ---------------------------------------------------------------- evaluation


def score_flows(flows: Iterable[np.ndarray], items: Sequence[PreparedPair]) -> dict[str, float]:
    """Mean per-pair AEPE and PCK pooled over all keypoints of the set."""
    errors = []
    correct = {a: 0.0 for a in PCK_ALPHAS}
    total = 0
    for vec, it in zip(flows, items):
        pred = FlowField(it.grid, Tensor(vec), np.ones(it.grid, dtype=bool))
        gt = FlowField(it.grid, Tensor(it.gt_flow), it.gt_valid)
        errors.append(aepe(pred, gt).item())
        pts, valid = transfer_keypoints(pred, it.kps)
        n = int(valid.sum())
        if n == 0:
            continue
        for a in PCK_ALPHAS:
            correct[a] += n * pck(pts, it.kps.tgt, a, it.grid, valid)
        total += n
    if not errors:
        raise EvaluationError("evaluation set is empty")
    if total == 0:
        raise EvaluationError("evaluation set has no valid keypoints")
    out = {"aepe": float(np.mean(errors))}
    for a, key in zip(PCK_ALPHAS, LOG_FIELDS[3:]):
        out[key] = correct[a] / total
    return out


def predict_flows(
    params: AggregatorParams, cfg: AggregatorConfig, items: Sequence[PreparedPair], tau: float, chunk: int = 16
) -> list[np.ndarray]:
    flows = []
    for i in range(0, len(items), chunk):
        flow = model_flow(collate(items[i : i + chunk]), params, cfg, tau)
        flows.extend(flow.numpy())
    return flows


def evaluate_params(params: AggregatorParams, cfg: AggregatorConfig, pairs, tau: float) -> dict[str, float]:
    items = pairs if pairs and isinstance(pairs[0], PreparedPair) else [prepare_pair(p, (cfg.h, cfg.w)) for p in pairs]
    if not items:
        raise EvaluationError("evaluation set is empty")
    return score_flows(predict_flows(params, cfg, items, tau), items)


def evaluate(checkpoint: "Checkpoint", pairs) -> dict[str, float]:
    """AEPE and PCK@{0.05, 0.1, 0.15}; never mutates the checkpoint."""
    return evaluate_params(checkpoint.params, checkpoint.model_config, pairs, checkpoint.train_config.tau)


def wta_metrics(pairs, grid: tuple[int, int], tau: float) -> dict[str, float]:
    """Set-level metrics of raw-correlation soft-argmax, scored like :func:`evaluate`."""
    items = pairs if pairs and isinstance(pairs[0], PreparedPair) else [prepare_pair(p, grid) for p in pairs]
    flows = [
        soft_argmax(collapse_levels(np.swapaxes(it.corr, -1, -2)), it.grid, tau).numpy() for it in items
    ]
    return score_flows(flows, items)


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model_config: AggregatorConfig
    train_config: TrainConfig
    params: AggregatorParams
    optimizer: AdamWState
    step: int
    rng_state: dict

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(encode_checkpoint(self))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return decode_checkpoint(Path(path).read_bytes())


def encode_checkpoint(ck: Checkpoint) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", t.data) for k, t in ck.params.items()]
    arrays += [(f"m/{k}", a) for k, a in ck.optimizer.m.items()]
    arrays += [(f"v/{k}", a) for k, a in ck.optimizer.v.items()]
    table, blobs, offset = [], [], 0
    for name, arr in arrays:
        dt = np.dtype(arr.dtype).newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    train = asdict(ck.train_config)
    header = {
        "model_config": ck.model_config.to_dict(),
        "train_config": train,
        "step": ck.step,
        "adam_t": ck.optimizer.t,
        "rng_state": ck.rng_state,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12:
        raise FormatError(f"truncated checkpoint: expected at least 12 bytes, got {len(buf)}", 0)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", 0)
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if 12 + hlen > len(buf):
        raise FormatError(f"truncated checkpoint header: expected {12 + hlen} bytes, got {len(buf)}", 12)
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", 12) from None
    base = 12 + hlen
    params, m, v = {}, {}, {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        if start + n * dt.itemsize > len(buf):
            raise FormatError(f"truncated checkpoint: tensor {entry['name']} runs past end of file", start)
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=start).reshape(shape).astype(dt.newbyteorder("="))
        group, name = entry["name"].split("/", 1)
        if group == "param":
            params[name] = Tensor(arr, requires_grad=True, name=name)
        elif group == "m":
            m[name] = arr
        else:
            v[name] = arr
    tc = dict(header["train_config"])
    tc["lr_milestones"] = [tuple(x) for x in tc["lr_milestones"]]
    return Checkpoint(
        model_config=AggregatorConfig.from_dict(header["model_config"]),
        train_config=TrainConfig(**tc),
        params=AggregatorParams(params),
        optimizer=AdamWState(m, v, int(header["adam_t"])),
        step=int(header["step"]),
        rng_state=header["rng_state"],
    )


# ------------------------------------------------------------------ training


def init_checkpoint(model_cfg: AggregatorConfig, train_cfg: TrainConfig) -> Checkpoint:
    init_rng = np.random.default_rng([train_cfg.seed, 0])
    params = AggregatorParams.init(model_cfg, init_rng, dtype=np.dtype(train_cfg.dtype))
    sampler = np.random.default_rng([train_cfg.seed, 1])
    return Checkpoint(model_cfg, train_cfg, params, AdamWState(), 0, sampler.bit_generator.state)


def train(
    pairs,
    train_cfg: TrainConfig,
    model_cfg: AggregatorConfig,
    *,
    eval_pairs=None,
    resume: Checkpoint | None = None,
    until: int | None = None,
    on_log: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Minimise batch-mean AEPE with AdamW.

    Starts from ``resume`` when given (its configs win), otherwise from a fresh
    initialisation. Stops at ``until`` if set, else at ``max_steps``; the LR
    schedule always refers to ``max_steps``. Returns the final checkpoint and
    one log row per step.
    """
    ck = resume if resume is not None else init_checkpoint(model_cfg, train_cfg)
    train_cfg, model_cfg = ck.train_config, ck.model_config
    dtype = np.dtype(train_cfg.dtype)
    grid = (model_cfg.h, model_cfg.w)
    items = pairs if pairs and isinstance(pairs[0], PreparedPair) else [prepare_pair(p, grid, dtype) for p in pairs]
    eval_items = None
    if eval_pairs:
        eval_items = eval_pairs if isinstance(eval_pairs[0], PreparedPair) else [prepare_pair(p, grid, dtype) for p in eval_pairs]
    stop = train_cfg.max_steps if until is None else min(until, train_cfg.max_steps)
    if stop > ck.step and not items:
        raise TrainingError("training set is empty")

    sampler = np.random.default_rng()
    sampler.bit_generator.state = ck.rng_state
    params = ck.params
    rows: list[dict] = []
    bs = min(train_cfg.batch_size, len(items)) if items else 0
    while ck.step < stop:
        idx = np.sort(sampler.choice(len(items), size=bs, replace=False))
        batch = collate([items[i] for i in idx])
        params.zero_grad()
        try:
            with Tape() as tape:
                loss = batch_loss(batch, params, model_cfg, train_cfg.tau)
            tape.backward(loss)
        except NonFiniteError as exc:
            seeds = [items[i].tag for i in idx]
            raise TrainingError(
                f"non-finite value at step {ck.step}: {exc}; batch indices {idx.tolist()}, pair seeds {seeds}"
            ) from exc
        adamw_step(params, {k: t.grad for k, t in params.items() if t.grad is not None}, ck.optimizer, train_cfg, train_cfg.lr_at(ck.step))
        ck.step += 1
        row = {"step": ck.step, "loss": loss.item()}
        if eval_items and train_cfg.eval_every and ck.step % train_cfg.eval_every == 0:
            row.update(evaluate_params(params, model_cfg, eval_items, train_cfg.tau))
        rows.append(row)
        if on_log is not None:
            on_log(row)
        log.debug("step %d loss %.6f", ck.step, row["loss"])
    params.zero_grad()
    ck.rng_state = sampler.bit_generator.state
    return ck, rows


def write_metric_log(path: str | Path, rows: Iterable[dict]) -> None:
    lines = [",".join(LOG_FIELDS)]
    for row in rows:
        lines.append(",".join("" if row.get(k) is None else repr(row[k]) for k in LOG_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")

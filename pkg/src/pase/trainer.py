"""Training loop, checkpoint container and finite-difference gradient checks."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from pase.alignment import ContrastiveConfig
from pase.corpus import AlignmentBatch, Corpus, PhonemeInventory, SegmentDataset, sample_batch
from pase.corpus.lips import WINDOW
from pase.errors import DataError, DivergenceError, PaseError
from pase.frontend import FrontendConfig
from pase.model import BatchTensors, ModelConfig, PaseModel, build_model, collate, compute_losses

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 16
    window: int = WINDOW
    steps: int = 200
    mask_ratio: float = 0.15
    tau: float = 0.07
    alpha: float = 1.0
    seed: int = 0
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    encoder_variant: str = "gru"
    negatives: int = 4
    negative_pool: str = "batch"  # or "corpus"
    checkpoint_every: int = 0
    stop_loss: float = 0.0  # stop once the mean contrastive loss of the last stop_window steps falls below
    stop_window: int = 20
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.window != WINDOW:
            raise ValueError(f"only {WINDOW}-frame windows are supported")
        if self.steps < 0 or self.negatives < 0 or self.checkpoint_every < 0 or self.stop_loss < 0:
            raise ValueError("steps, negatives, checkpoint_every and stop_loss must be non-negative")
        if self.stop_window < 1:
            raise ValueError("stop_window must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.negative_pool not in ("batch", "corpus"):
            raise ValueError(f"unknown negative pool {self.negative_pool!r}")
        ContrastiveConfig(self.tau, self.alpha)
        # the encoder variant is the single source of truth for the model's audio tower
        object.__setattr__(self, "model", replace(self.model, encoder=self.encoder_variant))

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.tau, self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "frontend" in d and isinstance(d["frontend"], dict):
            d["frontend"] = FrontendConfig(**d["frontend"])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig(**d["model"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def step_seed(seed: int, step: int, stream: int = 0) -> int:
    """Independent 32-bit seed for (run seed, step, stream); resume needs nothing else."""
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0])


def make_optimizer(model: PaseModel, lr: float) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def prepare_batch(dataset: SegmentDataset, model: PaseModel, cfg: TrainConfig, step: int) -> BatchTensors:
    batch = sample_batch(dataset, cfg.batch_size, cfg.negatives, step_seed(cfg.seed, step, 0), pool=cfg.negative_pool)
    return collate(batch, model, cfg.mask_ratio, np.random.default_rng(step_seed(cfg.seed, step, 1)),
                   np.random.default_rng(step_seed(cfg.seed, step, 2)))


def train_step(model: PaseModel, optimizer, bt: BatchTensors, cfg: ContrastiveConfig) -> dict:
    """One Adam update on ``bt``. Raises :class:`DivergenceError` before touching any state."""
    model.train()
    losses = compute_losses(model, bt, cfg)
    values = {k: float(v.detach()) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise DivergenceError(f"divergence: non-finite loss {values}")
    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    optimizer.step()
    return values


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all little-endian):
#   8 bytes  magic b"PASECKPT"
#   u16      format version
#   u32      header length L
#   L bytes  UTF-8 JSON header: step, config, n_phonemes, inventory, tensors[{name, shape, dtype}]
#   payload  the tensors in header order, row-major, as float32 (or float64 when so declared)

CKPT_MAGIC = b"PASECKPT"
CKPT_VERSION = 1
_DTYPES = {"float32": ("<f4", torch.float32), "float64": ("<f8", torch.float64), "int64": ("<i8", torch.int64)}


@dataclass
class Checkpoint:
    step: int
    config: TrainConfig
    n_phonemes: int
    tensors: dict  # name -> torch.Tensor, model params under "model/", Adam state under "optim/"
    inventory: PhonemeInventory | None = None

    def model_state(self) -> dict:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}


def _dtype_name(t: torch.Tensor) -> str:
    for name, (_, dt) in _DTYPES.items():
        if t.dtype == dt:
            return name
    raise PaseError(f"unsupported tensor dtype {t.dtype}")


def snapshot(model: PaseModel, optimizer, step: int, config: TrainConfig, inventory=None) -> Checkpoint:
    tensors = {f"model/{k}": v.detach().clone().contiguous() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, value in optimizer.state.get(p, {}).items():
                    tensors[f"optim/{names[id(p)]}/{key}"] = torch.as_tensor(value).detach().clone().contiguous()
    return Checkpoint(step, config, model.n_phonemes, tensors, inventory)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.tensors)
    header = {
        "step": ckpt.step,
        "config": ckpt.config.to_dict(),
        "n_phonemes": ckpt.n_phonemes,
        "inventory": ckpt.inventory.to_dict() if ckpt.inventory is not None else None,
        "tensors": [{"name": n, "shape": list(ckpt.tensors[n].shape), "dtype": _dtype_name(ckpt.tensors[n])}
                    for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(blob)) + blob)
        for n in names:
            t = ckpt.tensors[n]
            f.write(t.cpu().numpy().astype(_DTYPES[_dtype_name(t)][0], copy=False).tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    if len(raw) < 14:
        raise DataError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<HI", raw, 8)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[14 : 14 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    offset = 14 + hlen
    tensors = {}
    for entry in header["tensors"]:
        code, _ = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * np.dtype(code).itemsize
        if offset + nbytes > len(raw):
            raise DataError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(raw, dtype=code, count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        offset += nbytes
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes after checkpoint payload")
    inv = header.get("inventory")
    return Checkpoint(header["step"], TrainConfig.from_dict(header["config"]), header["n_phonemes"], tensors,
                      PhonemeInventory.from_dict(inv) if inv else None)


def model_from_checkpoint(ckpt: Checkpoint, dtype=torch.float32) -> PaseModel:
    cfg = ckpt.config
    model = build_model(cfg.model, cfg.frontend, ckpt.n_phonemes, seed=cfg.seed, dtype=dtype)
    model.load_state_dict({k: v.to(dtype) for k, v in ckpt.model_state().items()})
    return model


def restore_optimizer(ckpt: Checkpoint, model: PaseModel, optimizer) -> None:
    params = dict(model.named_parameters())
    state = {}
    for key, value in ckpt.tensors.items():
        if key.startswith("optim/"):
            pname, slot = key[len("optim/"):].rsplit("/", 1)
            state.setdefault(pname, {})[slot] = value.clone()
    for pname, slots in state.items():
        optimizer.state[params[pname]] = slots


# ---------------------------------------------------------------------------
# training loop


def validate_corpus(corpus: Corpus, frontend: FrontendConfig | None = None) -> SegmentDataset:
    """Checks that training can draw batches from ``corpus``; returns its segment dataset."""
    if not corpus.clips:
        raise DataError("corpus has no clips")
    ds = SegmentDataset(corpus, frontend)
    if not ds.segments:
        raise DataError("corpus has no phoneme segments")
    if len(set(ds.viseme_ids.tolist())) < 2:
        raise DataError("corpus needs at least two viseme classes for negatives")
    return ds


@dataclass
class TrainResult:
    model: PaseModel
    optimizer: object
    step: int
    metrics: list
    checkpoint: Checkpoint
    checkpoint_path: Path | None = None


def _metric_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True) + "\n"


def train(config: TrainConfig, corpus: Corpus, out_dir=None, resume=None, log=None) -> TrainResult:
    """Run ``config.steps`` updates; checkpoints and a JSONL metric stream go to ``out_dir``.

    ``resume`` is a checkpoint (or path); training continues from its step
    and reproduces the uninterrupted run exactly because every step's
    randomness derives from ``(seed, step)``.
    """
    dataset = validate_corpus(corpus, config.frontend)
    out_dir = Path(out_dir) if out_dir is not None else None
    n_ph = len(corpus.inventory)

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ckpt.n_phonemes != n_ph:
            raise DataError("checkpoint inventory size does not match the corpus")
        model = model_from_checkpoint(ckpt)
        optimizer = make_optimizer(model, config.learning_rate)
        restore_optimizer(ckpt, model, optimizer)
        start = ckpt.step
    else:
        model = build_model(config.model, config.frontend, n_ph, seed=config.seed)
        optimizer = make_optimizer(model, config.learning_rate)
        start = 0

    metrics_file = None
    last_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "a" if resume is not None else "w")
    metrics, recent, stopped = [], [], None
    try:
        for step in range(start + 1, config.steps + 1):
            bt = prepare_batch(dataset, model, config, step)
            try:
                values = train_step(model, optimizer, bt, config.contrastive)
            except DivergenceError as exc:
                raise DivergenceError(f"divergence at step {step}", last_checkpoint=last_path) from exc
            rec = {"step": step, **values}
            metrics.append(rec)
            if metrics_file is not None:
                metrics_file.write(_metric_line(rec))
                metrics_file.flush()
            if log is not None:
                log(rec)
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                last_path = save_checkpoint(snapshot(model, optimizer, step, config, corpus.inventory),
                                            out_dir / f"step{step:06d}.ckpt")
            recent.append(values["con"])
            if config.stop_loss and len(recent) >= config.stop_window and \
                    float(np.mean(recent[-config.stop_window:])) < config.stop_loss:
                stopped = step
                break
    finally:
        if metrics_file is not None:
            metrics_file.close()
    final = snapshot(model, optimizer, stopped or max(start, config.steps), config, corpus.inventory)
    path = save_checkpoint(final, out_dir / "final.ckpt") if out_dir is not None else None
    return TrainResult(model, optimizer, final.step, metrics, final, path)


# ---------------------------------------------------------------------------
# finite differences


class _FrozenReLU:
    """Hooks that record every ReLU's on/off pattern, then replay it.

    With the pattern frozen the network is smooth in its parameters, so a
    central difference measures the derivative of the active linear piece,
    which is what autograd returns. Without it, a 96x96 input has so many
    activations near zero that nearly every parameter step crosses a kink.
    """

    def __init__(self, modules):
        self.patterns, self.replay, self.cursor = [], False, 0
        self.handles = [m.register_forward_hook(self._hook) for m in modules]

    def _hook(self, module, inputs, output):
        x = inputs[0]
        if not self.replay:
            self.patterns.append(x.detach() > 0)
            return None
        mask = self.patterns[self.cursor]
        self.cursor += 1
        return x * mask.to(x.dtype)

    def start_replay(self):
        self.replay, self.cursor = True, 0

    def rewind(self):
        self.cursor = 0

    def close(self):
        for h in self.handles:
            h.remove()


def gradient_errors(loss_fn, params: dict, epsilon: float = 1e-5, max_coords: int | None = None, rng_seed: int = 0,
                    relu_modules=(), floor: float = 1e-4):
    """Per-group relative error between autograd and central differences.

    ``params`` maps names to leaf tensors that ``loss_fn()`` depends on;
    groups with no elements or no ``requires_grad`` are skipped. For a group
    the error is ``max |g - g_fd|`` over the probed coordinates divided by
    the group's gradient scale ``max(max |g|, max |g_fd|)`` (``g`` over the
    whole group), but never by less than ``floor`` times the largest
    gradient of any group: a group whose true gradient is zero, or tiny,
    would otherwise be scored on difference round-off alone.
    ``max_coords`` probes the largest-gradient coordinate plus a seeded
    random sample. ``relu_modules`` are frozen to their pattern at the base
    point while differencing.
    """
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and epsilon > 0):
        raise ValueError("invalid epsilon")
    groups = {n: p for n, p in params.items() if p.requires_grad and p.numel() > 0}
    for p in groups.values():
        p.grad = None
    frozen = _FrozenReLU(relu_modules) if relu_modules else None
    try:
        loss_fn().backward()
        if frozen is not None:
            frozen.start_replay()

        def evaluate():
            if frozen is not None:
                frozen.rewind()
            return float(loss_fn())

        rng = np.random.default_rng(rng_seed)
        grads = {n: p.grad.detach().reshape(-1).clone() if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
                 for n, p in groups.items()}
        global_scale = max((float(g.abs().max()) for g in grads.values()), default=0.0)
        errors = {}
        for name, p in groups.items():
            analytic = grads[name]
            n = p.numel()
            if max_coords is None or n <= max_coords:
                coords = np.arange(n)
            else:
                top = int(torch.argmax(analytic.abs()))
                rest = rng.choice(np.delete(np.arange(n), top), size=max_coords - 1, replace=False)
                coords = np.concatenate([[top], rest])
            numeric = torch.empty(len(coords), dtype=torch.float64)
            with torch.no_grad():
                for j, c in enumerate(coords):
                    at = tuple(int(i) for i in np.unravel_index(c, tuple(p.shape)))  # layout-agnostic
                    orig = p.data[at].item()
                    p.data[at] = orig + epsilon
                    up = evaluate()
                    p.data[at] = orig - epsilon
                    down = evaluate()
                    p.data[at] = orig
                    numeric[j] = (up - down) / (2 * epsilon)
            a = analytic[torch.as_tensor(coords)].to(torch.float64)
            scale = max(float(analytic.abs().max()), float(numeric.abs().max()), floor * global_scale)
            errors[name] = 0.0 if scale == 0.0 else float((a - numeric).abs().max()) / scale
    finally:
        if frozen is not None:
            frozen.close()
    return errors


def relu_modules(model) -> list:
    return [m for m in model.modules() if isinstance(m, torch.nn.ReLU)]


def probe_batch(dataset: SegmentDataset, model: PaseModel, anchors: int = 2, windows: int = 2,
                mask_ratio: float = 0.15, seed: int = 0) -> BatchTensors:
    """Smallest useful batch for gradient checks.

    ``anchors`` segments of exactly ``windows`` frames (two or more so the
    attention query matters) from distinct viseme classes, each using the
    next one (cyclically) as its only negative.
    """
    rng = np.random.default_rng(seed)
    picked, classes = [], set()
    for i in rng.permutation(len(dataset)):
        v = int(dataset.viseme_ids[i])
        if len(dataset.segments[i].frame_indices) == windows and v not in classes:
            picked.append(int(i))
            classes.add(v)
        if len(picked) == anchors:
            break
    if len(picked) < max(anchors, 2):
        raise DataError(f"corpus lacks {windows}-frame segments from enough viseme classes")
    idx = np.array(picked)
    batch = AlignmentBatch(dataset, idx, np.roll(idx, -1)[:, None], dataset.phoneme_ids[idx])
    return collate(batch, model, mask_ratio, np.random.default_rng(step_seed(seed, 0, 1)),
                   np.random.default_rng(step_seed(seed, 0, 2)))


def finite_difference_check(model: PaseModel, batch: BatchTensors, epsilon: float = 1e-5,
                            cfg: ContrastiveConfig = ContrastiveConfig(), max_coords: int | None = None,
                            rng_seed: int = 0, freeze_relu: bool = True) -> float:
    """Worst relative gradient error of the total loss over all trainable parameter groups (64-bit only).

    Parameter groups with ``requires_grad`` off, or no elements, are
    excluded. ``freeze_relu`` differences on the ReLU pattern of the base
    point (see :func:`gradient_errors`).
    """
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and epsilon > 0):
        raise ValueError("invalid epsilon")
    if model.dtype != torch.float64:
        raise ValueError("finite_difference_check needs a float64 model")
    model.eval()
    errors = gradient_errors(lambda: compute_losses(model, batch, cfg)["total"], dict(model.named_parameters()),
                             epsilon, max_coords, rng_seed, relu_modules(model) if freeze_relu else ())
    return max(errors.values(), default=0.0)

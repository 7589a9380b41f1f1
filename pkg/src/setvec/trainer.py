"""Mini-batch training of the input and context encoders with Adam.

Style sets are the batching unit. Each item image in a batch is encoded once
per network and its rows are shared by every pair that needs it.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .corpus import Corpus
from .encoder import CONTEXT_ROLE, INPUT_ROLE, ROLES, EncoderConfig, EncoderParams, encode, init_params
from .objective import Encoded, InsufficientPoolError, build_pair_batch, set_loss_negsampled
from .tensor import FormatError, GradientTape, Tensor, backward, itf_decode, itf_encode

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SV2C"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k: int = 5
    seed: int = 0
    checkpoint_interval: int = 0
    deterministic: bool = True
    dtype: str = "float32"

    def validate(self) -> None:
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.learning_rate <= 0:
            raise ValueError("eps and learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.k < 0 or self.checkpoint_interval < 0:
            raise ValueError("epochs, k and checkpoint_interval must be >= 0 and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# Adam


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor | np.ndarray],
    moments: Mapping[str, tuple[np.ndarray, np.ndarray]],
    t: int,
    config: TrainConfig,
) -> tuple[dict[str, Tensor], dict[str, tuple[np.ndarray, np.ndarray]]]:
    """One bias-corrected Adam update.

    ``moments`` maps each parameter name to its (first, second) moment
    arrays; names absent from it start at zero. Returns new parameter
    tensors and new moments; inputs are left untouched.
    """
    if t < 1:
        raise ValueError(f"Adam step counter must be >= 1, got {t}")
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    new_params, new_moments = {}, {}
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise T.ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = moments.get(name, (np.zeros(p.shape, p.dtype), np.zeros(p.shape, p.dtype)))
        if m.shape != p.shape or v.shape != p.shape:
            raise T.ShapeError(f"adam_step: moment shape mismatch for {name}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params[name] = Tensor._wrap(new.astype(p.dtype, copy=False))
        new_moments[name] = (m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False))
    return new_params, new_moments


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    train_config: TrainConfig
    encoder_config: EncoderConfig
    step: int
    epoch: int
    input_params: EncoderParams
    context_params: EncoderParams
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    rng_state: dict | None = None
    version: int = CHECKPOINT_VERSION

    def params(self, role: str) -> EncoderParams:
        return self.input_params if role == INPUT_ROLE else self.context_params

    def to_bytes(self) -> bytes:
        meta = {
            "train_config": self.train_config.to_dict(),
            "encoder_config": self.encoder_config.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
        }
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        entries = []
        for role in ROLES:
            for name, t in self.params(role).tensors.items():
                entries.append((f"{role}/{name}", t.data))
        for key in sorted(self.moments):
            m, v = self.moments[key]
            entries.append((f"adam.m/{key}", m))
            entries.append((f"adam.v/{key}", v))
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", self.version), struct.pack("<I", len(blob)), blob]
        parts.append(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            parts += [struct.pack("<I", len(nb)), nb, itf_encode(arr)]
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
            raise FormatError("checkpoint: bad magic or truncated header")
        body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
        if zlib.crc32(body) != crc:
            raise FormatError("checkpoint: CRC32 mismatch (corrupt or truncated file)")
        (version,) = struct.unpack_from("<I", body, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint: unsupported version {version}")
        try:
            (blen,) = struct.unpack_from("<I", body, 8)
            meta = json.loads(body[12:12 + blen].decode("utf-8"))
            pos = 12 + blen
            (count,) = struct.unpack_from("<I", body, pos)
            pos += 4
            arrays = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<I", body, pos)
                name = body[pos + 4:pos + 4 + nlen].decode("utf-8")
                arrays[name], pos = itf_decode(body, pos + 4 + nlen)
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint: malformed body ({exc})") from exc
        if pos != len(body):
            raise FormatError("checkpoint: trailing bytes before checksum")
        tcfg = TrainConfig.from_dict(meta["train_config"])
        ecfg = EncoderConfig.from_dict(meta["encoder_config"])
        dtype = np.dtype(tcfg.dtype)
        params = {}
        for role in ROLES:
            prefix = f"{role}/"
            tensors = {n[len(prefix):]: Tensor(a, dtype=dtype) for n, a in arrays.items() if n.startswith(prefix)}
            params[role] = EncoderParams(ecfg, role, tensors)
        moments = {}
        for name, arr in arrays.items():
            if name.startswith("adam.m/"):
                key = name[len("adam.m/"):]
                moments[key] = (arr.astype(dtype), arrays[f"adam.v/{key}"].astype(dtype))
        return cls(tcfg, ecfg, meta["step"], meta["epoch"], params[INPUT_ROLE], params[CONTEXT_ROLE],
                   moments, meta["rng_state"], version)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """Write atomically: a partially written file never replaces ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    data = checkpoint.to_bytes()
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list[tuple[int, int, float]]

    @property
    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for _, epoch, loss in self.loss_log:
            by_epoch.setdefault(epoch, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_loss_log(loss_log, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "loss"])
        for step, epoch, loss in loss_log:
            w.writerow([step, epoch, repr(float(loss))])


def initial_checkpoint(train_config: TrainConfig, encoder_config: EncoderConfig) -> Checkpoint:
    dtype = np.dtype(train_config.dtype)
    rng = np.random.default_rng([train_config.seed, 101])
    return Checkpoint(
        train_config, encoder_config, 0, 0,
        init_params(encoder_config, train_config.seed, INPUT_ROLE, dtype),
        init_params(encoder_config, train_config.seed, CONTEXT_ROLE, dtype),
        {}, rng.bit_generator.state,
    )


@contextlib.contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def train(
    corpus: Corpus,
    train_config: TrainConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    *,
    resume: Checkpoint | None = None,
    checkpoint_dir=None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train both encoders on ``corpus`` and return the final checkpoint.

    With ``resume`` the run continues from that checkpoint's epoch, step,
    parameters, Adam moments and random state up to ``train_config.epochs``.
    Checkpoints are written every ``checkpoint_interval`` epochs when
    ``checkpoint_dir`` is given.
    """
    train_config = train_config or (resume.train_config if resume else TrainConfig())
    encoder_config = encoder_config or (resume.encoder_config if resume else EncoderConfig())
    train_config.validate()
    encoder_config.validate()
    pool = corpus.item_ids
    if corpus.sets and len(pool) - corpus.max_set_size() < train_config.k:
        raise InsufficientPoolError(
            f"insufficient negative pool: k={train_config.k} needs at least {corpus.max_set_size() + train_config.k} items; "
            f"corpus has {len(pool)}"
        )
    ckpt = resume if resume is not None else initial_checkpoint(train_config, encoder_config)
    ckpt = replace(ckpt, train_config=train_config)
    dtype = np.dtype(train_config.dtype)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    params = {INPUT_ROLE: ckpt.input_params.astype(dtype), CONTEXT_ROLE: ckpt.context_params.astype(dtype)}
    moments = dict(ckpt.moments)
    step, epoch = ckpt.step, ckpt.epoch
    loss_log: list[tuple[int, int, float]] = []
    images = corpus.images(pool, dtype=dtype) if corpus.sets and epoch < train_config.epochs else None
    pos = {iid: n for n, iid in enumerate(pool)}
    sets = corpus.sets
    bs = train_config.batch_size

    def snapshot() -> Checkpoint:
        return Checkpoint(train_config, encoder_config, step, epoch, params[INPUT_ROLE], params[CONTEXT_ROLE],
                          dict(moments), rng.bit_generator.state)

    with _single_thread(train_config.deterministic):
        while epoch < train_config.epochs:
            order = rng.permutation(len(sets))
            epoch_losses = []
            for start in range(0, len(sets), bs):
                batch_sets = [sets[int(j)] for j in order[start:start + bs]]
                pb = build_pair_batch(batch_sets, pool, train_config.k, rng)
                in_ids = sorted({i for s in batch_sets for i in s.item_ids}, key=pos.__getitem__)
                ctx_ids = sorted(set(pb.contexts) | {j for negs in pb.negatives for j in negs}, key=pos.__getitem__)
                stats = {INPUT_ROLE: {}, CONTEXT_ROLE: {}}
                trainable = {r: {n: params[r].tensors[n] for n in params[r].trainable_names()} for r in ROLES}
                with GradientTape() as tape:
                    for r in ROLES:
                        tape.watch(*trainable[r].values())
                    U = encode(params[INPUT_ROLE], images[[pos[i] for i in in_ids]], True, stats[INPUT_ROLE])
                    V = encode(params[CONTEXT_ROLE], images[[pos[i] for i in ctx_ids]], True, stats[CONTEXT_ROLE])
                    loss = set_loss_negsampled(Encoded(in_ids, U), Encoded(ctx_ids, V), pb)
                    loss = T.scale(loss, 1.0 / len(batch_sets))
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite loss at step {step + 1}")
                grads = backward(loss, tape)
                step += 1
                for r in ROLES:
                    names = list(trainable[r])
                    keyed = {f"{r}/{n}": trainable[r][n] for n in names}
                    g = {f"{r}/{n}": grads[trainable[r][n]] for n in names}
                    new, new_m = adam_step(keyed, g, moments, step, train_config)
                    moments.update(new_m)
                    updates = {n: new[f"{r}/{n}"] for n in names}
                    updates.update(stats[r])
                    params[r] = params[r].replace(updates)
                loss_log.append((step, epoch + 1, value))
                epoch_losses.append(value)
            epoch += 1
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            logger.info("epoch %d: mean loss %.6f over %d steps", epoch, mean_loss, len(epoch_losses))
            if on_epoch is not None:
                on_epoch(epoch, mean_loss)
            if checkpoint_dir is not None and train_config.checkpoint_interval and epoch % train_config.checkpoint_interval == 0:
                save_checkpoint(snapshot(), Path(checkpoint_dir) / f"checkpoint_epoch{epoch:04d}.sv2c")
    return TrainResult(snapshot(), loss_log)


"""Optimization and evaluation driver.

Bundles every parameter group into one model container, samples a 7:3
referring/reasoning mix, runs teacher-forced forward passes through the
LM, fusion, and both decoders, applies AdamW with warmup-decay, and
round-trips everything through a binary checkpoint format. The
fine-tune mode adds a gradient-detached reference forward pass driven by
the bare-label query and supervises the similarity map against it.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import ImageRecord, candidate_placeholders
from .decoders import (
    BBoxParams,
    MaskDecoderParams,
    bbox_decode,
    dense_features,
    init_bbox_params,
    init_mask_decoder_params,
    mask_decode,
    similarity_map,
)
from .fusion import FusionConfig, RouterParams, fuse_candidates, init_router_params
from .losses import LossReport, LossWeights, bbox_loss, compose_end, compose_ft, mask_loss, sim_loss, text_ce_loss
from .metrics import EvalSample, MetricReport, evaluate_samples
from .mllm import (
    EOS_ID,
    CandidateAbsentError,
    DuplicateCandidateError,
    LmConfig,
    ModelParams,
    VocabSpec,
    build_sequence,
    decode_greedy,
    encode_image_patches,
    encode_text,
    expand_vocabulary,
    extract_candidate_embeddings,
    forward,
    init_params,
    MultimodalSequence,
)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

REFERRING_TEMPLATES = (
    "Please segment the {label}.",
    "Segment the {label} in this image.",
    "Find the {label} and segment it.",
    "{label}",  # bare-label prompt; keeps the finetune reference query in-distribution
)


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 3e-4
    warmup_iters: int = 100
    total_iters: int = 2000
    batch_size: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mode: str = "end2end"
    mix_ratio: tuple = (7, 3)
    weight_decay: float = 0.01
    seed: int = 0
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    mllm_patch: int = 16
    vision_patch: int = 1
    vision_dim: int = 8
    max_seq: int = 384
    sharpness: float = 50.0
    use_box_prompt: bool = True
    max_gen_len: int = 192

    def __post_init__(self):
        if self.mode not in ("end2end", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 < self.warmup_iters <= self.total_iters:
            raise ValueError("need 0 < warmup_iters <= total_iters")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_max <= 0:
            raise ValueError("lr_max must be positive")
        r, s = self.mix_ratio
        if r < 0 or s < 0 or r + s <= 0:
            raise ValueError("mix_ratio components must be nonnegative with a positive sum")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("weights", "fusion"):
                out[f.name] = dict(vars(v))
            elif f.name == "mix_ratio":
                out[f.name] = list(v)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValueError(f"unknown config field {key!r}")
        kwargs = dict(data)
        if "weights" in kwargs:
            try:
                kwargs["weights"] = LossWeights(**kwargs["weights"])
            except TypeError as exc:
                raise ValueError(f"bad config field 'weights': {exc}") from exc
        if "fusion" in kwargs:
            try:
                kwargs["fusion"] = FusionConfig(**kwargs["fusion"])
            except TypeError as exc:
                raise ValueError(f"bad config field 'fusion': {exc}") from exc
        if "mix_ratio" in kwargs:
            kwargs["mix_ratio"] = tuple(kwargs["mix_ratio"])
        return cls(**kwargs)


@dataclass
class TrainSample:
    record: ImageRecord
    question: str
    answer: str
    stream: str  # referring | reasoning
    x_hat_txt: str | None = None


@dataclass
class Model:
    """Every parameter group plus the frozen vision projections."""

    cfg: TrainConfig
    vocab: VocabSpec
    lm: ModelParams
    vision_proj: Tensor
    router: RouterParams
    bbox: BBoxParams
    maskdec: MaskDecoderParams

    def named(self) -> dict[str, Tensor]:
        out = self.lm.named("mllm")
        out["vision.proj"] = self.vision_proj
        out.update(self.router.named("router"))
        out.update(self.bbox.named("bbox"))
        out.update(self.maskdec.named("maskdec"))
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named().items() if t.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named().items() if not t.requires_grad}


def init_model(cfg: TrainConfig) -> Model:
    lm_cfg = LmConfig(
        d_model=cfg.d_model,
        n_blocks=cfg.n_blocks,
        n_heads=cfg.n_heads,
        base_vocab=256,
        patch_size=cfg.mllm_patch,
        max_seq=cfg.max_seq,
    )
    lm = expand_vocabulary(init_params(lm_cfg, seed=cfg.seed), cfg.fusion.n, seed=cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 2)
    p2 = cfg.vision_patch * cfg.vision_patch
    return Model(
        cfg=cfg,
        vocab=VocabSpec(256, cfg.fusion.n),
        lm=lm,
        vision_proj=Tensor(rng.normal(scale=p2**-0.5, size=(p2, cfg.vision_dim))),  # frozen
        router=init_router_params(cfg.fusion, cfg.d_model, seed=cfg.seed + 3),
        bbox=init_bbox_params(cfg.d_model, hidden=8, seed=cfg.seed + 4),
        maskdec=init_mask_decoder_params(cfg.vision_dim, cfg.d_model, seed=cfg.seed + 5),
    )


# -- sampling -------------------------------------------------------------------

def default_answer(label: str, n_candidates: int) -> str:
    return f"The {label}. {candidate_placeholders(n_candidates)}"


def mixed_sampler(referring_pool, reasoning_pool, ratio=(7, 3), seed=0, n_candidates=2):
    """Endless TrainSample stream; referring drawn with probability r/(r+s)."""
    if not referring_pool or not reasoning_pool:
        raise ValueError("mixed_sampler: both pools must be nonempty")
    r, s = ratio
    if r < 0 or s < 0 or r + s <= 0:
        raise ValueError(f"bad mix ratio {ratio}")
    return _sample_stream(referring_pool, reasoning_pool, r / (r + s), seed, n_candidates)


def _sample_stream(referring_pool, reasoning_pool, p_ref, seed, n_candidates):
    rng = np.random.default_rng(seed)
    while True:
        if rng.uniform() < p_ref:
            rec = referring_pool[int(rng.integers(len(referring_pool)))]
            template = REFERRING_TEMPLATES[int(rng.integers(len(REFERRING_TEMPLATES)))]
            yield TrainSample(
                record=rec,
                question=template.format(label=rec.label),
                answer=default_answer(rec.label, n_candidates),
                stream="referring",
                x_hat_txt=rec.label,
            )
        else:
            rec = reasoning_pool[int(rng.integers(len(reasoning_pool)))]
            qa = rec.qa[int(rng.integers(len(rec.qa)))]
            yield TrainSample(
                record=rec,
                question=qa.question,
                answer=qa.answer,
                stream="reasoning",
                x_hat_txt=rec.label,
            )


# -- schedule and optimizer --------------------------------------------------------

def lr_schedule(it: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then linear decay to zero at total_iters."""
    if not 0 <= it < cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters})")
    if it < cfg.warmup_iters:
        return cfg.lr_max * (it + 1) / cfg.warmup_iters
    return cfg.lr_max * (cfg.total_iters - it) / (cfg.total_iters - cfg.warmup_iters)


@dataclass
class OptState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_opt_state(params: dict[str, Tensor]) -> OptState:
    return OptState(
        m={n: np.zeros_like(t.data) for n, t in params.items()},
        v={n: np.zeros_like(t.data) for n, t in params.items()},
    )


def adamw_step(
    params: dict[str, Tensor],
    opt: OptState,
    lr: float,
    weight_decay: float,
    betas=ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> list[str]:
    """One decoupled-weight-decay update; returns names skipped for bad grads."""
    b1, b2 = betas
    opt.step += 1
    t = opt.step
    skipped = []
    for name, p in params.items():
        g = p.grad
        if g is None or not np.all(np.isfinite(g)):
            skipped.append(name)
            log.warning("adamw: skipping %s (non-finite or missing gradient)", name)
            continue
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)
    return skipped


# -- forward / train step -----------------------------------------------------------

def _teacher_forced_pass(model: Model, image: np.ndarray, question: str, answer: str):
    """Full differentiable pass; returns (seq, hidden, logits, fused, box, sim)."""
    cfg = model.cfg
    patches = encode_image_patches(image, cfg.mllm_patch, model.lm.patch_proj)
    q_ids = encode_text(question, model.vocab)
    a_ids = encode_text(answer, model.vocab) + [EOS_ID]
    seq = build_sequence(patches, q_ids, a_ids, model.vocab)
    hidden, logits = forward(seq, model.lm)
    bundle = extract_candidate_embeddings(hidden, seq, model.vocab)
    fused = fuse_candidates(bundle, model.router, cfg.fusion)
    box = bbox_decode(fused.h_det, model.bbox)
    sim = similarity_map(bundle.h_img, fused.h_seg)
    return seq, hidden, logits, fused, box, sim


def _sample_losses(model: Model, sample: TrainSample, mode: str) -> dict[str, Tensor]:
    cfg = model.cfg
    record = sample.record
    seq, hidden, logits, fused, box, sim_pred = _teacher_forced_pass(
        model, record.image, sample.question, sample.answer
    )
    T = len(seq.token_ids)
    targets = seq.token_ids[1:]
    answer_mask = [1.0 if t + 1 >= seq.gen_start else 0.0 for t in range(T - 1)]
    txt = text_ce_loss(logits[0 : T - 1], targets, answer_mask)

    feats = dense_features(record.image, cfg.vision_patch, model.vision_proj)
    mlogits = mask_decode(
        feats, fused.h_seg, box, model.maskdec, record.image.shape,
        sharpness=cfg.sharpness, use_box=cfg.use_box_prompt,
    )
    bce, dice, mask_total = mask_loss(mlogits, record.mask, cfg.weights)
    l1, giou, bbox_total = bbox_loss(box, record.box, cfg.weights)
    parts = {
        "txt": txt, "bce": bce, "dice": dice, "mask": mask_total,
        "l1": l1, "giou": giou, "bbox": bbox_total,
    }

    if mode == "finetune":
        if not sample.x_hat_txt:
            raise ValueError("finetune sample lacks the non-inference query")
        with ad.no_grad():
            _, _, _, _, _, sim_ref = _teacher_forced_pass(
                model, record.image, sample.x_hat_txt, sample.answer
            )
        js, mse, sim_total = sim_loss(sim_pred, sim_ref, cfg.weights)
        parts.update({"js": js, "mse": mse, "sim": sim_total})
    return parts


def train_step(
    model: Model, batch: list[TrainSample], it: int, cfg: TrainConfig, opt: OptState
) -> LossReport:
    """Forward + losses + one AdamW step over the batch mean."""
    if not batch:
        raise ValueError("train_step: empty batch")
    ad.reset_tape()
    sums: dict[str, Tensor] = {}
    for sample in batch:
        for k, v in _sample_losses(model, sample, cfg.mode).items():
            sums[k] = v if k not in sums else sums[k] + v
    inv = 1.0 / len(batch)
    mean = {k: v * inv for k, v in sums.items()}
    report = compose_end(
        mean["txt"], mean["mask"], mean["bbox"],
        bce=mean["bce"], dice=mean["dice"], l1=mean["l1"], giou=mean["giou"],
    )
    if cfg.mode == "finetune":
        report = compose_ft(report, mean["sim"], js=mean["js"], mse=mean["mse"])
    ad.backward(report.total)
    adamw_step(model.trainable(), opt, lr_schedule(it, cfg), cfg.weight_decay)
    return report


def run_training(
    model: Model,
    referring_pool,
    reasoning_pool,
    cfg: TrainConfig,
    opt: OptState | None = None,
    start_iter: int = 0,
    log_fn=None,
) -> tuple[OptState, list[dict]]:
    """Drive total_iters steps; returns the optimizer state and scalar history."""
    opt = opt if opt is not None else init_opt_state(model.trainable())
    sampler = mixed_sampler(
        referring_pool, reasoning_pool, cfg.mix_ratio, seed=cfg.seed,
        n_candidates=cfg.fusion.n,
    )
    history = []
    for it in range(start_iter, cfg.total_iters):
        batch = [next(sampler) for _ in range(cfg.batch_size)]
        report = train_step(model, batch, it, cfg, opt)
        scalars = {"iter": it, **report.scalars()}
        history.append(scalars)
        if log_fn is not None:
            log_fn(scalars)
    return opt, history


# -- evaluation ----------------------------------------------------------------------

def _predict(model: Model, record: ImageRecord):
    """Greedy-decode a record; returns (pred_mask, pred_box) with absent -> zeros/None."""
    cfg = model.cfg
    question = record.qa[0].question if record.qa else REFERRING_TEMPLATES[0].format(label=record.label)
    with ad.no_grad():
        patches = encode_image_patches(record.image, cfg.mllm_patch, model.lm.patch_proj)
        q_ids = encode_text(question, model.vocab)
        prompt = MultimodalSequence(patches, q_ids, gen_start=len(q_ids))
        # generation must leave the full sequence within the context window
        budget = cfg.max_seq - patches.data.shape[0] - len(q_ids)
        generated = decode_greedy(prompt, model.lm, min(cfg.max_gen_len, budget))
        seq = build_sequence(patches, q_ids, generated, model.vocab)
        hidden, _ = forward(seq, model.lm)
        try:
            bundle = extract_candidate_embeddings(hidden, seq, model.vocab)
        except (CandidateAbsentError, DuplicateCandidateError):
            return np.zeros_like(record.mask, dtype=bool), None
        fused = fuse_candidates(bundle, model.router, cfg.fusion)
        box = bbox_decode(fused.h_det, model.bbox)
        feats = dense_features(record.image, cfg.vision_patch, model.vision_proj)
        mlogits = mask_decode(
            feats, fused.h_seg, box, model.maskdec, record.image.shape,
            sharpness=cfg.sharpness, use_box=cfg.use_box_prompt,
        )
    return mlogits.binary(), box


def evaluate_model(
    model: Model,
    records: list[ImageRecord],
    acc_threshold: float = 0.5,
    oracle_mode: bool = False,
) -> tuple[MetricReport, list[EvalSample]]:
    """Greedy-decode every record and score it; oracle_mode scores gt against itself."""
    if not records:
        raise ValueError("evaluate_model: no records")
    samples = []
    for record in records:
        if oracle_mode:
            pred_mask, pred_box = record.mask.copy(), record.box
        else:
            pred_mask, pred_box = _predict(model, record)
        samples.append(
            EvalSample(
                pred_mask=pred_mask,
                gt_mask=record.mask,
                pred_box=pred_box,
                gt_box=record.box,
                category=record.label,
            )
        )
    return evaluate_samples(samples, acc_threshold), samples


# -- checkpointing ---------------------------------------------------------------------

CKPT_MAGIC = b"MDSE"
CKPT_VERSION = 1
_ITER_KEY = "__iteration__"
_STEP_KEY = "__adam_step__"
_CONFIG_KEY = "__config_json__"


class CheckpointError(ValueError):
    """Unreadable or structurally invalid checkpoint file."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    iteration: int
    opt_step: int
    config: TrainConfig

    @property
    def moments(self) -> tuple[dict, dict]:
        m = {k[len("opt.m."):]: v for k, v in self.tensors.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: a for k, a in self.tensors.items() if k.startswith("opt.v.")}
        return m, v


def save_checkpoint(path, model: Model, opt: OptState, iteration: int) -> None:
    """Binary dump of all named tensors, moments, counters, and the config."""
    entries: dict[str, np.ndarray] = {n: t.data for n, t in model.named().items()}
    for n, arr in opt.m.items():
        entries[f"opt.m.{n}"] = arr
    for n, arr in opt.v.items():
        entries[f"opt.v.{n}"] = arr
    entries[_ITER_KEY] = np.asarray(float(iteration))
    entries[_STEP_KEY] = np.asarray(float(opt.step))
    cfg_bytes = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    entries[_CONFIG_KEY] = np.frombuffer(cfg_bytes, dtype=np.uint8).astype(np.float64)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(entries)))
        for name in sorted(entries):
            arr = np.asarray(entries[name], dtype="<f8")  # keeps rank, incl. 0-d
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CKPT_MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
            n_vals = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 8 * n_vals), dtype="<f8")
            tensors[name] = data.reshape(dims).astype(np.float64)
        if fh.read(1):
            raise CheckpointError("trailing bytes after declared tensor count")
    for key in (_ITER_KEY, _STEP_KEY, _CONFIG_KEY):
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks required entry {key}")
    cfg_json = tensors[_CONFIG_KEY].astype(np.uint8).tobytes().decode("utf-8")
    config = TrainConfig.from_dict(json.loads(cfg_json))
    return Checkpoint(
        tensors=tensors,
        iteration=int(tensors[_ITER_KEY].reshape(-1)[0]),
        opt_step=int(tensors[_STEP_KEY].reshape(-1)[0]),
        config=config,
    )


def restore_model(ckpt: Checkpoint) -> tuple[Model, OptState]:
    """Rebuild a model and optimizer state that reproduce saved behavior exactly."""
    model = init_model(ckpt.config)
    for name, tensor in model.named().items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        saved = ckpt.tensors[name]
        if saved.shape != tensor.data.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {saved.shape} != model {tensor.data.shape}"
            )
        tensor.data[...] = saved
    m, v = ckpt.moments
    opt = init_opt_state(model.trainable())
    opt.step = ckpt.opt_step
    for name in opt.m:
        if name in m:
            opt.m[name][...] = m[name]
            opt.v[name][...] = v[name]
    return model, opt

"""End-to-end training loop.

Runs T optimizer steps over deterministic batch streams, evaluates and
checkpoints on a cadence, and appends one JSON line per evaluation event to
metrics.jsonl. Everything downstream of the seed is reproducible: batch
order is a pure function of (seed, step), so resuming from a checkpoint
replays the exact uninterrupted run.

Gradient accumulation note: the contrastive loss couples every pair in the
batch through the B x B logit matrix, so naive per-micro-batch loss
accumulation computes a different (wrong) objective. Accumulation here
works at the embedding level instead: forward all micro-batches without
gradients, take the full-batch loss and its gradients w.r.t. the pooled
embeddings, then re-forward each micro-batch with a tape and backpropagate
its gradient slice into the head parameters.

Wall-time accounting per metrics record excludes evaluation time. In strict
mode wall_time_s is recorded as 0.0 so that logs are byte-comparable.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .determinism import maybe_strict
from .errors import ConfigError, DataError, NumericError
from .heads import TEMPERATURE_INIT, TEMPERATURE_MAX_SCALE, AlignmentHead, HeadConfig
from .loss import contrastive_loss, loss_and_grads
from .optim import DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS, AdamW, Schedule
from .store.sampling import (
    Batch,
    BatchSampler,
    MixtureSource,
    MixtureSpec,
    draw_subset,
    restrict_rows,
    rows_for_sample_ids,
)
from .store.shards import ShardData, concat_shards, read_index_list, read_shard, write_index_list
from .tensor import Tape, Tensor
from . import evals

# config fields that may change across a resume without refusing
NON_SEMANTIC_FIELDS = {
    "eval_every",
    "ckpt_every",
    "strict",
    "memory_budget",
    "text_tower_params",
    "eval_sets",
}


@dataclass
class TrainConfig:
    # model
    head: str = "mlp"
    layers: int = 4
    hidden: int = 0
    out_dim: int = 0
    vocab_size: int = 0
    image_head_layers: int = 0
    image_head_hidden: int = 0
    temperature_init: float = TEMPERATURE_INIT
    temperature_max: float = TEMPERATURE_MAX_SCALE
    # optimization
    batch_size: int = 256
    accum: int = 1
    total_steps: int = 1000
    warmup_steps: int = 20
    peak_lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    # run
    seed: int = 0
    eval_every: int = 100
    ckpt_every: int = 0
    strict: bool = False
    short_batch: str = "drop"
    memory_budget: int = 1 << 20
    text_tower_params: int = 0
    # data
    train_shards: list = field(default_factory=list)
    mixture: list = field(default_factory=list)
    subset: int = 0
    val_shard: str = ""
    eval_sets: list = field(default_factory=list)

    def validate(self, external_data: bool = False):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.accum < 1:
            raise ConfigError(f"accum must be >= 1, got {self.accum}")
        if self.batch_size % self.accum != 0:
            raise ConfigError(
                f"accumulation factor {self.accum} must divide batch size {self.batch_size}"
            )
        if self.batch_size * self.accum > self.memory_budget:
            raise ConfigError(
                f"batch_size * accum = {self.batch_size * self.accum} exceeds memory budget"
                f" {self.memory_budget}"
            )
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.total_steps and self.eval_every > self.total_steps:
            raise ConfigError(
                f"eval cadence {self.eval_every} exceeds total steps {self.total_steps}"
            )
        if not external_data and bool(self.train_shards) == bool(self.mixture):
            raise ConfigError("configure exactly one of train_shards or mixture")

    @property
    def checkpoint_every(self) -> int:
        return self.ckpt_every or self.eval_every

    def semantic_dict(self) -> dict:
        d = asdict(self)
        for key in NON_SEMANTIC_FIELDS:
            d.pop(key, None)
        return d


def head_config_for(config: TrainConfig, dims, inferred_vocab: int) -> HeadConfig:
    vocab = config.vocab_size
    if config.head == "lookup" and vocab == 0:
        vocab = inferred_vocab
    return HeadConfig(
        kind=config.head,
        d_tok=dims.d_tok,
        d_img=dims.d_img,
        d_out=config.out_dim,
        layers=config.layers,
        hidden=config.hidden,
        vocab_size=vocab,
        image_layers=config.image_head_layers,
        image_hidden=config.image_head_hidden,
        temperature_init=config.temperature_init,
        temperature_max=config.temperature_max,
    )


def _slice_batch(batch: Batch, lo: int, hi: int) -> Batch:
    off = batch.token_offsets[lo: hi + 1]
    return Batch(
        sample_ids=batch.sample_ids[lo:hi],
        tokens=batch.tokens[lo:hi],
        mask=batch.mask[lo:hi],
        images=batch.images[lo:hi],
        token_ids=batch.token_ids[off[0]: off[-1]],
        token_offsets=off - off[0],
        short=False,
    )


def accumulate_gradients(head: AlignmentHead, batch: Batch, accum: int):
    """Loss and parameter gradients equal to one whole-batch pass.

    See the module docstring: micro-batches are forwarded twice, once without
    gradients to assemble the full logit matrix and once with a tape to push
    the per-slice embedding gradients into the parameters.
    """
    b = len(batch)
    if accum < 1:
        raise ConfigError(f"accumulation factor must be >= 1, got {accum}")
    if b % accum != 0:
        raise ConfigError(f"accumulation factor {accum} does not divide batch of {b}")
    if accum == 1:
        return loss_and_grads(head, batch)

    for p in head.parameters():
        p.zero_grad()
    micro = b // accum
    img_parts, txt_parts = [], []
    for lo in range(0, b, micro):
        mb = _slice_batch(batch, lo, lo + micro)
        img, txt = head.embed_batch(mb, tape=None)
        img_parts.append(img.data)
        txt_parts.append(txt.data)

    img_all = Tensor(np.concatenate(img_parts), requires_grad=True)
    txt_all = Tensor(np.concatenate(txt_parts), requires_grad=True)
    tape = Tape()
    loss = contrastive_loss(img_all, txt_all, head.log_scale, tape)
    tape.backward(loss)

    for i, lo in enumerate(range(0, b, micro)):
        mb = _slice_batch(batch, lo, lo + micro)
        mtape = Tape()
        img, txt = head.embed_batch(mb, mtape)
        img.accumulate_grad(img_all.grad[lo: lo + micro].astype(img.data.dtype))
        txt.accumulate_grad(txt_all.grad[lo: lo + micro].astype(txt.data.dtype))
        mtape.backward()

    grads = {
        p.name: (np.zeros_like(p.data) if p.grad is None else p.grad)
        for p in head.parameters()
    }
    return loss.data.item(), grads


@dataclass
class EvalPack:
    name: str
    data: ShardData
    templates: ShardData
    label_map: dict | None


class Run:
    """Materialized run: data, head, optimizer, sampler and the run dir."""

    def __init__(
        self,
        config: TrainConfig,
        run_dir: str,
        sources: list[ShardData] | None = None,
        weights: list[int] | None = None,
        val: ShardData | None = None,
        eval_packs: list[EvalPack] | None = None,
        resume_from: str | None = None,
    ):
        config.validate(external_data=sources is not None)
        self.config = config
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)

        if sources is None:
            sources, weights = self._load_sources()
        if weights is None:
            weights = [1] * len(sources)
        sources = self._apply_subsets(sources)
        names = [s.path or f"source{i}" for i, s in enumerate(sources)]
        self.mixture = MixtureSpec(
            tuple(MixtureSource(d, w, n) for d, w, n in zip(sources, weights, names))
        )
        self.sampler = BatchSampler(
            self.mixture, config.batch_size, config.seed, config.short_batch
        )
        self.val = val if val is not None else (
            read_shard(config.val_shard) if config.val_shard else None
        )
        self.eval_packs = eval_packs if eval_packs is not None else self._load_eval_packs()

        dims = sources[0].dims
        inferred_vocab = 0
        if config.head == "lookup" and config.vocab_size == 0:
            inferred_vocab = max(
                (int(s.token_ids.max()) + 1 for s in sources if s.token_ids.size), default=1
            )
        self.head_config = head_config_for(config, dims, inferred_vocab)
        self.schedule = Schedule(config.peak_lr, config.warmup_steps, max(config.total_steps, 1))

        if resume_from is not None:
            ckpt = load_checkpoint(resume_from)
            self._check_resume_compat(ckpt)
            self.head = ckpt.build_head()
            self.optimizer = ckpt.build_optimizer(self.head)
            if self.optimizer is None:
                raise ConfigError(f"checkpoint {resume_from} has no optimizer state to resume")
            self.step = ckpt.step
            state = ckpt.meta.get("run_state") or {}
            self.wall_time = float(state.get("wall_time_s", 0.0))
            self.best_recall1 = state.get("best_recall1")
            self.best_step = state.get("best_step")
        else:
            self.head = AlignmentHead(self.head_config, seed=config.seed)
            self.optimizer = AdamW(
                self.head.named_parameters(),
                weight_decay=config.weight_decay,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.eps,
            )
            self.step = 0
            self.wall_time = 0.0
            self.best_recall1 = None
            self.best_step = None

    def _check_resume_compat(self, ckpt):
        stored = ckpt.meta.get("run")
        if stored is None:
            raise ConfigError("checkpoint carries no run config; cannot verify compatibility")
        current = self.config.semantic_dict()
        diffs = []
        for key in sorted(set(stored) | set(current)):
            if stored.get(key) != current.get(key):
                diffs.append(f"{key}: checkpoint={stored.get(key)!r} config={current.get(key)!r}")
        if diffs:
            raise ConfigError("resume refused; semantic config differs:\n  " + "\n  ".join(diffs))

    def _load_sources(self):
        cfg = self.config
        if cfg.mixture:
            sources, weights = [], []
            for entry in cfg.mixture:
                shards = [read_shard(p) for p in entry["shards"]]
                data = concat_shards(shards)
                data.path = entry.get("name", "") or data.path
                sources.append(data)
                weights.append(int(entry.get("weight", 1)))
            self._subset_sizes = [int(e.get("subset", 0)) for e in cfg.mixture]
            return sources, weights
        data = concat_shards([read_shard(p) for p in cfg.train_shards])
        self._subset_sizes = [cfg.subset]
        return [data], [1]

    def _apply_subsets(self, sources):
        sizes = getattr(self, "_subset_sizes", None)
        if sizes is None:
            sizes = [0] * len(sources)
        out = []
        for i, (data, size) in enumerate(zip(sources, sizes)):
            if not size or size >= len(data):
                out.append(data)
                continue
            index_path = os.path.join(self.run_dir, f"subset_{i}.ids")
            if os.path.exists(index_path):
                rows = rows_for_sample_ids(data, read_index_list(index_path))
            else:
                rows = draw_subset(data, size, self.config.seed + 7919 * i)
                write_index_list(index_path, data.sample_ids[rows])
            out.append(restrict_rows(data, rows))
        return out

    def _load_eval_packs(self):
        packs = []
        for entry in self.config.eval_sets:
            packs.append(
                EvalPack(
                    name=entry["name"],
                    data=read_shard(entry["shard"]),
                    templates=read_shard(entry["templates"]),
                    label_map=(
                        evals.read_label_map(entry["label_map"])
                        if entry.get("label_map") else None
                    ),
                )
            )
        return packs

    # -- evaluation ------------------------------------------------------

    def evaluate(self) -> tuple[dict, dict]:
        zero_shot = {}
        for pack in self.eval_packs:
            classifier = evals.build_classifier(self.head, pack.templates)
            zero_shot[pack.name] = evals.zero_shot_accuracy(
                classifier, pack.data, self.head, pack.label_map
            )
        recall = {}
        if self.val is not None:
            txt = evals.embed_text_set(self.head, self.val)
            img = evals.embed_image_set(self.head, self.val.images[:, 0])
            recall = evals.recall_suite(img, txt)
        return zero_shot, recall

    # -- bookkeeping -----------------------------------------------------

    def _metrics_path(self):
        return os.path.join(self.run_dir, "metrics.jsonl")

    def _append_metrics(self, record: dict):
        with open(self._metrics_path(), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")

    def _wall_value(self) -> float:
        # strict runs must be byte-comparable, so the clock reads zero there
        return 0.0 if self.config.strict else self.wall_time

    def _record(self, train_loss: float, zero_shot: dict, recall: dict) -> dict:
        return {
            "step": self.step,
            "wall_time_s": self._wall_value(),
            "train_loss": train_loss,
            "temperature": self.head.scale(),
            "lr": self.schedule.lr_at(min(self.step, self.schedule.total_steps)),
            "zero_shot": zero_shot,
            "recall_at": recall,
        }

    def _run_state(self) -> dict:
        return {
            "wall_time_s": self._wall_value(),
            "best_recall1": self.best_recall1,
            "best_step": self.best_step,
        }

    def _save(self, name: str):
        save_checkpoint(
            os.path.join(self.run_dir, name),
            self.head,
            self.optimizer,
            step=self.step,
            run_config=self.config.semantic_dict(),
            run_state=self._run_state(),
        )

    def _checkpoint(self):
        self._save("last.apec")
        self._save(f"ckpt_{self.step:08d}.apec")

    def _eval_event(self, train_loss: float):
        zero_shot, recall = self.evaluate()
        self._append_metrics(self._record(train_loss, zero_shot, recall))
        r1 = recall.get("1")
        if r1 is not None and (self.best_recall1 is None or r1 > self.best_recall1):
            self.best_recall1 = r1
            self.best_step = self.step
            self._save("best.apec")

    # -- the loop --------------------------------------------------------

    def train(self) -> dict:
        cfg = self.config
        with maybe_strict(cfg.strict):
            if self.step == 0:
                loss0, _ = self._forward_loss_only()
                self._eval_event(loss0)
                self._checkpoint()
            last_loss = math.nan
            for step in range(self.step + 1, cfg.total_steps + 1):
                t0 = time.perf_counter()
                batch = self.sampler.batch(step - 1)
                lr = self.schedule.lr_at(step - 1)
                # short final batches (keep policy) fall back to a single pass
                accum = cfg.accum if len(batch) % cfg.accum == 0 else 1
                try:
                    last_loss, grads = accumulate_gradients(self.head, batch, accum)
                    if not math.isfinite(last_loss):
                        raise NumericError(f"non-finite training loss at step {step}")
                    self.optimizer.step(grads, lr)
                except NumericError as exc:
                    # leave the last-good checkpoint in place and abort
                    raise NumericError(f"{exc}; last checkpoint retained at step {self.step}")
                self.head.clamp_temperature()
                self.step = step
                self.wall_time += time.perf_counter() - t0
                if step % cfg.eval_every == 0 or step == cfg.total_steps:
                    self._eval_event(last_loss)
                if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
                    self._checkpoint()
        return {
            "final_step": self.step,
            "best_recall1": self.best_recall1,
            "best_step": self.best_step,
            "run_dir": self.run_dir,
        }

    def _forward_loss_only(self):
        batch = self.sampler.batch(0)
        img, txt = self.head.embed_batch(batch, tape=None)
        loss = contrastive_loss(img, txt, self.head.log_scale, tape=None)
        return loss.data.item(), batch


def train(config: TrainConfig, run_dir: str, **data) -> dict:
    """Fresh training run; writes config echo, metrics and checkpoints."""
    run = Run(config, run_dir, **data)
    _write_run_metadata(config, run_dir)
    return run.train()


def resume(config: TrainConfig, run_dir: str, checkpoint_path: str | None = None, **data) -> dict:
    """Continue a run from its latest (or a named) checkpoint in place."""
    ckpt = checkpoint_path or os.path.join(run_dir, "last.apec")
    if not os.path.exists(ckpt):
        raise DataError(f"no checkpoint at {ckpt}")
    run = Run(config, run_dir, resume_from=ckpt, **data)
    return run.train()


def _write_run_metadata(config: TrainConfig, run_dir: str):
    from .config import write_resolved_config  # local import, config imports TrainConfig

    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "seed.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{config.seed}\n")
    write_resolved_config(config, os.path.join(run_dir, "config.toml"))

"""Staged training: LR schedules, freeze plans, and declarative TrainPlans.

A plan is an ordered list of stages; each stage fixes an objective (MLM or
de-noising), a step count, a freeze set, and an LR schedule.  Stages thread
model parameters and optimizer state, so unfreezing at a stage boundary picks
up zero moments for the newly trainable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import data as D
from . import model as M
from .optim import AdamConfig, OptimState, adam_step


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass
class LrSchedule:
    peak: float
    total_steps: int
    warmup_steps: int = 0
    warmup_kind: str = "linear"  # "linear" (from 0) | "exponential" (from floor)
    floor: float = 1e-7
    end: float = 0.0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if not (self.peak > self.end >= 0.0):
            raise ValueError("schedule requires peak > end >= 0")
        if self.warmup_kind not in ("linear", "exponential"):
            raise ValueError(f"unknown warmup kind: {self.warmup_kind}")


def lr_at(s, step):
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside schedule range [0, {s.total_steps}]")
    if s.warmup_steps > 0 and step < s.warmup_steps:
        frac = step / s.warmup_steps
        if s.warmup_kind == "linear":
            return s.peak * frac
        return s.floor * (s.peak / s.floor) ** frac  # geometric interpolation
    if s.total_steps == s.warmup_steps:
        return s.peak
    frac = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.peak + (s.end - s.peak) * frac


# ---------------------------------------------------------------------------
# freeze plans

FREEZE_TAGS = {
    "Encoder": ("enc.", "embed."),
    "Decoder": ("dec.",),
    "DecoderEmbedding": ("dec.embed.tok",),
    "Embedding": ("embed.",),
    "LmHead": ("lm_head.",),
    "MlmHead": ("mlm_head.",),
    "Fusion": ("fusion.",),
    "Head": ("head.",),
}


def apply_freeze_plan(store, freeze):
    """Set trainability exactly per the stage's freeze set; everything not
    named stays trainable.  Tied names share storage, so freezing any member
    of a tie group freezes the group."""
    store.set_all_trainable(True)
    for tag in sorted(freeze):
        prefixes = FREEZE_TAGS.get(tag)
        if prefixes is None:
            raise ValueError(f"unknown freeze tag: {tag}")
        matched = [n for n in store.names() if n.startswith(prefixes)]
        if not matched:
            raise ValueError(f"freeze tag {tag} matches no parameters")
        for name in matched:
            store.set_trainable(name, False)
    return store


# ---------------------------------------------------------------------------
# stages and plans

MLM = "mlm"
DENOISE = "denoise"


@dataclass
class TrainStage:
    name: str
    objective: str  # MLM | DENOISE
    steps: int
    lr: LrSchedule
    noise: D.NoiseConfig
    freeze: tuple = ()
    lr_offset: int = 0  # lets stages share one continuous schedule
    batch_size: int = 8  # packed sequences per update
    batch_tokens: int = 1_000_000  # nominal batch scale, used for cost accounting

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("stage step count must be positive")
        if self.objective not in (MLM, DENOISE):
            raise ValueError(f"unknown objective: {self.objective}")


@dataclass
class PlanInit:
    kind: str = "random"  # "random" | "checkpoint" | "warm_start"
    path: str | None = None


@dataclass
class TrainPlan:
    name: str
    model: M.ModelConfig
    stages: list
    init: PlanInit = field(default_factory=PlanInit)
    inherited_tu: list = field(default_factory=list)  # [(label, TU)] cost metadata

    def __post_init__(self):
        for st in self.stages:
            if st.objective == DENOISE and self.model.decoder_layers < 1:
                raise ValueError(f"stage {st.name}: de-noising requires a decoder")


# ---------------------------------------------------------------------------
# batching


def _pad_batch(rows, fill):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_mlm_batch(seqs, nc, vocab_size, rngs):
    """Corrupt and pad a list of id sequences; one RNG per slot."""
    inputs, labels = [], []
    for seq, rng in zip(seqs, rngs):
        inp, lab = D.mlm_corrupt(seq, nc, rng, vocab_size)
        inputs.append(inp)
        labels.append(lab)
    tokens = _pad_batch(inputs, D.PAD)
    labs = _pad_batch(labels, ag.IGNORE)
    pad_mask = tokens != D.PAD
    return tokens, labs, pad_mask


def make_denoise_batch(seqs, nc, rngs):
    """Corrupt into (source, BOS-shifted decoder input, labels with EOS)."""
    srcs, dec_ins, labels = [], [], []
    for seq, rng in zip(seqs, rngs):
        src, tgt = D.denoise_corrupt(seq, nc, rng)
        srcs.append(src)
        dec_ins.append([D.BOS] + tgt)
        labels.append(tgt + [D.EOS])
    src_tokens = _pad_batch(srcs, D.PAD)
    src_mask = src_tokens != D.PAD
    dec_in = _pad_batch(dec_ins, D.PAD)
    labs = _pad_batch(labels, ag.IGNORE)
    return src_tokens, src_mask, dec_in, labs


def mlm_step_loss(cfg, store, tokens, labels, pad_mask, train_rng=None):
    states = M.encoder_forward(cfg, store, tokens, pad_mask, train_rng=train_rng)
    logits = M.mlm_logits(store, M.encoder_output(store, states))
    flat = ag.reshape(logits, (-1, cfg.vocab_size))
    return ag.softmax_cross_entropy(flat, labels.reshape(-1))


def denoise_step_loss(cfg, store, src_tokens, src_mask, dec_in, labels, train_rng=None):
    states = M.encoder_forward(cfg, store, src_tokens, src_mask, train_rng=train_rng)
    logits = M.decoder_forward(cfg, store, dec_in, states, src_mask, train_rng=train_rng)
    flat = ag.reshape(logits, (-1, cfg.vocab_size))
    return ag.softmax_cross_entropy(flat, labels.reshape(-1))


# ---------------------------------------------------------------------------
# the loop


def run_stage(cfg, store, sequences, stage, seed, opt_state=None, adam=None,
              step_base=0):
    """Execute exactly stage.steps optimizer updates; returns the per-step
    trace [(step, stage, lr, loss)].  Mutates `store` and `opt_state`."""
    if not sequences:
        raise ValueError("run_stage needs a nonempty sequence list")
    if opt_state is None:
        opt_state = OptimState()
    if adam is None:
        adam = AdamConfig()
    apply_freeze_plan(store, stage.freeze)
    trace = []
    for step in range(stage.steps):
        lr = lr_at(stage.lr, stage.lr_offset + step)
        pick_rng = np.random.default_rng(D.seed_for(seed, 2 * step))
        drop_rng = np.random.default_rng(D.seed_for(seed, 2 * step + 1))
        idx = pick_rng.integers(0, len(sequences), size=stage.batch_size)
        batch_seqs = [sequences[i] for i in idx]
        # per-slot corruption seeds keep results independent of assembly order
        slot_rngs = [np.random.default_rng(np.random.SeedSequence([seed, step, int(s)]))
                     for s in range(stage.batch_size)]
        if stage.objective == MLM:
            tokens, labels, pad_mask = make_mlm_batch(batch_seqs, stage.noise,
                                                      cfg.vocab_size, slot_rngs)
            loss = mlm_step_loss(cfg, store, tokens, labels, pad_mask, train_rng=drop_rng)
        else:
            src, src_mask, dec_in, labels = make_denoise_batch(batch_seqs, stage.noise, slot_rngs)
            loss = denoise_step_loss(cfg, store, src, src_mask, dec_in, labels, train_rng=drop_rng)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss at stage '{stage.name}' step {step_base + step}"
            )
        store.zero_grad()
        ag.backward(loss)
        adam_step(store, store.gradient_map(), opt_state, lr, adam)
        trace.append({"step": step_base + step, "stage": stage.name,
                      "lr": lr, "loss": value})
    return trace


def init_plan_store(plan, seed, donor=None, checkpoint_store=None):
    cfg = plan.model
    if plan.init.kind == "warm_start":
        if donor is None:
            raise ValueError("warm-start plan requires a donor encoder store")
        return M.warm_start_seq2seq(donor, cfg, seed)
    if plan.init.kind == "checkpoint":
        if checkpoint_store is None:
            raise ValueError("checkpoint plan requires a loaded store")
        return checkpoint_store
    if plan.init.kind == "extract":
        if checkpoint_store is None:
            raise ValueError("extraction plan requires a loaded seq2seq store")
        return M.extract_encoder(checkpoint_store, cfg)
    if cfg.decoder_layers == 0:
        return M.init_mlm_encoder(cfg, seed)
    return M.init_seq2seq(cfg, seed)


def run_plan(plan, sequences, seed, donor=None, checkpoint_store=None,
             adam=None, on_stage_end=None):
    """Run all stages in order; returns (store, per-stage traces, opt_state)."""
    store = init_plan_store(plan, seed, donor=donor, checkpoint_store=checkpoint_store)
    opt_state = OptimState()
    traces = []
    step_base = 0
    for k, stage in enumerate(plan.stages):
        stage_seed = int(np.random.SeedSequence([seed, 1000 + k]).generate_state(1)[0])
        trace = run_stage(plan.model, store, sequences, stage, stage_seed,
                          opt_state=opt_state, adam=adam, step_base=step_base)
        traces.append(trace)
        step_base += stage.steps
        if on_stage_end is not None:
            on_stage_end(k, stage, store, opt_state, trace)
    return store, traces, opt_state


# ---------------------------------------------------------------------------
# evaluation helpers


def eval_denoise_loss(cfg, store, pairs, batch_size=16):
    """Teacher-forced mean token NLL over fixed (source, target) pairs."""
    total_nll, total_tok = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        src = _pad_batch([s for s, _ in chunk], D.PAD)
        src_mask = src != D.PAD
        dec_in = _pad_batch([[D.BOS] + t for _, t in chunk], D.PAD)
        labels = _pad_batch([t + [D.EOS] for _, t in chunk], ag.IGNORE)
        loss = denoise_step_loss(cfg, store, src, src_mask, dec_in, labels)
        n = int((labels != ag.IGNORE).sum())
        total_nll += loss.item() * n
        total_tok += n
    return total_nll / max(total_tok, 1)


def eval_mlm_loss(cfg, store, batches):
    """Mean token NLL over pre-corrupted (tokens, labels, pad_mask) batches."""
    total_nll, total_tok = 0.0, 0
    for tokens, labels, pad_mask in batches:
        loss = mlm_step_loss(cfg, store, tokens, labels, pad_mask)
        n = int((labels != ag.IGNORE).sum())
        total_nll += loss.item() * n
        total_tok += n
    return total_nll / max(total_tok, 1)

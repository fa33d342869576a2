"""Fine-tuning protocols and evaluation metrics.

Metrics are pure functions; fine-tuning reuses the training module's optimizer
and keeps the checkpoint with the best validation metric.  The embedding layer
is frozen during fine-tuning by default.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import data as D
from . import model as M
from . import train as T
from .optim import AdamConfig, OptimState, adam_step


# ---------------------------------------------------------------------------
# string metrics


def sciem(pred, gold):
    """Space- and case-insensitive exact match."""
    strip = lambda s: re.sub(r"\s+", "", s).lower()
    return strip(pred) == strip(gold)


def _ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def _overlap_f1(pred, gold, n):
    pc, gc = _ngram_counts(pred, n), _ngram_counts(gold, n)
    overlap = sum(min(c, gc.get(g, 0)) for g, c in pc.items())
    p_total = max(sum(pc.values()), 0)
    g_total = max(sum(gc.values()), 0)
    if overlap == 0:
        return 0.0
    p = overlap / p_total
    r = overlap / g_total
    return 2 * p * r / (p + r)


def _lcs_len(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(pred, gold):
    """(rouge1_f, rouge2_f, rougeL_f) over lowercased whitespace tokens."""
    pt = pred.lower().split()
    gt = gold.lower().split()
    if not pt or not gt:
        return (0.0, 0.0, 0.0)
    r1 = _overlap_f1(pt, gt, 1)
    r2 = _overlap_f1(pt, gt, 2)
    lcs = _lcs_len(pt, gt)
    if lcs == 0:
        rl = 0.0
    else:
        p = lcs / len(pt)
        r = lcs / len(gt)
        rl = 2 * p * r / (p + r)
    return (r1, r2, rl)


# ---------------------------------------------------------------------------
# BIO entity F1


def bio_chunks(labels):
    """Maximal (type, start, end) chunks; a dangling I-X starts a new chunk
    (lenient repair).  end is inclusive."""
    chunks = []
    cur_type, cur_start = None, None
    for i, lab in enumerate(labels):
        if lab == "O":
            if cur_type is not None:
                chunks.append((cur_type, cur_start, i - 1))
                cur_type = None
            continue
        if len(lab) < 3 or lab[1] != "-" or lab[0] not in "BI":
            raise ValueError(f"malformed BIO label: {lab!r}")
        prefix, etype = lab[0], lab[2:]
        if prefix == "B" or cur_type != etype:
            if cur_type is not None:
                chunks.append((cur_type, cur_start, i - 1))
            cur_type, cur_start = etype, i
    if cur_type is not None:
        chunks.append((cur_type, cur_start, len(labels) - 1))
    return chunks


def entity_f1(pred_seqs, gold_seqs):
    """Micro-averaged exact-chunk (type, start, end) precision/recall/F1,
    ignoring the O tag.  Zero-prediction precision counts as 0."""
    if len(pred_seqs) != len(gold_seqs):
        raise ValueError("pred/gold corpus size mismatch")
    n_pred = n_gold = n_correct = 0
    for pred, gold in zip(pred_seqs, gold_seqs):
        if len(pred) != len(gold):
            raise ValueError("pred/gold sequence length mismatch")
        pc = bio_chunks(pred)
        gc = set(bio_chunks(gold))
        n_pred += len(pc)
        n_gold += len(gc)
        n_correct += sum(1 for c in pc if c in gc)
    precision = n_correct / n_pred if n_pred else 0.0
    recall = n_correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenConfig:
    beam_size: int = 3
    max_len: int = 32

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def _next_logprobs(cfg, store, enc_states, src_mask, prefixes):
    """Log-probabilities of the next token for each decoder prefix."""
    dec_in = T._pad_batch(prefixes, D.PAD)
    logits = M.decoder_forward(cfg, store, dec_in, enc_states, src_mask)
    out = np.empty((len(prefixes), cfg.vocab_size))
    for i, p in enumerate(prefixes):
        row = logits.data[i, len(p) - 1]
        z = row - row.max()
        out[i] = z - np.log(np.exp(z).sum())
    return out


def beam_search(cfg, store, src_ids, gc):
    """Length-bounded beam search by total log-probability; ties break on the
    lower token id.  Returns the best output id sequence (without BOS/EOS)."""
    src = np.asarray([src_ids], dtype=np.int64)
    src_mask = src != D.PAD
    enc_states = M.encoder_forward(cfg, store, src, src_mask)
    beams = [([D.BOS], 0.0)]  # (prefix, total logprob)
    finished = []
    for _ in range(gc.max_len):
        prefixes = [p for p, _ in beams]
        # encoder memory is shared; tile states across live beams
        tiled = [ag.Tensor(np.repeat(s.data, len(beams), axis=0)) for s in enc_states]
        tiled_mask = np.repeat(src_mask, len(beams), axis=0)
        logprobs = _next_logprobs(cfg, store, tiled, tiled_mask, prefixes)
        candidates = []
        for bi, (prefix, score) in enumerate(beams):
            for tok in range(cfg.vocab_size):
                candidates.append((score + logprobs[bi, tok], tok, bi))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_beams = []
        for cscore, tok, bi in candidates[: gc.beam_size * 2]:
            if tok == D.EOS:
                finished.append((beams[bi][0][1:], cscore))
            else:
                next_beams.append((beams[bi][0] + [tok], cscore))
            if len(next_beams) >= gc.beam_size:
                break
        if not next_beams:
            break
        beams = next_beams
        if len(beams[0]) - 1 >= gc.max_len:
            break
    for prefix, score in beams:
        if len(prefix) - 1 >= gc.max_len:
            finished.append((prefix[1:], score))
    if not finished:
        finished = [(p[1:], s) for p, s in beams]
    finished.sort(key=lambda c: (-c[1], c[0]))
    return finished[0][0]


def perplexity(cfg, store, pairs, batch_size=16):
    """exp(mean token NLL) over teacher-forced (source, target) pairs."""
    if not pairs:
        raise ValueError("perplexity needs a nonempty stream")
    return float(np.exp(T.eval_denoise_loss(cfg, store, pairs, batch_size)))


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 20
    batch_size: int = 16
    epochs: int = 5
    max_updates: int = 1000
    metric: str = "accuracy"  # accuracy | entity_f1 | sciem | perplexity
    head_hidden: list = field(default_factory=lambda: [64])
    freeze: tuple = ("Embedding",)
    weight_decay: float = 0.1
    dropout: float = 0.1


def _metric_better(metric, a, b):
    return a < b if metric == "perplexity" else a > b


def finetune_classifier(cfg, store, spec, train_set, dev_set, fcfg, seed):
    """Fine-tune a classification or labeling head on an encoder.

    `train_set`/`dev_set` items: classification (ids, label);
    labeling (ids, word_starts, labels-per-word).
    Returns (best ParameterStore, record with per-epoch metrics).
    """
    if not train_set or not dev_set:
        raise ValueError("empty train or validation split")
    ft = M.attach_head(store, spec, cfg.d_model, seed)
    T.apply_freeze_plan(ft, fcfg.freeze)
    if "mlm_head.w" in ft:  # unused during fine-tuning; keep it out of the update
        if len(ft.group_of("mlm_head.w")) == 1:  # tied heads follow the embedding
            ft.set_trainable("mlm_head.w", False)
        ft.set_trainable("mlm_head.b", False)
    adam = AdamConfig(weight_decay=fcfg.weight_decay)
    opt = OptimState()
    total = min(fcfg.max_updates, fcfg.epochs * max(1, len(train_set) // fcfg.batch_size))
    sched = T.LrSchedule(peak=fcfg.peak_lr, total_steps=max(total, 1),
                         warmup_steps=min(fcfg.warmup_steps, max(total, 1)))
    rng = np.random.default_rng(seed)
    run_cfg = M.ModelConfig(**{**cfg.to_dict(), "dropout": fcfg.dropout})
    best_metric, best_store, history = None, None, []
    step = 0
    for _epoch in range(fcfg.epochs):
        order = rng.permutation(len(train_set))
        for lo in range(0, len(order), fcfg.batch_size):
            if step >= total:
                break
            batch = [train_set[i] for i in order[lo : lo + fcfg.batch_size]]
            loss = _head_loss(run_cfg, ft, spec, batch,
                              train_rng=np.random.default_rng(D.seed_for(seed, step)))
            ft.zero_grad()
            ag.backward(loss)
            adam_step(ft, ft.gradient_map(), opt, T.lr_at(sched, step), adam)
            step += 1
        value = _head_metric(cfg, ft, spec, dev_set, fcfg.metric)
        history.append(value)
        if best_metric is None or _metric_better(fcfg.metric, value, best_metric):
            best_metric = value
            best_store = ft.copy()
    record = {"metric": fcfg.metric, "best": best_metric, "epochs": history,
              "updates": step}
    return best_store, record


def _head_loss(cfg, ft, spec, batch, train_rng=None):
    if spec.kind == "classification":
        tokens = T._pad_batch([ids for ids, _ in batch], D.PAD)
        pad_mask = tokens != D.PAD
        feats = M.head_features(cfg, ft, spec, tokens, pad_mask, train_rng=train_rng)
        labels = np.array([lab for _, lab in batch], dtype=np.int64)
    else:
        tokens = T._pad_batch([ids for ids, _, _ in batch], D.PAD)
        pad_mask = tokens != D.PAD
        starts = [ws for _, ws, _ in batch]
        feats = M.head_features(cfg, ft, spec, tokens, pad_mask, word_starts=starts,
                                train_rng=train_rng)
        labels = np.concatenate([np.asarray(labs, dtype=np.int64) for _, _, labs in batch])
    logits = M.head_forward(ft, spec, feats)
    return ag.softmax_cross_entropy(logits, labels)


def _head_metric(cfg, ft, spec, dev_set, metric):
    preds, golds = [], []
    for item in dev_set:
        if spec.kind == "classification":
            ids, label = item
            tokens = np.asarray([ids], dtype=np.int64)
            feats = M.head_features(cfg, ft, spec, tokens, tokens != D.PAD)
            preds.append(int(np.argmax(M.head_forward(ft, spec, feats).data[0])))
            golds.append(label)
        else:
            ids, starts, labels = item
            tokens = np.asarray([ids], dtype=np.int64)
            feats = M.head_features(cfg, ft, spec, tokens, tokens != D.PAD,
                                    word_starts=[starts])
            preds.append(np.argmax(M.head_forward(ft, spec, feats).data, axis=1).tolist())
            golds.append(labels)
    if metric == "accuracy":
        return float(np.mean([p == g for p, g in zip(preds, golds)]))
    if metric == "entity_f1":
        return entity_f1(preds, golds)[2]
    raise ValueError(f"metric {metric} not valid for head fine-tuning")


def finetune_seq2seq(cfg, store, train_pairs, dev_pairs, fcfg, seed):
    """Fine-tune a seq2seq model on fixed (source ids, target ids) pairs,
    selecting the best checkpoint by teacher-forced perplexity or SCIEM."""
    if not train_pairs or not dev_pairs:
        raise ValueError("empty train or validation split")
    ft = store.copy()
    T.apply_freeze_plan(ft, fcfg.freeze)
    adam = AdamConfig(weight_decay=fcfg.weight_decay)
    opt = OptimState()
    total = min(fcfg.max_updates, fcfg.epochs * max(1, len(train_pairs) // fcfg.batch_size))
    sched = T.LrSchedule(peak=fcfg.peak_lr, total_steps=max(total, 1),
                         warmup_steps=min(fcfg.warmup_steps, max(total, 1)),
                         warmup_kind="exponential")
    rng = np.random.default_rng(seed)
    run_cfg = M.ModelConfig(**{**cfg.to_dict(), "dropout": fcfg.dropout})
    best_metric, best_store, history = None, None, []
    step = 0
    for _epoch in range(fcfg.epochs):
        order = rng.permutation(len(train_pairs))
        for lo in range(0, len(order), fcfg.batch_size):
            if step >= total:
                break
            chunk = [train_pairs[i] for i in order[lo : lo + fcfg.batch_size]]
            src = T._pad_batch([s for s, _ in chunk], D.PAD)
            src_mask = src != D.PAD
            dec_in = T._pad_batch([[D.BOS] + t for _, t in chunk], D.PAD)
            labels = T._pad_batch([t + [D.EOS] for _, t in chunk], ag.IGNORE)
            loss = T.denoise_step_loss(run_cfg, ft, src, src_mask, dec_in, labels,
                                       train_rng=np.random.default_rng(D.seed_for(seed, step)))
            ft.zero_grad()
            ag.backward(loss)
            adam_step(ft, ft.gradient_map(), opt, T.lr_at(sched, step), adam)
            step += 1
        if fcfg.metric == "perplexity":
            value = perplexity(cfg, ft, dev_pairs)
        elif fcfg.metric == "sciem":
            gc = GenConfig(beam_size=3, max_len=cfg.max_positions - 1)
            hits = [sciem(" ".join(map(str, beam_search(cfg, ft, s, gc))),
                          " ".join(map(str, t)))
                    for s, t in dev_pairs]
            value = float(np.mean(hits))
        else:
            raise ValueError(f"metric {fcfg.metric} not valid for seq2seq fine-tuning")
        history.append(value)
        if best_metric is None or _metric_better(fcfg.metric, value, best_metric):
            best_metric = value
            best_store = ft.copy()
    record = {"metric": fcfg.metric, "best": best_metric, "epochs": history,
              "updates": step}
    return best_store, record


def aggregate_seeds(values):
    """mean +- std reporting fields over per-seed metric values."""
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0)),
            "seeds": [float(v) for v in values]}

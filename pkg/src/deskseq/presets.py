"""Named model presets.

`registry_plans` holds the full-scale ten-model registry used for
cost accounting only.  `desk_plan` maps the same names to runnable desk-scale
plans: layer counts preserved, width and step counts scaled down.
"""

from __future__ import annotations

from fractions import Fraction

from . import data as D
from . import train as T
from .model import FUSION, STANDARD, ModelConfig

REGISTRY_VOCAB = 250_000
REGISTRY_STEPS = 500_000

MLM_NOISE = D.NoiseConfig(mode=D.MLM_MASK)
DROP_NOISE = D.NoiseConfig(mode=D.SPAN_DROP)
MASK_NOISE = D.NoiseConfig(mode=D.SPAN_MASK)


def _registry_cfg(enc, dec, fusion=False):
    return ModelConfig(encoder_layers=enc, decoder_layers=dec, d_model=1024,
                       d_ffn=4096, heads=16, vocab_size=REGISTRY_VOCAB,
                       max_positions=512,
                       cross_attention=FUSION if fusion else STANDARD)


def _pretrain_lr(total_steps, peak=1.5e-4, warmup=5000):
    return T.LrSchedule(peak=peak, total_steps=total_steps,
                        warmup_steps=min(warmup, total_steps), end=5e-6)


def _registry_stage(name, objective, noise, steps, freeze=(), lr=None, lr_offset=0):
    return T.TrainStage(name=name, objective=objective, steps=steps,
                        lr=lr or _pretrain_lr(steps), noise=noise, freeze=freeze,
                        lr_offset=lr_offset, batch_tokens=1_000_000)


def registry_plans():
    """The ten-model registry with full-scale step counts, in table order."""
    plans = []
    plans.append(T.TrainPlan(
        name="roberta-12e", model=_registry_cfg(12, 0),
        stages=[_registry_stage("mlm", T.MLM, MLM_NOISE, REGISTRY_STEPS)]))
    for dec, noise, suffix in [(12, DROP_NOISE, ""), (12, MASK_NOISE, "-mask"),
                               (2, DROP_NOISE, ""), (2, MASK_NOISE, "-mask"),
                               (1, MASK_NOISE, "-mask")]:
        name = f"bart-12e{dec}d{suffix}"
        if any(p.name == name for p in plans):
            continue
        plans.append(T.TrainPlan(
            name=name, model=_registry_cfg(12, dec),
            stages=[_registry_stage("denoise", T.DENOISE, noise, REGISTRY_STEPS)]))
    plans.append(T.TrainPlan(
        name="bart-12e12d+mlm", model=_registry_cfg(12, 0),
        init=T.PlanInit("extract", "bart-12e12d"),
        inherited_tu=[("bart-12e12d", Fraction(10))],
        stages=[_registry_stage("continued-mlm", T.MLM, MLM_NOISE, 100_000,
                             lr=_pretrain_lr(100_000, peak=1e-4, warmup=1000))]))
    plans.append(T.TrainPlan(
        name="2stage-bart-12e12d", model=_registry_cfg(12, 12),
        init=T.PlanInit("warm_start", "roberta-12e"),
        inherited_tu=[("roberta-12e", Fraction(5))],
        stages=[_registry_stage("denoise-frozen", T.DENOISE, DROP_NOISE, REGISTRY_STEPS,
                             freeze=("Encoder",))]))
    plans.append(T.TrainPlan(
        name="2stage-bart-12e12d-attn-f", model=_registry_cfg(12, 12, fusion=True),
        init=T.PlanInit("warm_start", "roberta-12e"),
        inherited_tu=[("roberta-12e", Fraction(5))],
        stages=[_registry_stage("denoise-frozen", T.DENOISE, DROP_NOISE, REGISTRY_STEPS,
                             freeze=("Encoder",))]))
    shared = _pretrain_lr(350_000)
    plans.append(T.TrainPlan(
        name="2stage-bart-12e12d-unfrz", model=_registry_cfg(12, 12),
        init=T.PlanInit("warm_start", "roberta-12e"),
        inherited_tu=[("roberta-12e", Fraction(5))],
        stages=[
            _registry_stage("denoise-frozen", T.DENOISE, DROP_NOISE, 200_000,
                         freeze=("Encoder",), lr=shared, lr_offset=0),
            _registry_stage("denoise-unfrozen", T.DENOISE, DROP_NOISE, 150_000,
                         lr=shared, lr_offset=200_000),
        ]))
    return plans


def registry_plan(name):
    for p in registry_plans():
        if p.name == name:
            return p
    raise KeyError(f"unknown preset: {name}")


PRESET_NAMES = [p.name for p in registry_plans()]


# ---------------------------------------------------------------------------
# desk scale


def desk_cfg(enc, dec, *, vocab_size=256, d_model=64, d_ffn=128, heads=4,
             max_positions=80, fusion=False, dropout=0.1):
    return ModelConfig(encoder_layers=enc, decoder_layers=dec, d_model=d_model,
                       d_ffn=d_ffn, heads=heads, vocab_size=vocab_size,
                       max_positions=max_positions,
                       cross_attention=FUSION if fusion else STANDARD,
                       dropout=dropout)


def desk_plan(name, *, steps_per_100k=40, batch_size=8, peak_lr=1e-3,
              warmup=50, **cfg_kw):
    """Desk-scale version of a registry preset: same layer counts, objectives,
    freeze structure and init kind; widths and step counts scaled down."""
    full = registry_plan(name)
    pm = full.model
    cfg = desk_cfg(pm.encoder_layers, pm.decoder_layers,
                   fusion=(pm.cross_attention == FUSION), **cfg_kw)
    total = sum(st.steps for st in full.stages)
    scale = steps_per_100k / 100_000
    scaled_total = max(1, round(total * scale))
    shared = T.LrSchedule(peak=peak_lr, total_steps=scaled_total,
                          warmup_steps=min(warmup, scaled_total // 4),
                          end=peak_lr / 20)
    stages = []
    offset = 0
    for st in full.stages:
        steps = max(1, round(st.steps * scale))
        stages.append(T.TrainStage(
            name=st.name, objective=st.objective, steps=steps, lr=shared,
            noise=st.noise, freeze=st.freeze, lr_offset=offset,
            batch_size=batch_size, batch_tokens=batch_size * cfg.max_positions))
        offset += steps
    return T.TrainPlan(name=full.name, model=cfg, stages=stages,
                       init=full.init, inherited_tu=full.inherited_tu)


def overfit_plan(objective, *, steps=2000, enc=2, dec=2, vocab_size=256,
                 d_model=64, batch_size=8, peak_lr=1e-3):
    """Tiny-corpus overfit plan: capacity deliberately exceeds corpus entropy."""
    cfg = desk_cfg(enc, 0 if objective == T.MLM else dec, vocab_size=vocab_size,
                   d_model=d_model, dropout=0.0)
    lr = T.LrSchedule(peak=peak_lr, total_steps=steps, warmup_steps=100, end=1e-4)
    noise = MLM_NOISE if objective == T.MLM else MASK_NOISE
    stage = T.TrainStage(name="overfit", objective=objective, steps=steps, lr=lr,
                         noise=noise, batch_size=batch_size,
                         batch_tokens=batch_size * cfg.max_positions)
    return T.TrainPlan(name=f"overfit-{objective}", model=cfg, stages=[stage])

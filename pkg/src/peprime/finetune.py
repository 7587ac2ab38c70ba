"""Downstream fine-tuning settings and entity-level micro F1 evaluation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Partition
from .data import Corpus, LABELS, Vocab, bio_spans
from .model import PartitionedModel, count_trainable_fraction
from .priming import AdamW, PrimingConfig, TrainingDiverged, prime, ft_prime

TARGET_HEAD = "target"


class FineTuneSetting(enum.Enum):
    FULL_FT = "full_ft"                      # 1: encoder+head, no adapter, no priming
    HEAD_TUNING = "head_tuning"              # 2: head only
    ADAPTER_TUNING = "adapter_tuning"        # 3: adapter+head, fresh adapter
    META_PRIME_AT = "meta_prime_at"          # 4: adapter+head from priming
    FT_PRIME_AT = "ft_prime_at"              # 5: adapter+head from fine-tuning-based priming
    MAML_LOOP_PRIME_AT = "maml_loop_prime_at"     # 6: priming with full inner loop
    ONE_STEP_PRIME_AT = "one_step_prime_at"       # 7: priming with a single inner step
    META_PRIME_FULLFT = "meta_prime_fullft"       # full FT after pe_sim priming
    MAML_LOOP_PRIME_FULLFT = "maml_loop_prime_fullft"  # full FT after full-loop priming
    NOPRIME_FULLFT = "noprime_fullft"        # full FT baseline, alias of setting 1


_AT_SETTINGS = {
    FineTuneSetting.HEAD_TUNING: (Partition.HEAD,),
}
_FULL = (Partition.PRETRAINED, Partition.LIGHTWEIGHT, Partition.HEAD)


def trainable_partitions(setting: FineTuneSetting):
    if setting in (FineTuneSetting.FULL_FT, FineTuneSetting.NOPRIME_FULLFT):
        return (Partition.PRETRAINED, Partition.HEAD)
    if setting in (FineTuneSetting.META_PRIME_FULLFT, FineTuneSetting.MAML_LOOP_PRIME_FULLFT):
        return _FULL
    if setting is FineTuneSetting.HEAD_TUNING:
        return (Partition.HEAD,)
    return (Partition.LIGHTWEIGHT, Partition.HEAD)


def adapter_present(setting: FineTuneSetting) -> bool:
    """Setting 1 (and its alias) is the only adapter-free model."""
    return setting not in (FineTuneSetting.FULL_FT, FineTuneSetting.NOPRIME_FULLFT)


def priming_recipe(setting: FineTuneSetting):
    """(kind, PrimingConfig overrides) for settings whose init is primed."""
    return {
        FineTuneSetting.META_PRIME_AT: ("meta", {}),
        FineTuneSetting.META_PRIME_FULLFT: ("meta", {}),
        FineTuneSetting.FT_PRIME_AT: ("ft", {}),
        FineTuneSetting.MAML_LOOP_PRIME_AT: ("meta", {"inner_mode": "full_maml"}),
        FineTuneSetting.MAML_LOOP_PRIME_FULLFT: ("meta", {"inner_mode": "full_maml"}),
        FineTuneSetting.ONE_STEP_PRIME_AT: ("meta", {"inner_steps": 1}),
    }.get(setting)


@dataclass
class FineTuneHyperparams:
    lr_full: float = 5e-5      # full fine-tuning
    lr_pe: float = 1e-3        # adapter / head tuning
    steps: int = 300
    batch_size: int = 16
    eval_every: int = 25

    def lr_for(self, setting: FineTuneSetting) -> float:
        full = Partition.PRETRAINED in trainable_partitions(setting)
        return self.lr_full if full else self.lr_pe


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    per_type_gold: dict
    per_type_pred: dict
    trainable_fraction: float = 0.0
    setting: str = ""
    language: str = ""
    seed: int = 0

    def to_dict(self):
        return asdict(self)


# --- entity-level micro F1 ------------------------------------------------

def extract_spans(labels):
    """Maximal (type, start, end) spans from a BIO label sequence."""
    return bio_spans(labels)


def micro_f1(gold_sequences, pred_sequences) -> EvalReport:
    """Exact-span precision/recall/F1 aggregated over the whole corpus."""
    if len(gold_sequences) != len(pred_sequences):
        raise ad.ContractError(
            f"micro_f1: {len(gold_sequences)} gold vs {len(pred_sequences)} predicted sequences"
        )
    tp = n_gold = n_pred = 0
    per_type_gold: dict = {}
    per_type_pred: dict = {}
    for gold, pred in zip(gold_sequences, pred_sequences):
        if len(gold) != len(pred):
            raise ad.ContractError(f"micro_f1: length mismatch {len(gold)} vs {len(pred)}")
        gs, ps = extract_spans(gold), extract_spans(pred)
        tp += len(gs & ps)
        n_gold += len(gs)
        n_pred += len(ps)
        for t, _, _ in gs:
            per_type_gold[t] = per_type_gold.get(t, 0) + 1
        for t, _, _ in ps:
            per_type_pred[t] = per_type_pred.get(t, 0) + 1
    precision = 100.0 * tp / n_pred if n_pred else 0.0
    recall = 100.0 * tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(precision, recall, f1, per_type_gold, per_type_pred)


def predict_corpus(model: PartitionedModel, corpus: Corpus, vocab: Vocab,
                   head: str = TARGET_HEAD):
    preds = []
    max_len = model.config.max_seq_len
    for seq in corpus:
        tokens = seq.tokens[:max_len]
        ids = vocab.encode_tokens(tokens)
        label_ids = model.predict(ids, np.ones(len(ids), dtype=bool), head)
        labels = [LABELS[i] for i in label_ids]
        labels += ["O"] * (len(seq.tokens) - len(labels))  # truncated tail predicts O
        preds.append(labels)
    return preds


# --- downstream fine-tuning -----------------------------------------------

@dataclass
class FineTuneResult:
    model: PartitionedModel
    best_f1: float
    trace: list = field(default_factory=list)   # (step, val F1)


def finetune(init_model: PartitionedModel, setting: FineTuneSetting,
             train_data, val_corpus: Corpus, vocab: Vocab,
             hyper: FineTuneHyperparams, seed: int = 0) -> FineTuneResult:
    """Train the setting's trainable partitions; keep the best-val-F1 state.

    ``init_model`` must already match the setting: adapter present (primed
    or fresh) for PE settings, absent for the adapter-free baseline. A
    fresh target head is always added here.
    """
    rng = np.random.default_rng(seed)
    model = init_model.clone()
    if TARGET_HEAD in model.head_names():
        raise ad.ContractError("init model already carries a target head")
    model.add_head(TARGET_HEAD, rng)

    parts = trainable_partitions(setting)
    train_ids = [pid for part in parts for pid in model.registry.ids(part)]
    optimizer = AdamW(train_ids)
    lr = hyper.lr_for(setting)

    def evaluate():
        preds = predict_corpus(model, val_corpus, vocab)
        return micro_f1([s.labels for s in val_corpus], preds).f1

    best_f1 = evaluate()
    best_snap = model.registry.snapshot()
    trace = [(0, best_f1)]
    order = rng.permutation(len(train_data))
    pos = 0
    for step in range(1, hyper.steps + 1):
        if pos + hyper.batch_size > len(order):
            order = rng.permutation(len(train_data))
            pos = 0
        batch = [train_data[i] for i in order[pos:pos + hyper.batch_size]]
        pos += hyper.batch_size
        loss, leaves = model.batch_loss(batch, TARGET_HEAD)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(step, TARGET_HEAD, float(loss.data))
        grads = ad.grads_for(loss, leaves)
        optimizer.step(model.registry, grads, lr)
        if step % hyper.eval_every == 0 or step == hyper.steps:
            f1 = evaluate()
            trace.append((step, f1))
            if f1 > best_f1:
                best_f1 = f1
                best_snap = model.registry.snapshot()
    model.registry.restore(best_snap)
    return FineTuneResult(model, best_f1, trace)


def evaluate_setting(model: PartitionedModel, setting: FineTuneSetting,
                     test_corpus: Corpus, vocab: Vocab, language: str,
                     seed: int) -> EvalReport:
    preds = predict_corpus(model, test_corpus, vocab)
    report = micro_f1([s.labels for s in test_corpus], preds)
    report.setting = setting.value
    report.language = language
    report.seed = seed
    report.trainable_fraction = float(count_trainable_fraction(
        model.config, trainable_partitions(setting), adapter_present(setting)))
    return report


# --- experiment orchestration ---------------------------------------------

@dataclass
class PretrainConfig:
    """Desk-scale stand-in for the pretrained model every setting starts from.

    Multi-task training of the bare encoder (+ per-source heads, later
    discarded) on the source languages. Zero steps means a random
    encoder plays the pretrained model.
    """

    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 16


@dataclass
class Experiment:
    """Shared data + budgets for one grid of (setting, language, seed) runs."""

    vocab: Vocab
    meta_tasks: list
    targets: dict        # language -> (train encoded, val Corpus, test Corpus)
    model_config: "ModelConfig"
    priming: PrimingConfig
    hyper: FineTuneHyperparams
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)


def pretrained_encoder(exp: Experiment, seed: int,
                       cache: dict | None = None) -> dict:
    """Encoder parameter values shared by every setting of one seed."""
    key = ("pretrain", seed)
    if cache is not None and key in cache:
        return cache[key]
    base = PartitionedModel(exp.model_config, seed=seed, has_adapter=False)
    if exp.pretrain.steps > 0:
        cfg = PrimingConfig(beta=exp.pretrain.lr, outer_steps=exp.pretrain.steps,
                            support_batch_size=exp.pretrain.batch_size,
                            tasks_per_outer_batch=exp.priming.tasks_per_outer_batch,
                            seed=seed)
        base = ft_prime(base, exp.meta_tasks, cfg)
    values = {pid: base.registry[pid].value.data.copy()
              for pid in base.registry.ids(Partition.PRETRAINED)}
    if cache is not None:
        cache[key] = values
    return values


def prepare_init(exp: Experiment, setting: FineTuneSetting, seed: int,
                 primed_cache: dict | None = None) -> PartitionedModel:
    """Setting-specific starting model: pretrained encoder, then priming.

    The pretrained encoder and the (expensive) priming runs are cached
    per seed so settings sharing an init do not recompute it.
    """
    base = PartitionedModel(exp.model_config, seed=seed,
                            has_adapter=adapter_present(setting))
    for pid, arr in pretrained_encoder(exp, seed, primed_cache).items():
        base.registry[pid].value.data = arr.copy()
    recipe = priming_recipe(setting)
    if recipe is None:
        return base
    kind, overrides = recipe
    key = (kind, tuple(sorted(overrides.items())), seed)
    if primed_cache is not None and key in primed_cache:
        return primed_cache[key]
    cfg_kwargs = {**asdict(exp.priming), **overrides, "seed": seed}
    cfg = PrimingConfig(**cfg_kwargs)
    runner = prime if kind == "meta" else ft_prime
    primed = runner(base, exp.meta_tasks, cfg)
    primed = strip_heads(primed)
    if primed_cache is not None:
        primed_cache[key] = primed
    return primed


def strip_heads(model: PartitionedModel) -> PartitionedModel:
    """Drop priming heads; downstream runs always add a fresh one."""
    reg = ad.ParameterRegistry()
    for p in model.registry:
        if p.partition is not Partition.HEAD:
            reg.add(p.id, p.value.data.copy(), p.partition, p.trainable)
    return PartitionedModel(model.config, has_adapter=model.has_adapter, registry=reg)


def run_setting(exp: Experiment, setting: FineTuneSetting, language: str,
                seed: int, primed_cache: dict | None = None) -> EvalReport:
    init = prepare_init(exp, setting, seed, primed_cache)
    train, val_corpus, test_corpus = exp.targets[language]
    result = finetune(init, setting, train, val_corpus, exp.vocab, exp.hyper, seed=seed)
    return evaluate_setting(result.model, setting, test_corpus, exp.vocab, language, seed)


MATRIX_CELLS = {
    # rows: downstream strategy; columns: priming strategy. Diagonal =
    # priming simulates the downstream strategy it precedes.
    ("at", "pe_sim"): FineTuneSetting.META_PRIME_AT,
    ("at", "full_sim"): FineTuneSetting.MAML_LOOP_PRIME_AT,
    ("full_ft", "pe_sim"): FineTuneSetting.META_PRIME_FULLFT,
    ("full_ft", "full_sim"): FineTuneSetting.MAML_LOOP_PRIME_FULLFT,
}


def run_matrix(exp: Experiment, seeds, languages=None):
    """2x2 grid {downstream in {at, full_ft}} x {priming in {pe_sim, full_sim}}.

    Returns (mean-F1 matrix dict, list of per-run EvalReports).
    """
    languages = list(exp.targets) if languages is None else list(languages)
    reports = []
    cells = {key: [] for key in MATRIX_CELLS}
    for seed in seeds:
        primed_cache: dict = {}
        for key, setting in MATRIX_CELLS.items():
            for lang in languages:
                rep = run_setting(exp, setting, lang, seed, primed_cache)
                reports.append(rep)
                cells[key].append(rep.f1)
    matrix = {key: float(np.mean(v)) for key, v in cells.items()}
    return matrix, reports

"""End-to-end pipeline and the experiment harness: dataset builds, adapter
training, condition evaluation with permutation controls, and the grouped
analyses (surprise bins, prompt length, training-size sweep, no-prompt
generation, SNR sweep). All outputs are per-sample CSVs plus JSON summaries
so every aggregate is recomputable from disk.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataforge as df
from .adapter import BrainAdapter, BrainRecording
from .decoding import ReconstructionConfig, beam_search, fit_word_rate, reconstruct_full_text, truncate_to_budget
from .errors import ConfigError, DataError
from .lm import LanguageModel, LMConfig, Vocabulary, train_base_lm
from .metrics import (
    METRIC_NAMES,
    ScoreReport,
    SurprisePair,
    bh_fdr,
    pearson_r_pvalue_greater,
    sign_test_one_sided,
    similarity_row,
    surprise,
    win_counts,
    win_rate,
)
from .prompts import BRAINLLM, CONDITIONS, PERBRAINLLM, STDLLM, assemble_condition, identity_plan, plan_permutation
from .training import TrainConfig, train_main, validation_nll, warmup


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    # corpus
    n_stories: int = 80
    story_len: int = 15
    # language model
    d: int = 64
    layers: int = 2
    heads: int = 4
    context_len: int = 128
    vocab_cap: int = 2000
    lm_epochs: int = 30
    lm_lr: float = 3e-3
    # synthetic encoder / features
    c_raw: int = 128
    c: int = 32
    t: int = 4
    noise_sigma: float = 0.1
    signal_scale: float = 1.0
    # adapter training
    lr: float = 1e-4
    batch: int = 8
    warmup_epochs: int = 10
    patience: int = 10
    max_epochs: int = 200
    # evaluation
    beam_width: int = 5
    tie_eps: float = 1e-9
    conditions: tuple = CONDITIONS
    identity_permutation: bool = False
    generate: bool = True
    # reconstruction
    recon_window: int = 10
    recon_beam: int = 3

    _FLOATS = ("lm_lr", "noise_sigma", "signal_scale", "lr", "tie_eps")
    _STRS = ("out_dir",)
    _BOOLS = ("identity_permutation", "generate")

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        cfg = cls()
        with open(path) as f:
            for raw in f:
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"bad config line: {raw.rstrip()}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key == "conditions":
                    setattr(cfg, key, tuple(v.strip() for v in value.split(",")))
                elif key in cls._STRS:
                    setattr(cfg, key, value)
                elif key in cls._BOOLS:
                    setattr(cfg, key, value.lower() in ("1", "true", "yes"))
                elif key in cls._FLOATS:
                    setattr(cfg, key, float(value))
                elif hasattr(cfg, key) and not key.startswith("_"):
                    setattr(cfg, key, int(value))
                else:
                    raise ConfigError(f"unknown config key: {key}")
        for cond in cfg.conditions:
            if cond not in CONDITIONS:
                raise ConfigError(f"unknown condition {cond!r}")
        return cfg

    def lm_config(self) -> LMConfig:
        return LMConfig(
            d=self.d,
            layers=self.layers,
            heads=self.heads,
            context_len=self.context_len,
            vocab_size=self.vocab_cap,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch=self.batch,
            warmup_epochs=self.warmup_epochs,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seed=self.seed,
        )


# ---- dataset build ----

@dataclass
class BuiltData:
    stories: list
    vocab: Vocabulary
    lm: LanguageModel
    dataset: df.Dataset
    encoder: df.EncoderSpec
    pca: df.PCABasis
    holdout_story: list
    holdout_recordings: list


def lm_training_sequences(stories, vocab, window: int = 32, stride: int = 16):
    """Sliding windows over each story's token stream for base-LM training."""
    seqs = []
    for story in stories:
        ids = [vocab.index.get(w, 2) for frame in story for w in frame]
        if len(ids) <= window:
            seqs.append(ids)
            continue
        for start in range(0, len(ids) - window + 1, stride):
            seqs.append(ids[start : start + window])
    return seqs


def build_pipeline_data(cfg: RunConfig) -> BuiltData:
    """Corpus, base LM, synthetic recordings, PCA (fit on training frames
    only), samples, and the held-out reconstruction story."""
    stories = df.synth_corpus(cfg.seed, cfg.n_stories + 1, cfg.story_len)
    holdout_story = stories[-1]
    stories = stories[:-1]
    vocab = Vocabulary.build(
        [" ".join(frame) for story in stories + [holdout_story] for frame in story],
        max_size=cfg.vocab_cap,
    )
    lm, _ = train_base_lm(
        lm_training_sequences(stories, vocab), cfg.lm_config(), vocab,
        epochs=cfg.lm_epochs, lr=cfg.lm_lr,
    )
    lm.set_trainable(False)

    frames = [frame for story in stories for frame in story]
    frame_conts = [[vocab.index.get(w, 2) for w in frame] for frame in frames]
    encoder = df.make_encoder_spec(
        lm, frame_conts, c_raw=cfg.c_raw, noise_sigma=cfg.noise_sigma,
        seed=cfg.seed + 7, signal_scale=cfg.signal_scale,
    )
    raw = {
        fid: df.synth_brain_encode(cont, encoder, lm, fid)
        for fid, cont in enumerate(frame_conts)
    }
    raw_recs = {fid: BrainRecording(m, fid) for fid, m in raw.items()}
    samples = df.build_samples_continuous(stories, vocab, raw_recs)
    train, valid, test = df.split_dataset(samples, df.SplitSpec(seed=cfg.seed + 13))

    train_frames = sorted({s.frame_id for s in train})
    basis = df.fit_pca(np.vstack([raw[f] for f in train_frames]), cfg.c)
    reduced = {fid: BrainRecording(basis.project(m), fid) for fid, m in raw.items()}
    for split in (train, valid, test):
        for s in split:
            s.recording = reduced[s.frame_id]
    dataset = df.Dataset(train=train, valid=valid, test=test)

    holdout_recordings = []
    for i, frame in enumerate(holdout_story):
        fid = 10_000_000 + i
        cont = [vocab.index.get(w, 2) for w in frame]
        raw_frame = df.synth_brain_encode(cont, encoder, lm, fid)
        holdout_recordings.append(BrainRecording(basis.project(raw_frame), fid))
    return BuiltData(stories, vocab, lm, dataset, encoder, basis, holdout_story, holdout_recordings)


def train_adapter(cfg: RunConfig, lm: LanguageModel, dataset: df.Dataset):
    adapter = BrainAdapter.init_from_lm(cfg.c, cfg.t, lm, seed=cfg.seed + 21)
    tc = cfg.train_config()
    warm_trace = warmup(adapter, lm, dataset.train, tc)
    adapter, main_trace = train_main(adapter, lm, dataset.train, dataset.valid, tc)
    return adapter, warm_trace, main_trace


# ---- evaluation ----

def condition_surprise(lm, adapter, samples, plan, condition):
    out = []
    for i, s in enumerate(samples):
        pin = assemble_condition(i, samples, plan, condition, adapter, lm)
        out.append(surprise(lm, pin, s.continuation_ids))
    return out


def evaluate_conditions(cfg: RunConfig, lm, adapter, test_samples, plan=None) -> ScoreReport:
    """Per-sample surprise for every requested condition plus beam-search
    generations truncated to the TR budget and scored against the
    continuation. The permutation plan is shared across conditions."""
    if not test_samples:
        raise DataError("empty test set")
    if plan is None:
        plan = (
            identity_plan(len(test_samples))
            if cfg.identity_permutation
            else plan_permutation(len(test_samples), cfg.seed + 31)
        )
    report = ScoreReport()
    for i, s in enumerate(test_samples):
        row = {
            "sample_id": i,
            "frame_id": s.frame_id,
            "prompt_len": len(s.prompt_ids),
            "tr_budget": s.tr_budget,
        }
        for cond in cfg.conditions:
            pin = assemble_condition(i, test_samples, plan, cond, adapter, lm)
            row[f"surprise_{cond}"] = surprise(lm, pin, s.continuation_ids)
            if cfg.generate:
                beam = beam_search(lm, pin, width=cfg.beam_width, max_tokens=s.tr_budget)
                tokens = truncate_to_budget(beam.best.tokens, s.tr_budget)
                for name, value in similarity_row(tokens, s.continuation_ids).items():
                    row[f"{name}_{cond}"] = value
                row[f"generated_{cond}"] = " ".join(lm.vocab.tokens[t] for t in tokens)
        report.rows.append(row)
    report.summary = summarize(report.rows, cfg)
    return report


def pairs_from_rows(rows, control: str):
    return [
        SurprisePair(r["sample_id"], r[f"surprise_{BRAINLLM}"], r[f"surprise_{control}"])
        for r in rows
    ]


def summarize(rows, cfg: RunConfig) -> dict:
    summary = {"n_samples": len(rows), "conditions": list(cfg.conditions)}
    for cond in cfg.conditions:
        agg = {"surprise": float(np.mean([r[f"surprise_{cond}"] for r in rows]))}
        if cfg.generate:
            for name in METRIC_NAMES:
                agg[name] = float(np.mean([r[f"{name}_{cond}"] for r in rows]))
        summary[cond] = agg
    p_values = []
    controls = [c for c in cfg.conditions if c != BRAINLLM]
    if BRAINLLM in cfg.conditions:
        for control in controls:
            pairs = pairs_from_rows(rows, control)
            wins, ties, losses = win_counts(pairs, cfg.tie_eps)
            p = sign_test_one_sided(wins, ties, losses) if wins + losses else 1.0
            summary[f"vs_{control}"] = {
                "win_rate": win_rate(pairs, cfg.tie_eps),
                "wins": wins,
                "ties": ties,
                "losses": losses,
                "sign_test_p": p,
            }
            p_values.append(p)
        flags = bh_fdr(p_values, q=0.05)
        for control, flag in zip(controls, flags):
            summary[f"vs_{control}"]["fdr_reject"] = bool(flag)
    return summary


def report_to_csv(report: ScoreReport) -> str:
    if not report.rows:
        raise DataError("empty report")
    cols = list(report.rows[0].keys())
    lines = [",".join(cols)]
    for row in report.rows:
        cells = []
        for cname in cols:
            v = row[cname]
            cells.append(f"{v:.10f}" if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_report(report: ScoreReport, out_dir: str, name: str = "eval") -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}_per_sample.csv"), "w") as f:
        f.write(report_to_csv(report))
    with open(os.path.join(out_dir, f"{name}_summary.json"), "w") as f:
        json.dump(report.summary, f, indent=2, sort_keys=True)


# ---- grouped experiments ----

EXPERIMENTS = ("surprise-bins", "prompt-length", "data-size", "no-prompt", "snr-sweep")


def _group_stats(rows, cfg, key_fn, group_label):
    groups: dict = {}
    for r in rows:
        groups.setdefault(key_fn(r), []).append(r)
    out = []
    for gkey in sorted(groups):
        grows = groups[gkey]
        pairs = pairs_from_rows(grows, PERBRAINLLM)
        rec = {group_label: gkey, "n": len(grows), "win_rate": win_rate(pairs, cfg.tie_eps)}
        if cfg.generate:
            for name in METRIC_NAMES:
                rec[f"{name}_brainllm"] = float(np.mean([r[f"{name}_{BRAINLLM}"] for r in grows]))
        out.append(rec)
    return out


def experiment_surprise_bins(report: ScoreReport, cfg: RunConfig, n_bins: int = 5):
    """Equal-mass bins of PerBrainLLM surprise; per-bin win rate should grow
    with surprise."""
    rows = report.rows
    surp = np.asarray([r[f"surprise_{PERBRAINLLM}"] for r in rows])
    edges = np.quantile(surp, np.linspace(0, 1, n_bins + 1)[1:-1])
    bins = np.searchsorted(edges, surp, side="right")
    for r, b in zip(rows, bins):
        r["_bin"] = int(b)
    result = _group_stats(rows, cfg, lambda r: r["_bin"], "surprise_bin")
    for r in rows:
        del r["_bin"]
    wins = [
        1.0 if r[f"surprise_{BRAINLLM}"] < r[f"surprise_{PERBRAINLLM}"] - cfg.tie_eps
        else 0.5 if abs(r[f"surprise_{BRAINLLM}"] - r[f"surprise_{PERBRAINLLM}"]) <= cfg.tie_eps
        else 0.0
        for r in rows
    ]
    r_val, p_val = pearson_r_pvalue_greater(list(surp), wins)
    return result, {"pearson_r": r_val, "p_one_sided": p_val}


def experiment_prompt_length(report: ScoreReport, cfg: RunConfig):
    return _group_stats(report.rows, cfg, lambda r: r["prompt_len"], "prompt_len")


def experiment_no_prompt(cfg: RunConfig, lm, adapter, test_samples):
    """Evaluate the same test samples with prompts removed; win rate should
    rise (surprise is higher without context) while BLEU-1 drops."""
    stripped = [
        df.DataSample([], s.continuation_ids, s.recording, s.frame_id) for s in test_samples
    ]
    plan = plan_permutation(len(test_samples), cfg.seed + 31)
    with_report = evaluate_conditions(cfg, lm, adapter, test_samples, plan)
    without_report = evaluate_conditions(cfg, lm, adapter, stripped, plan)
    return with_report, without_report


def experiment_data_size(cfg: RunConfig, lm, dataset: df.Dataset, fractions=(0.25, 0.5, 0.75, 1.0)):
    """Retrain the adapter on nested fractions of the training frames (same
    warm-started seed each time) and report test win rates."""
    train_frames = sorted({s.frame_id for s in dataset.train})
    rng = np.random.default_rng(cfg.seed + 41)
    order = [train_frames[i] for i in rng.permutation(len(train_frames))]
    results = []
    eval_cfg = replace(cfg, generate=False)
    for frac in fractions:
        kept = set(order[: max(1, int(round(frac * len(order))))])
        subset = [s for s in dataset.train if s.frame_id in kept]
        sub_ds = df.Dataset(train=subset, valid=dataset.valid, test=dataset.test)
        adapter, _, _ = train_adapter(cfg, lm, sub_ds)
        report = evaluate_conditions(eval_cfg, lm, adapter, dataset.test)
        results.append(
            {
                "fraction": frac,
                "n_train_samples": len(subset),
                "win_rate": report.summary[f"vs_{PERBRAINLLM}"]["win_rate"],
            }
        )
    return results


def experiment_snr_sweep(cfg: RunConfig, sigmas=(0.05, 0.2, 1.0, 5.0)):
    """Full regenerate-train-evaluate cycle per noise level."""
    results = []
    for sigma in sigmas:
        sub_cfg = replace(cfg, noise_sigma=sigma, generate=False)
        built = build_pipeline_data(sub_cfg)
        adapter, _, _ = train_adapter(sub_cfg, built.lm, built.dataset)
        report = evaluate_conditions(sub_cfg, built.lm, adapter, built.dataset.test)
        results.append(
            {
                "noise_sigma": sigma,
                "win_rate": report.summary[f"vs_{PERBRAINLLM}"]["win_rate"],
            }
        )
    return results


def rows_to_csv(rows) -> str:
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(f"{row[c]:.10f}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


# ---- reconstruction ----

def run_reconstruction(cfg: RunConfig, lm, adapter, dataset: df.Dataset, holdout_recordings, holdout_story, vocab):
    """Reconstruct the held-out story with brain input and as a no-brain null
    using identical word rates, and score both against the true transcript."""
    if len(holdout_recordings) < 2:
        raise DataError("held-out story needs at least 2 frames")
    wr = fit_word_rate(
        [s.recording for s in dataset.train],
        [s.tr_budget for s in dataset.train],
        [s.recording for s in dataset.valid],
        [s.tr_budget for s in dataset.valid],
    )
    rc = ReconstructionConfig(window=cfg.recon_window, beam_width=cfg.recon_beam)
    brain_frames = reconstruct_full_text(lm, adapter, holdout_recordings, wr, rc, use_brain=True)
    null_frames = reconstruct_full_text(lm, adapter, holdout_recordings, wr, rc, use_brain=False)
    reference = [w for frame in holdout_story for w in frame]
    results = {}
    for name, frames in (("brain", brain_frames), ("null", null_frames)):
        tokens = [lm.vocab.tokens[t] for fr in frames for t in fr.tokens]
        results[name] = {
            "frames": frames,
            "tokens": tokens,
            "scores": similarity_row(tokens, reference),
        }
    return wr, results, reference

"""Command-line front end.

Verbs: gen-data, train, eval, experiment, reconstruct, report.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import dataforge as df
from . import experiments as ex
from .adapter import BrainAdapter, BrainRecording
from .errors import ConfigError, DataError, NumericError
from .lm import LanguageModel, Vocabulary
from .linalg import load_matrix, save_matrix
from .prompts import CONDITIONS


def _load_config(args) -> ex.RunConfig:
    cfg = ex.RunConfig.from_file(args.config) if args.config else ex.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.condition:
        cfg = replace(cfg, conditions=tuple(args.condition))
    return cfg


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing {hint}: expected {path} (run the earlier stage first)")
    return path


def _load_artifacts(cfg: ex.RunConfig, need_adapter: bool = False):
    out = cfg.out_dir
    vocab = Vocabulary.load(_require(os.path.join(out, "vocab.txt"), "vocabulary"))
    lm = LanguageModel.load(_require(os.path.join(out, "lm.ckpt"), "language model checkpoint"))
    dataset = df.load_dataset(_require(out, "dataset directory"), vocab)
    adapter = None
    if need_adapter:
        adapter = BrainAdapter.load(_require(os.path.join(out, "adapter.ckpt"), "adapter checkpoint"))
        if (adapter.c, adapter.d, adapter.t) != (cfg.c, cfg.d, cfg.t):
            raise ConfigError(
                f"adapter checkpoint (c,d,t)=({adapter.c},{adapter.d},{adapter.t}) "
                f"does not match config ({cfg.c},{cfg.d},{cfg.t})"
            )
    return vocab, lm, dataset, adapter


def cmd_gen_data(cfg: ex.RunConfig) -> int:
    built = ex.build_pipeline_data(cfg)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    built.vocab.save(os.path.join(out, "vocab.txt"))
    built.lm.save(os.path.join(out, "lm.ckpt"))
    manifest = df.save_dataset(built.dataset, built.vocab, out)
    with open(os.path.join(out, "holdout.json"), "w") as f:
        json.dump({"frames": built.holdout_story}, f, sort_keys=True)
    with open(os.path.join(out, "holdout_recordings.bin"), "wb") as f:
        save_matrix(f, np.vstack([r.frames for r in built.holdout_recordings]))
    print(
        f"dataset written to {out}: frames train/valid/test = "
        f"{manifest['frames']['train']}/{manifest['frames']['valid']}/{manifest['frames']['test']}, "
        f"samples = {manifest['counts']}"
    )
    return 0


def cmd_train(cfg: ex.RunConfig) -> int:
    _, lm, dataset, _ = _load_artifacts(cfg)
    before = lm.checksum()
    adapter, warm_trace, main_trace = ex.train_adapter(cfg, lm, dataset)
    after = lm.checksum()
    out = cfg.out_dir
    adapter.save(os.path.join(out, "adapter.ckpt"))
    with open(os.path.join(out, "warmup_trace.csv"), "w") as f:
        f.write(warm_trace.to_csv())
    with open(os.path.join(out, "train_trace.csv"), "w") as f:
        f.write(main_trace.to_csv())
    with open(os.path.join(out, "freeze_check.json"), "w") as f:
        json.dump({"lm_checksum_before": before, "lm_checksum_after": after, "frozen": before == after}, f, indent=2)
    if before != after:
        raise NumericError("language model parameters changed during adapter training")
    best = min(main_trace.valid_loss) if main_trace.valid_loss else float("nan")
    print(f"adapter trained: best validation NLL {best:.4f} at epoch {main_trace.best_epoch}")
    return 0


def cmd_eval(cfg: ex.RunConfig) -> int:
    _, lm, dataset, adapter = _load_artifacts(cfg, need_adapter=True)
    report = ex.evaluate_conditions(cfg, lm, adapter, dataset.test)
    ex.write_report(report, cfg.out_dir, "eval")
    for cond in cfg.conditions:
        print(f"{cond}: mean surprise {report.summary[cond]['surprise']:.4f}")
    for key, value in report.summary.items():
        if key.startswith("vs_"):
            print(
                f"{key}: win rate {value['win_rate']:.4f}, sign-test p {value['sign_test_p']:.4g}, "
                f"FDR reject {value['fdr_reject']}"
            )
    return 0


def cmd_experiment(cfg: ex.RunConfig, name: str) -> int:
    if name not in ex.EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {ex.EXPERIMENTS}")
    _, lm, dataset, adapter = _load_artifacts(cfg, need_adapter=name not in ("snr-sweep",))
    exp_dir = os.path.join(cfg.out_dir, "experiments")
    os.makedirs(exp_dir, exist_ok=True)
    if name == "surprise-bins":
        report = ex.evaluate_conditions(cfg, lm, adapter, dataset.test)
        rows, corr = ex.experiment_surprise_bins(report, cfg)
        with open(os.path.join(exp_dir, "surprise_bins.csv"), "w") as f:
            f.write(ex.rows_to_csv(rows))
        with open(os.path.join(exp_dir, "surprise_bins_corr.json"), "w") as f:
            json.dump(corr, f, indent=2)
        print(f"surprise-bin correlation r={corr['pearson_r']:.4f}, p={corr['p_one_sided']:.4g}")
    elif name == "prompt-length":
        report = ex.evaluate_conditions(cfg, lm, adapter, dataset.test)
        rows = ex.experiment_prompt_length(report, cfg)
        with open(os.path.join(exp_dir, "prompt_length.csv"), "w") as f:
            f.write(ex.rows_to_csv(rows))
    elif name == "data-size":
        rows = ex.experiment_data_size(cfg, lm, dataset)
        with open(os.path.join(exp_dir, "data_size.csv"), "w") as f:
            f.write(ex.rows_to_csv(rows))
    elif name == "no-prompt":
        with_report, without_report = ex.experiment_no_prompt(cfg, lm, adapter, dataset.test)
        ex.write_report(with_report, exp_dir, "no_prompt_with")
        ex.write_report(without_report, exp_dir, "no_prompt_without")
    elif name == "snr-sweep":
        rows = ex.experiment_snr_sweep(cfg)
        with open(os.path.join(exp_dir, "snr_sweep.csv"), "w") as f:
            f.write(ex.rows_to_csv(rows))
    print(f"experiment {name} written to {exp_dir}")
    return 0


def cmd_reconstruct(cfg: ex.RunConfig) -> int:
    vocab, lm, dataset, adapter = _load_artifacts(cfg, need_adapter=True)
    out = cfg.out_dir
    with open(_require(os.path.join(out, "holdout.json"), "held-out story")) as f:
        holdout_story = json.load(f)["frames"]
    with open(_require(os.path.join(out, "holdout_recordings.bin"), "held-out recordings"), "rb") as f:
        stacked = load_matrix(f)
    recs = [
        BrainRecording(stacked[i * cfg.t : (i + 1) * cfg.t], 10_000_000 + i)
        for i in range(len(holdout_story))
    ]
    wr, results, reference = ex.run_reconstruction(
        cfg, lm, adapter, dataset, recs, holdout_story, vocab
    )
    with open(os.path.join(out, "reconstruction.jsonl"), "w") as f:
        for frame in results["brain"]["frames"]:
            f.write(
                json.dumps(
                    {
                        "frame_id": frame.frame_id,
                        "predicted_word_rate": frame.word_rate,
                        "tokens": [vocab.tokens[t] for t in frame.tokens],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with open(os.path.join(out, "transcript.txt"), "w") as f:
        f.write(" ".join(results["brain"]["tokens"]) + "\n")
    scores = {name: results[name]["scores"] for name in ("brain", "null")}
    with open(os.path.join(out, "reconstruction_scores.json"), "w") as f:
        json.dump(scores, f, indent=2, sort_keys=True)
    print(f"brain METEOR {scores['brain']['meteor']:.4f} vs null METEOR {scores['null']['meteor']:.4f}")
    return 0


def cmd_report(cfg: ex.RunConfig) -> int:
    out = cfg.out_dir
    shown = False
    for name in ("eval_summary.json", "reconstruction_scores.json"):
        path = os.path.join(out, name)
        if os.path.exists(path):
            with open(path) as f:
                print(f"== {name} ==")
                print(json.dumps(json.load(f), indent=2, sort_keys=True))
            shown = True
    if not shown:
        raise DataError(f"no summaries found under {out}; run eval or reconstruct first")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="braingen",
        description="Synthetic brain-to-text generation benchmark: data generation, "
        "adapter training, evaluation against permutation controls, and full-text reconstruction.",
    )
    parser.add_argument("--config", help="plain-text key=value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument(
        "--condition",
        action="append",
        choices=CONDITIONS,
        help="restrict evaluation to these conditions (repeatable)",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data")
    sub.add_parser("train")
    sub.add_parser("eval")
    p_exp = sub.add_parser("experiment")
    p_exp.add_argument("name", choices=ex.EXPERIMENTS)
    sub.add_parser("reconstruct")
    sub.add_parser("report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        if args.verb == "gen-data":
            return cmd_gen_data(cfg)
        if args.verb == "train":
            return cmd_train(cfg)
        if args.verb == "eval":
            return cmd_eval(cfg)
        if args.verb == "experiment":
            return cmd_experiment(cfg, args.name)
        if args.verb == "reconstruct":
            return cmd_reconstruct(cfg)
        if args.verb == "report":
            return cmd_report(cfg)
        raise ConfigError(f"unknown verb {args.verb}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

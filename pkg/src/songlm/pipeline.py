"""Pipeline steps behind the CLI. Each step reads and writes artifacts in a run directory.

Everything written here except ``timing.json`` is a pure function of the
config, so two runs with the same config produce identical bytes.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from .alignment import (DPOConfig, LyricItem, MergeWeights, RewardConfig, UnreachableTargetError,
                        build_pairs_strategy1, build_pairs_strategy2, build_pairs_strategy3, build_prompt_bank,
                        interpolate, mine_samples, simulate_labels, train_reward_model, train_stage3_dpo,
                        tune_threshold, write_pairs)
from .alignment.mining import GeneratedSample
from .config import RunConfig, canonical_json, config_hash, to_dict
from .corpus import (Conditions, Lyrics, gen_dataset, gen_lyrics, read_manifest, songs_from_manifest,
                     write_manifest)
from .evalx import EvalPrompt, MetricsReport, evaluate_model, memorization, pearson, recon_mse
from .generation import SamplerConfig, generate_many
from .lelm import LeLM
from .numerics.checkpoint import save_tensors
from .numerics.rng import derive_seed, make_rng
from .rvq import RvqCodec, TokenStreams
from .trainer import MetricsWriter, StageConfig, build_examples, dual_accuracy, train_joint, train_stage1, \
    train_stage2

log = logging.getLogger(__name__)

STRATEGIES = (1, 2, 3)


class PipelineError(RuntimeError):
    pass


class Run:
    """A run directory plus in-memory caches of its artifacts."""

    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._cache: dict = {}
        self.timing: dict = {}
        self.metrics = MetricsWriter(self.dir / "metrics.jsonl")

    # -- bookkeeping --------------------------------------------------------

    def seed(self, *stream) -> int:
        return derive_seed(self.cfg.seed, *stream)

    def path(self, name: str) -> Path:
        return self.dir / name

    def write_json(self, name: str, obj) -> None:
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, sort_keys=True, indent=1)
            fh.write("\n")

    def read_json(self, name: str):
        p = self.path(name)
        if not p.exists():
            raise PipelineError(f"missing artifact {name}; run the earlier pipeline step first")
        return json.loads(p.read_text())

    def write_header(self) -> None:
        self.path("config.json").write_text(json.dumps(to_dict(self.cfg), sort_keys=True, indent=1) + "\n")
        self.path("config.sha256").write_text(config_hash(self.cfg) + "\n")
        self.write_json("seeds.json", {
            "master": self.cfg.seed,
            "corpus": self.corpus_cfg().seed,
            "heldout": self.heldout_cfg().seed,
            "codec": self.seed("codec"),
            "init": self.seed("init"),
            "stage1": self.seed("stage1"),
            "stage2": self.seed("stage2"),
            "mine": self.seed("mine"),
            "reward": self.seed("reward"),
            "dpo": {str(s): self.seed("dpo", s) for s in STRATEGIES},
            "eval": self.seed("eval"),
        })

    def timed(self, name: str, fn, *args):
        start = time.perf_counter()
        out = fn(self, *args)
        self.timing[name] = round(time.perf_counter() - start, 3)
        self.write_json("timing.json", self.timing)
        return out

    # -- artifacts ----------------------------------------------------------

    def corpus_cfg(self):
        c = self.cfg.corpus
        return dataclasses.replace(c, seed=self.seed("corpus", c.seed))

    def heldout_cfg(self):
        c = self.cfg.corpus
        n = max(self.cfg.evalx.prompts, self.cfg.trainer.holdout)
        return dataclasses.replace(c, count=n, seed=self.seed("heldout", c.seed))

    def songs(self):
        if "songs" not in self._cache:
            self._cache["songs"] = songs_from_manifest(read_manifest(self._need("train.jsonl")), self.corpus_cfg())
        return self._cache["songs"]

    def heldout(self):
        if "heldout" not in self._cache:
            self._cache["heldout"] = songs_from_manifest(read_manifest(self._need("heldout.jsonl")),
                                                         self.heldout_cfg())
        return self._cache["heldout"]

    def _need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise PipelineError(f"missing artifact {name}; run the earlier pipeline step first")
        return p

    def codec(self) -> RvqCodec:
        if "codec" not in self._cache:
            self._cache["codec"] = RvqCodec.load(self._need("codec.ckpt"))
        return self._cache["codec"]

    def examples(self):
        if "examples" not in self._cache:
            self._cache["examples"] = build_examples(self.songs(), self.codec(), self.cfg.corpus.prompt_frames)
        return self._cache["examples"]

    def heldout_examples(self):
        if "heldout_examples" not in self._cache:
            self._cache["heldout_examples"] = build_examples(self.heldout(), self.codec(),
                                                             self.cfg.corpus.prompt_frames)
        return self._cache["heldout_examples"]

    def model(self, name: str) -> LeLM:
        key = f"model:{name}"
        if key not in self._cache:
            self._cache[key] = LeLM.load(self._need(f"{name}.ckpt"))
        return self._cache[key]

    def save_model(self, name: str, model: LeLM) -> None:
        model.save(self.path(f"{name}.ckpt"))
        self._cache[f"model:{name}"] = model

    def sampler(self) -> SamplerConfig:
        g = self.cfg.generation
        return SamplerConfig(g.k, g.temperature, self.seed("eval"), g.max_frames)

    def prompt_bank(self):
        if "bank" not in self._cache:
            self._cache["bank"] = build_prompt_bank(self.songs(), self.examples())
        return self._cache["bank"]

    def eval_prompts(self):
        """Held-out lyrics and styles, each with an audio prompt from a training song of that style."""
        if "prompts" not in self._cache:
            bank = self.prompt_bank()
            prompts = []
            for i, song in enumerate(self.heldout()[: self.cfg.evalx.prompts]):
                entries = bank.get(song.style) or [e for v in sorted(bank) for e in bank[v]]
                e = entries[int(make_rng(self.seed("eval-prompt"), i).integers(len(entries)))]
                prompts.append(EvalPrompt(song.conditions.lyrics, song.style, e.tokens, e.features, e.ref))
            self._cache["prompts"] = prompts
        return self._cache["prompts"]


# --- steps ------------------------------------------------------------------

def step_gen_corpus(run: Run) -> None:
    songs = gen_dataset(run.corpus_cfg())
    heldout = gen_dataset(run.heldout_cfg())
    write_manifest(songs, run.path("train.jsonl"))
    write_manifest(heldout, run.path("heldout.jsonl"))
    run._cache["songs"] = songs
    run._cache["heldout"] = heldout


def step_fit_codec(run: Run) -> None:
    r = run.cfg.rvq
    codec = RvqCodec.fit(run.songs(), r.stages, r.k, r.iters, run.seed("codec"), max_samples=r.max_samples)
    codec.save(run.path("codec.ckpt"))
    run._cache["codec"] = codec


def _stage_cfg(sec, stage: str, seed: int) -> StageConfig:
    return StageConfig(stage, sec.steps, sec.batch_size, sec.warmup, seed, sec.dropout, sec.lr_scale, sec.clip_norm)


def step_train(run: Run) -> None:
    cfg = run.cfg
    ex = run.examples()
    model = LeLM.init(cfg.lelm, run.seed("init"))
    init_sums = {g: model.params.checksum(f"{g}.*") for g in ("lm", "dec", "heads")}
    model, loss1 = train_stage1(model, ex, _stage_cfg(cfg.trainer.stage1, "1", run.seed("stage1")), run.metrics)
    after1 = {g: model.params.checksum(f"{g}.*") for g in ("lm", "dec", "heads")}
    run.save_model("model_stage1", model.copy())
    model, loss2 = train_stage2(model, ex, _stage_cfg(cfg.trainer.stage2, "2", run.seed("stage2")), run.metrics)
    after2 = {g: model.params.checksum(f"{g}.*") for g in ("lm", "dec", "heads")}
    run.save_model("model_stage2", model)
    acc_v, acc_a = dual_accuracy(model, run.heldout_examples()[: cfg.trainer.holdout])
    window = min(50, len(loss1))
    run.write_json("train_summary.json", {
        "stage1_initial_loss": loss1[0],
        "stage1_final_loss": float(np.mean(loss1[-window:])),
        "stage2_initial_loss": loss2[0],
        "stage2_final_loss": float(np.mean(loss2[-min(50, len(loss2)):])),
        "heldout_acc_vocal": acc_v,
        "heldout_acc_accomp": acc_a,
        "chance_vocal": 1.0 / cfg.lelm.k_v,
        "chance_accomp": 1.0 / cfg.lelm.k_a,
        "checksums": {"init": init_sums, "after_stage1": after1, "after_stage2": after2},
    })


def mining_items(run: Run):
    rng = make_rng(run.seed("mine-lyrics"))
    c = run.cfg.corpus
    return [LyricItem(gen_lyrics(rng, c), int(rng.integers(c.v_style))) for _ in range(run.cfg.alignment.lyrics)]


def _sample_record(s: GeneratedSample) -> dict:
    c = s.condition
    return {"group": s.group, "regime": s.regime, "index": s.index, "style": s.style,
            "lyrics": c.lyrics.symbols.tolist(), "cond_style": c.style, "prompt_ref": c.prompt_ref,
            "prompt": None if c.audio_prompt is None else np.asarray(c.audio_prompt).tolist(),
            "streams": s.streams.to_json(), "scores": s.scores}


def _load_samples(run: Run):
    codec = run.codec()
    by_ref = {s.index: s for s in run.songs()}
    out = []
    for line in run._need("samples.jsonl").read_text().splitlines():
        r = json.loads(line)
        st = TokenStreams.from_json(r["streams"], codec.vocab("mixed"), codec.vocab("vocal"), codec.vocab("accomp"))
        vocal, accomp, mixed = codec.decode_streams(st)
        cond = Conditions(Lyrics(r["lyrics"]), r["cond_style"], r["prompt_ref"],
                          None if r["prompt"] is None else np.array(r["prompt"], dtype=np.int64))
        feats = by_ref[r["prompt_ref"]].tracks.mixed if r["regime"] != "text" else None
        s = GeneratedSample(r["group"], r["regime"], r["index"], cond, st, vocal, accomp, mixed, r["style"], feats,
                            r["scores"])
        out.append(s)
    return out


def step_mine(run: Run) -> None:
    a = run.cfg.alignment
    samples = mine_samples(run.model("model_stage2"), mining_items(run), run.prompt_bank(), a.n_per_condition,
                           run.seed("mine"), run.codec(), run.sampler())
    with open(run.path("samples.jsonl"), "w") as fh:
        for s in samples:
            fh.write(json.dumps(_sample_record(s), sort_keys=True) + "\n")
    run._cache["samples"] = samples


def samples(run: Run):
    if "samples" not in run._cache:
        run._cache["samples"] = _load_samples(run)
    return run._cache["samples"]


def _reward_split(run: Run, labeled_src):
    r = run.cfg.alignment.reward
    groups = sorted({s.group for s in labeled_src})
    perm = make_rng(run.seed("reward-split")).permutation(len(groups))
    n_held = max(1, int(round(r.heldout_frac * len(groups))))
    held = {groups[i] for i in perm[:n_held]}
    return [s for s in labeled_src if s.group not in held], [s for s in labeled_src if s.group in held]


def step_build_pairs(run: Run) -> dict:
    a = run.cfg.alignment
    r = a.reward
    ss = samples(run)
    pairs = {1: build_pairs_strategy1(ss, a.gap)}
    text = [s for s in ss if s.regime in ("text", "both")]
    audio = [s for s in ss if s.regime in ("audio", "both")]
    pairs[2] = build_pairs_strategy2(text, "text") + build_pairs_strategy2(audio, "audio")
    labeled_src = [s for s in ss if s.group < r.labeled_groups]
    train_src, held_src = _reward_split(run, labeled_src)
    seed = run.seed("reward")
    lab_train = simulate_labels(train_src, seed, r.votes, r.agree, r.noise_std)
    lab_held = simulate_labels(held_src, seed, r.votes, r.agree, r.noise_std)
    info: dict = {"labeled_train": len(lab_train), "labeled_heldout": len(lab_held)}
    pairs[3] = []
    if len(lab_train) >= 2 and lab_held:
        rm = train_reward_model(lab_train, RewardConfig(r.hidden, r.steps, r.lr, r.batch, seed))
        save_tensors({**{n: t.data for n, t in rm.params.items()}, "rm.mu": rm.mu.astype(np.float32),
                      "rm.sigma": rm.sigma.astype(np.float32)}, run.path("reward.ckpt"))
        info["reward_train_accuracy"] = rm.train_accuracy
        try:
            th = tune_threshold(rm, lab_held, r.target)
            info.update(delta=th.delta, heldout_accuracy=th.accuracy, coverage=th.coverage, reachable=True)
            pairs[3] = build_pairs_strategy3(rm, th.delta, ss)
        except UnreachableTargetError as exc:
            info.update(reachable=False, best_accuracy=exc.best)
            log.warning("strategy 3 skipped: %s", exc)
        rewards = [s.scores["reward"] if "reward" in s.scores else rm.score_sample(s) for s in ss]
        info["reward_oracle_pearson"] = pearson(rewards, [s.scores["musicality"] for s in ss])
        run._cache["rm"] = rm
    else:
        info["reachable"] = False
    for s in STRATEGIES:
        write_pairs(pairs[s], run.path(f"pairs_s{s}.jsonl"))
    info["pair_counts"] = {str(s): len(pairs[s]) for s in STRATEGIES}
    run.write_json("pairs_summary.json", info)
    run._cache["pairs"] = pairs
    return pairs


def load_pairs(run: Run) -> dict:
    if "pairs" in run._cache:
        return run._cache["pairs"]
    from .alignment.pairs import PreferencePair
    by_sid = {s.sid: s for s in samples(run)}
    out = {}
    for s in STRATEGIES:
        rows = [json.loads(x) for x in run._need(f"pairs_s{s}.jsonl").read_text().splitlines() if x.strip()]
        out[s] = [PreferencePair(r["strategy"], by_sid[r["winner"]], by_sid[r["loser"]], r["score_w"], r["score_l"])
                  for r in rows]
    run._cache["pairs"] = out
    return out


def _dpo_cfg(run: Run, tag) -> DPOConfig:
    d = run.cfg.alignment.dpo
    return DPOConfig(d.beta, d.steps, d.batch_pairs, d.lr, d.warmup, run.seed("dpo", tag), d.length_normalize)


def _dpo_run(run: Run, base: LeLM, pairs, tag) -> LeLM:
    if not pairs:
        log.warning("no pairs for %s; keeping the stage-2 model", tag)
        return base.copy()
    cfg = _dpo_cfg(run, tag)
    writer = lambda rec: run.metrics({**rec, "stage": f"dpo-{tag}"})
    model, res = train_stage3_dpo(base, pairs, cfg, writer)
    run._cache.setdefault("dpo_results", {})[str(tag)] = {"initial_loss": res.initial_loss,
                                                          "final_loss": res.losses[-1],
                                                          "epoch_margins": res.epoch_margins}
    return model


def step_train_dpo(run: Run) -> None:
    base = run.model("model_stage2")
    pairs = load_pairs(run)
    for s in STRATEGIES:
        run.save_model(f"dpo_s{s}", _dpo_run(run, base, pairs[s], f"s{s}"))
    if run.cfg.alignment.mixed_baseline:
        union = [p for s in STRATEGIES for p in pairs[s]]
        run.save_model("dpo_mixed", _dpo_run(run, base, union, "mixed"))
    run.write_json("dpo_summary.json", run._cache.get("dpo_results", {}))


def merged_model(run: Run, alpha) -> LeLM:
    models = [run.model(f"dpo_s{s}") for s in STRATEGIES]
    params = interpolate([m.params for m in models], MergeWeights(tuple(alpha)))
    return LeLM(models[0].cfg, params, {"stage": 3, "merge_alpha": list(alpha)})


def step_merge(run: Run, alpha=None) -> None:
    alpha = tuple(run.cfg.alignment.merge_alpha if alpha is None else alpha)
    run.save_model("merged", merged_model(run, alpha))


def step_generate(run: Run, model_name: str = "merged") -> None:
    model = run.model(model_name)
    from .evalx import eval_conditions
    prompts = run.eval_prompts()
    streams = generate_many(model, eval_conditions(prompts), run.sampler())
    codec = run.codec()
    feats = {}
    with open(run.path("generated.jsonl"), "w") as fh:
        for i, st in enumerate(streams):
            fh.write(json.dumps({"prompt": i, **st.to_json()}, sort_keys=True) + "\n")
            vocal, accomp, mixed = codec.decode_streams(st)
            feats[f"gen.{i}.mixed"] = mixed
            if vocal is not None:
                feats[f"gen.{i}.vocal"] = vocal
                feats[f"gen.{i}.accomp"] = accomp
    save_tensors(feats, run.path("generated_features.ckpt"))


def eval_models(run: Run) -> dict:
    names = ["model_stage2"] + [f"dpo_s{s}" for s in STRATEGIES]
    if run.cfg.alignment.mixed_baseline and run.path("dpo_mixed.ckpt").exists():
        names.append("dpo_mixed")
    if run.path("merged.ckpt").exists():
        names.append("merged")
    return {n: run.model(n) for n in names}


def step_eval(run: Run) -> MetricsReport:
    cfg = run.cfg
    report = MetricsReport(meta={"config_hash": config_hash(cfg), "seed": cfg.seed, "eval_seed": run.seed("eval")})
    prompts = run.eval_prompts()
    codec = run.codec()
    mse = recon_mse(codec, run.heldout()[: cfg.evalx.prompts])
    pair_info = json.loads(run.path("pairs_summary.json").read_text()) if run.path("pairs_summary.json").exists() \
        else {}
    for name, model in eval_models(run).items():
        m = evaluate_model(model, codec, prompts, run.sampler())
        m["recon_mse"] = mse
        m["pair_counts"] = pair_info.get("pair_counts", {})
        report.add(name, m)
    # memorization of the merged (or last) model's mixed tokens against training songs
    final = eval_models(run)
    last = final.get("merged") or final[list(final)[-1]]
    from .evalx import eval_conditions
    gen = generate_many(last, eval_conditions(prompts), run.sampler())
    train = [ex.streams.mixed for ex in run.examples()[: cfg.evalx.memorization_songs]]
    report.meta["memorization"] = memorization([g.mixed for g in gen], train, cfg.evalx.ngram)
    report.meta["train"] = run.read_json("train_summary.json")
    if pair_info:
        report.meta["pairs"] = pair_info
    report.write(run.path("report.json"))
    report.write_csv(run.path("report.csv"))
    return report


def step_sweep(run: Run, alphas=None) -> list:
    alphas = [tuple(a) for a in (alphas or run.cfg.alignment.sweep_alphas)]
    prompts = run.eval_prompts()
    rows = []
    for alpha in alphas:
        m = evaluate_model(merged_model(run, alpha), run.codec(), prompts, run.sampler())
        rows.append({"alpha": list(alpha), **m})
    run.write_json("sweep.json", rows)
    with open(run.path("sweep.csv"), "w") as fh:
        fh.write("alpha1,alpha2,alpha3,per_analog,style_sim_text,style_sim_audio,musicality\n")
        for r in rows:
            a = r["alpha"]
            fh.write(f"{a[0]:.4f},{a[1]:.4f},{a[2]:.4f},{r['per_analog']:.6f},{r['style_sim_text']:.6f},"
                     f"{r['style_sim_audio']:.6f},{r['musicality']:.6f}\n")
    return rows


# --- ablation ------------------------------------------------------------------

def step_ablate(run: Run) -> MetricsReport:
    """Five variants under shared seeds: full, joint, no AR decoder, no dual-track, no DPO."""
    cfg = run.cfg
    report = MetricsReport(meta={"config_hash": config_hash(cfg), "seed": cfg.seed})
    prompts = run.eval_prompts()
    codec = run.codec()
    heldout = run.heldout()[: cfg.evalx.prompts]
    ex = run.examples()
    failures = {}

    def variant(name, fn):
        try:
            model, vcodec, dual = fn()
            m = evaluate_model(model, vcodec, prompts, run.sampler(), dual=dual)
            m["recon_mse"] = recon_mse(vcodec, heldout)
            report.add(name, m)
        except Exception as exc:  # a failed variant must not stop the others
            log.exception("ablation variant %s failed", name)
            failures[name] = f"{type(exc).__name__}: {exc}"

    def full():
        if not run.path("merged.ckpt").exists():
            raise PipelineError("full pipeline artifacts missing; run `all` first")
        return run.model("merged"), codec, True

    def joint():
        model = LeLM.init(cfg.lelm, run.seed("init"))
        s = cfg.trainer.stage1
        model, _ = train_joint(model, ex, StageConfig("joint", s.steps, s.batch_size, s.warmup, run.seed("joint"),
                                                      s.dropout, s.lr_scale, s.clip_norm),
                               lambda rec: run.metrics({**rec, "stage": "ablate-joint"}))
        return model, codec, True

    def no_ar_decoder():
        # the LM half of the parameters is identical, so stage 1 is shared with the full run
        lm_cfg = dataclasses.replace(cfg.lelm, dec_layers=0)
        model = LeLM.init(lm_cfg, run.seed("init"))
        stage1 = run.model("model_stage1")
        for name in model.params.matching("lm.*"):
            model.params[name].data = stage1.params[name].data.copy()
        model, _ = train_stage2(model, ex, _stage_cfg(cfg.trainer.stage2, "2", run.seed("stage2")),
                                lambda rec: run.metrics({**rec, "stage": "ablate-no-ar-decoder"}))
        return model, codec, True

    def no_dual():
        return run.model("model_stage1"), RvqCodec({"mixed": codec.books["mixed"]}), False

    def no_dpo():
        return run.model("model_stage2"), codec, True

    for name, fn in (("full", full), ("joint", joint), ("no_ar_decoder", no_ar_decoder),
                     ("no_dual_track", no_dual), ("no_dpo", no_dpo)):
        variant(name, fn)
    report.meta["failures"] = failures
    report.write(run.path("ablation.json"))
    report.write_csv(run.path("ablation.csv"))
    return report


def run_ablation(cfg: RunConfig, out_dir=None) -> MetricsReport:
    run = Run(cfg, out_dir or "runs/ablation")
    run.write_header()
    if not run.path("merged.ckpt").exists():
        run_all(run)
    return run.timed("ablate", step_ablate)


PIPELINE = (("gen-corpus", step_gen_corpus), ("fit-codec", step_fit_codec), ("train", step_train),
            ("mine", step_mine), ("build-pairs", step_build_pairs), ("train-dpo", step_train_dpo),
            ("merge", step_merge), ("eval", step_eval))


def run_all(run: Run) -> None:
    run.path("metrics.jsonl").unlink(missing_ok=True)
    for name, fn in PIPELINE:
        log.info("pipeline step %s", name)
        run.timed(name, fn)


def describe(cfg: RunConfig) -> str:
    return canonical_json(cfg)

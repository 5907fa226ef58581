"""Subcommand handlers for the experiment runner.

Every handler takes a validated ExperimentConfig, writes its artifacts into
OUT_DIR and finishes by writing manifest.json (resolved config, seed, input
checksum and a SHA-256 per artifact). Passing that manifest back as
--config replays the run.
"""

import glob
import hashlib
import json
import logging
import os
from dataclasses import replace

import pandas as pd

from attack import build_attack_dataset, build_shadow, measure_attack, train_attack, train_shadow
from data import split, subsample
from datasetcode import generate_sample_data
from evaluation import evaluate
from federation import train, usable_clients
from linalg import RngStream
from local_database import LocalCorpusStore
from model import init_params, load_params, save_params
from privacy import accountant_table, calibrate_noise, epsilon, train_dp

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class Run:
    """Artifact bookkeeping for one subcommand invocation."""

    def __init__(self, command, cfg, progress=True):
        self.command = command
        self.cfg = cfg
        self.progress = progress
        self.out_dir = cfg.out_dir
        self.artifacts = []
        self.input_checksum = None
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def write_csv(self, frame, name, index=False):
        frame.to_csv(self.path(name), index=index)
        self.artifacts.append(name)
        print(f"   wrote {self.path(name)}")

    def write_params(self, theta, name, extra=None):
        save_params(theta, self.path(name), {"command": self.command, "seed": self.cfg.seed, **(extra or {})})
        self.artifacts.append(name)
        print(f"   wrote {self.path(name)}")

    def finish(self):
        digests = {}
        for name in self.artifacts:
            with open(self.path(name), "rb") as f:
                digests[name] = hashlib.sha256(f.read()).hexdigest()
        manifest = {
            "command": self.command,
            "seed": self.cfg.seed,
            "input_checksum": self.input_checksum,
            "config": self.cfg.snapshot(),
            "artifacts": digests,
        }
        with open(self.path(MANIFEST), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        return manifest


# --- shared steps ----------------------------------------------------------

def load_corpus(run):
    cfg = run.cfg
    store = LocalCorpusStore(cfg["CACHE_DIR"])
    corpus, digest = store.load_or_ingest(cfg["DATA_PATH"], cfg["DATASET"], cfg["SESSION_GAP"], cfg["MAX_SESSION_LEN"])
    run.input_checksum = digest
    if cfg["SUBSAMPLE_USERS"]:
        corpus = subsample(corpus, cfg["SUBSAMPLE_USERS"], RngStream(cfg.seed, "subsample"))
    return corpus


def prepare(run):
    """Corpus, user split and the training clients."""
    corpus = load_corpus(run)
    plan = split(corpus, RngStream(run.cfg.seed, "split"))
    by_id = corpus.by_id()
    clients = [by_id[u] for u in plan.train_users]
    return corpus, plan, clients


def initial_params(cfg, corpus):
    return init_params(cfg.model_config(), corpus.vocabulary, RngStream(cfg.seed, "init"))


def _fit_clients_per_round(fed_cfg, n_clients):
    if fed_cfg.clients_per_round > n_clients:
        logger.warning("M=%d exceeds %d available clients; using %d", fed_cfg.clients_per_round, n_clients, n_clients)
        return replace(fed_cfg, clients_per_round=n_clients)
    return fed_cfg


def _dp_settings(cfg, n_clients, mechanism=None, target_epsilon=None):
    """DpConfig for a run, calibrating z when a Gaussian target epsilon is given."""
    fed_cfg = _fit_clients_per_round(cfg.federation_config(), n_clients)
    mechanism = mechanism or cfg["MECHANISM"]
    target_epsilon = cfg["EPSILON"] if target_epsilon is None else target_epsilon
    dp = cfg.dp_config(mechanism=mechanism, epsilon=target_epsilon)
    if mechanism == "gaussian" and target_epsilon is not None:
        accesses = fed_cfg.clients_per_round if dp.charging == "per-client" else 1
        z = calibrate_noise(target_epsilon, dp.delta, fed_cfg.clients_per_round / n_clients, fed_cfg.rounds,
                            accesses, dp.bound)
        dp = cfg.dp_config(noise_scale=z, mechanism=mechanism, epsilon=target_epsilon)
    return fed_cfg, dp


# --- subcommands -----------------------------------------------------------

def cmd_generate_data(run):
    cfg = run.cfg
    users, movies, ratings = generate_sample_data(cfg["DATA_PATH"], cfg["GENERATE_USERS"], cfg["GENERATE_MOVIES"],
                                                  seed=cfg.seed)
    print(f"   generated {users} users, {movies} movies, {ratings} ratings in {cfg['DATA_PATH']}")


def cmd_ingest(run):
    corpus = load_corpus(run)
    stats = corpus.stats()
    run.write_csv(pd.DataFrame([stats]), "corpus_stats.csv")
    counts = corpus.interaction_counts().rename_axis("user").reset_index()
    run.write_csv(counts, "interaction_counts.csv")
    print(f"   {stats['users']} users, {stats['items']} items, {stats['interactions']} interactions")


def cmd_train_privrec(run):
    cfg = run.cfg
    corpus, plan, clients = prepare(run)
    fed_cfg = _fit_clients_per_round(cfg.federation_config(), len(clients))
    theta0 = initial_params(cfg, corpus)
    theta, trace = train(clients, fed_cfg, "dssm", theta0, corpus.catalog,
                         checkpoint_dir=run.out_dir, progress=run.progress)
    run.write_params(theta, "privrec.params", {"rounds": fed_cfg.rounds})
    run.write_csv(trace, "privrec_trace.csv")


def cmd_pretrain_ssl(run):
    cfg = run.cfg
    corpus, plan, clients = prepare(run)
    ssl_clients = usable_clients(clients, "ssl-only")
    fed_cfg = _fit_clients_per_round(cfg.federation_config(pretrain=True), len(ssl_clients))
    theta0 = initial_params(cfg, corpus)
    theta, trace = train(ssl_clients, fed_cfg, "ssl-only", theta0, corpus.catalog, progress=run.progress)
    run.write_params(theta, "ssl_pretrained.params", {"rounds": fed_cfg.rounds})
    run.write_csv(trace, "ssl_trace.csv")


def cmd_train_dp(run):
    cfg = run.cfg
    corpus, plan, clients = prepare(run)
    fed_cfg, dp = _dp_settings(cfg, len(clients))
    pretrain_cfg = None
    if cfg["DP_MODE"] == "two-stage":
        ssl_count = len(usable_clients(clients, "ssl-only"))
        pretrain_cfg = _fit_clients_per_round(cfg.federation_config(pretrain=True), ssl_count)
    theta, trace, acc = train_dp(clients, fed_cfg, dp, cfg["DP_MODE"], initial_params(cfg, corpus), corpus.catalog,
                                 pretrain_cfg, checkpoint_dir=run.out_dir, progress=run.progress)
    name = f"dp_{cfg['DP_MODE']}"
    run.write_params(theta, f"{name}.params", {"rounds": fed_cfg.rounds, "z": dp.noise_scale})
    run.write_csv(trace, f"{name}_trace.csv")
    spent = epsilon(acc, dp.delta)
    run.write_csv(pd.DataFrame([{
        "mode": cfg["DP_MODE"], "mechanism": dp.mechanism, "z": dp.noise_scale, "clip_bound": dp.clip_bound,
        "q": acc.q, "rounds": acc.compositions, "delta": dp.delta, "epsilon": spent,
    }]), f"{name}_privacy.csv")
    run.write_csv(acc.to_frame(), f"{name}_rdp.csv")
    print(f"   privacy spent: epsilon={spent:.4f} at delta={dp.delta:g}")


def cmd_evaluate(run):
    cfg = run.cfg
    corpus, plan, clients = prepare(run)
    params = cfg["PARAMS"] or run.path("privrec.params")
    if not os.path.exists(params):
        raise FileNotFoundError(f"no parameter file at {params}")
    theta, _ = load_params(params)
    report = evaluate(theta, corpus, plan, cfg.eval_config(), cfg.federation_config())
    model = os.path.splitext(os.path.basename(params))[0]
    suffix = "" if cfg["PERSONALIZE"] else "_global"
    if cfg["INACTIVE_BELOW"] is not None:
        suffix += f"_inactive{cfg['INACTIVE_BELOW']}"
    run.write_csv(report.to_frame(model + suffix), f"metrics{suffix}.csv")
    run.write_csv(report.per_user, f"metrics{suffix}_per_user.csv")
    print(report.summary())


def cmd_accountant(run):
    cfg = run.cfg
    table = accountant_table(cfg["ACCOUNTANT_N"], cfg["ACCOUNTANT_M"], cfg["ACCOUNTANT_Z"],
                             cfg["ACCOUNTANT_ROUNDS"], cfg["ACCOUNTANT_DELTAS"], cfg["CHARGING"], cfg["RDP_BOUND"])
    run.write_csv(table, "accountant.csv", index=True)
    print(table.to_string())


def cmd_attack(run):
    cfg = run.cfg
    corpus = load_corpus(run)
    shadow = build_shadow(corpus, RngStream(cfg.seed, "shadow"), cfg["ATTACK_SHADOW_USERS"])
    by_id = corpus.by_id()
    model_cfg = cfg.model_config()

    shadow_cfg = _fit_clients_per_round(cfg.federation_config(), len(shadow.used))
    f_s = train_shadow(corpus, shadow.used, model_cfg, shadow_cfg, RngStream(cfg.seed, "shadow-init"), run.progress)
    examples = build_attack_dataset(f_s, corpus, shadow.used, shadow.unused)
    attack = train_attack(examples, f_s, corpus.catalog, corpus.user_vocab, seed=cfg.seed,
                          n_trees=cfg["ATTACK_TREES"], max_depth=cfg["ATTACK_DEPTH"])
    print(f"   attack training accuracy {attack.training_accuracy:.3f}")

    members = [by_id[u] for u in shadow.members]
    probes = list(shadow.probe_users)
    truth = shadow.truth(probes)
    theta0 = initial_params(cfg, corpus)
    rows = []

    fed_cfg = _fit_clients_per_round(cfg.federation_config(), len(members))
    target, _ = train(members, fed_cfg, "dssm", theta0, corpus.catalog, progress=run.progress)
    rows.append(("privrec", float("inf"), "none", measure_attack(attack, target, corpus, probes, truth)))

    ssl_count = len(usable_clients(members, "ssl-only"))
    pretrain_cfg = _fit_clients_per_round(cfg.federation_config(pretrain=True), ssl_count)
    for budget in cfg["ATTACK_EPSILONS"]:
        for mechanism in ("gaussian", "laplace"):
            fed_cfg, dp = _dp_settings(cfg, len(members), mechanism, budget)
            target, _, _ = train_dp(members, fed_cfg, dp, cfg["DP_MODE"], theta0, corpus.catalog, pretrain_cfg,
                                    progress=run.progress)
            name = "dp-privrec" if mechanism == "gaussian" else "lm-privrec"
            rows.append((name, budget, mechanism, measure_attack(attack, target, corpus, probes, truth)))

    frame = pd.DataFrame(rows, columns=["target_model", "epsilon", "mechanism", "attack_accuracy"])
    frame["seed"] = cfg.seed
    run.write_csv(frame, "attack.csv")
    print(frame.to_string(index=False))


def cmd_report(run):
    """Concatenate the metrics and attack CSVs of every run below OUT_DIR."""
    for pattern, name in (("metrics*.csv", "report_metrics.csv"), ("attack.csv", "report_attack.csv")):
        frames = []
        for path in sorted(glob.glob(os.path.join(run.out_dir, "**", pattern), recursive=True)):
            if path.endswith("_per_user.csv") or os.path.basename(path).startswith("report_"):
                continue
            frame = pd.read_csv(path)
            frame.insert(0, "run", os.path.relpath(os.path.dirname(path), run.out_dir))
            frames.append(frame)
        if frames:
            run.write_csv(pd.concat(frames, ignore_index=True), name)
        else:
            logger.warning("no %s files under %s", pattern, run.out_dir)


COMMANDS = {
    "generate-data": (cmd_generate_data, False),
    "ingest": (cmd_ingest, True),
    "train-privrec": (cmd_train_privrec, True),
    "pretrain-ssl": (cmd_pretrain_ssl, True),
    "train-dp": (cmd_train_dp, True),
    "evaluate": (cmd_evaluate, True),
    "accountant": (cmd_accountant, False),
    "attack": (cmd_attack, True),
    "report": (cmd_report, False),
}


def run_command(command, cfg, progress=True):
    """Execute one subcommand; returns the written manifest."""
    handler, _ = COMMANDS[command]
    run = Run(command, cfg, progress)
    handler(run)
    return run.finish()

import numpy as np
import pytest

from gossipsgd.config import ConfigError, RunConfig, initial_point, load_config, parse_config, to_text
from gossipsgd.core import ProtocolKind

MINIMAL = "[run]\nprotocol = pull-gossip\n[hyperparams]\np = 8\nalpha0 = 0.1\n"


def test_minimal_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.protocol is ProtocolKind.PULL_GOSSIP
    assert (cfg.h.mu, cfg.h.weight_decay, cfg.h.tau, cfg.h.beta_ea) == (0.9, 1e-4, 1, 0.1)
    assert cfg.backend == "sim" and cfg.trials == 1
    assert cfg.objective.spectrum == (1.0, 2.0, 5.0, 10.0)


@pytest.mark.parametrize("text,msg", [
    ("[run]\nprotocol = downpour\n", "unknown protocol"),
    ("[run]\nprotocol = pull-gossip\n[hyperparams]\nalpha0 = 0\n", "step size must be positive"),
    ("[run]\nprotocol = pull-gossip\ncolour = red\n", "unknown key run.colour"),
    ("[run]\nprotocol = pull-gossip\n[extras]\na = 1\n", r"unknown section \[extras\]"),
    ("[run]\ntrials = 3\n", "missing required key run.protocol"),
    ("[run]\nprotocol = pull-gossip\ntrials = 0\n", "trials"),
    ("[run]\nprotocol = pull-gossip\ntrials = many\n", "run.trials"),
    ("[run]\nprotocol = async-pull\nbackend = transport\n", "transport backend does not run"),
    ("[run]\nprotocol = async-pull\n", "needs clock.kind = poisson"),
    ("[run]\nprotocol = pull-gossip\n[clock]\nkind = poisson\n", "no poisson-clock"),
    ("[run]\nprotocol = pull-gossip\nemit = pictures\n", "unknown emit"),
    ("[run]\nprotocol = pull-gossip\n[objective]\nspectrum = 1, -2\n", "strictly positive"),
    ("[run]\nprotocol = pull-gossip\n[objective]\nkind = logistic\n", "dataset"),
    ("[run]\nprotocol = pull-gossip\n[bounds]\nlambda_variant = mean\n", "lambda_variant"),
    ("[run]\nprotocol = pull-gossip\n[straggler]\nslow_node = 8\n", "slow_node"),
    ("not an ini file", "malformed"),
])
def test_rejects(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


@pytest.mark.parametrize("text", [
    MINIMAL,
    "[run]\nprotocol = async-pull\ntrials = 3\nmax_sim_time = 12.5\nemit = trace_jsonl\n"
    "[clock]\nkind = poisson\n[hyperparams]\nanneal_at =\nbeta_gossip = 0.3\n[init]\ninit_sq_err = 8\n",
    "[run]\nprotocol = all-reduce\nbackend = transport\n[transport]\njitter = 0.001\n"
    "[straggler]\nkind = lognormal\nsigma = 0.7\nlatency = 0.2\n[noise]\ntotal_variance = 0.0123456789\n",
    "[run]\nprotocol = elastic-avg\nemit =\n[objective]\nspectrum = 0.1, 3\noptimum = 1, -1\n"
    "[init]\ntheta0 = 0.5, 0.25\n",
])
def test_echo_round_trip(text):
    cfg = parse_config(text)
    assert parse_config(to_text(cfg)) == cfg


def test_logistic_dataset_resolves_relative(tmp_path):
    (tmp_path / "data.csv").write_text("1,0.5\n0,-0.5\n")
    path = tmp_path / "run.ini"
    path.write_text("[run]\nprotocol = pull-gossip\n[objective]\nkind = logistic\ndataset = data.csv\nl2 = 0.1\n")
    cfg = load_config(path)
    assert cfg.objective.dataset == str((tmp_path / "data.csv").resolve())
    assert cfg.objective.build().n_samples == 2


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.ini")


def test_init_sq_err_scaling():
    cfg = parse_config(MINIMAL + "[init]\ninit_sq_err = 8\n")
    obj = cfg.objective.build()
    th = np.tile(initial_point(cfg, obj), (8, 1))
    assert ((th - obj.optimum) ** 2).sum() == pytest.approx(8.0)


def test_explicit_per_node_start():
    text = "[run]\nprotocol = pull-gossip\n[hyperparams]\np = 2\n[objective]\nspectrum = 1\n[init]\ntheta0 = 1, 0\n"
    cfg = parse_config(text)
    np.testing.assert_array_equal(initial_point(cfg, cfg.objective.build()), [[1.0], [0.0]])


def test_bad_theta0_size():
    cfg = parse_config("[run]\nprotocol = pull-gossip\n[init]\ntheta0 = 1, 2, 3\n")
    with pytest.raises(ConfigError):
        initial_point(cfg, cfg.objective.build())


def test_trial_ids_distinct():
    cfg = RunConfig(ProtocolKind.PULL_GOSSIP, run_id="x")
    assert cfg.trial_id(0) != cfg.trial_id(1)

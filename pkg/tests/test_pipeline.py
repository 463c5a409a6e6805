import json

import numpy as np
import pytest
from sklearn.base import clone

from solar import SolarEmbedder
from solar.cli import main
from solar.evaluation import evaluate_embeddings
from solar.exceptions import ConfigError, FixtureError, NumericalAbort
from solar.model import load_params
from solar.pipeline import (
    RunConfig, batch_indices, embed_corpus, evaluate, load_benchmark_dir, load_data, load_embeddings,
    mask_f1, resume_stage1, run_pipeline, save_benchmark_dir, sgd_step, train_stage1, train_stage2,
)

TINY = {
    "data": {"n_train": 48, "n_heldout": 8, "synth": {"patch_grid": [4, 4], "text_length": 8}},
    "model": {"d": 8, "heads": 2, "hidden": 12, "layers": 2, "tie_adapter_init": True},
    "stage1": {"steps": 6, "batch_size": 8, "lr": 0.3, "anneal_steps": 3},
    "stage2": {"steps": 3, "batch_size": 4, "lr": 0.3},
    "mining": {"k": 3},
    "benchmark": {"n_triplets": 6, "n_distractors": 20, "bootstrap_iters": 100, "variant_fraction": 0.5},
}


def tiny(**sections):
    d = json.loads(json.dumps(TINY))
    for k, v in sections.items():
        d.setdefault(k, {}).update(v)
    return RunConfig.from_dict(d)


def test_config_round_trip_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(TINY))
    cfg = RunConfig.load(p, ["stage1.lr=0.5", "data.synth.noise_sigma=0", "mining.k=4"], env={})
    assert cfg.stage1.lr == 0.5 and cfg.data.synth["noise_sigma"] == 0 and cfg.mining.k == 4
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg
    assert RunConfig.load(p, env={"SOLAR_SEED": "17"}).seed == 17


@pytest.mark.parametrize(
    "bad",
    [{"stage1": {"stpes": 3}}, {"nonsense": 1}, {"stage1": {"batch_size": 2}},
     {"stage2": {"positive_mode": "x"}}, {"data": {"fixture": "/nope"}}, {"stage1": {"lr": 0}}],
)
def test_config_errors(bad, tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(ConfigError):
        RunConfig.load(p, env={})


def test_override_errors():
    cfg = RunConfig()
    with pytest.raises(ConfigError):
        cfg.override("stage1.unknown=1")
    with pytest.raises(ConfigError):
        cfg.override("no-equals")
    with pytest.raises(ConfigError):
        RunConfig.load(env={"SOLAR_SEED": "abc"})


def test_batch_indices():
    a = batch_indices(100, 10, 0, 1, 5)
    assert len(set(a)) == 10 and np.array_equal(a, batch_indices(100, 10, 0, 1, 5))
    assert not np.array_equal(a, batch_indices(100, 10, 0, 1, 6))
    assert not np.array_equal(a, batch_indices(100, 10, 0, 2, 5))


def test_sgd_clips_and_bounds_temperature():
    from solar.model import ModelConfig, ModelParams
    p = ModelParams.init(ModelConfig(4, 4, d=4, heads=1, hidden=4, layers=1))
    p.zero_grad()
    for q in p:
        q.grad = np.ones_like(q.data)
    before = p.copy()
    norm = sgd_step(p, lr=1.0, eta_lr=100.0, clip=1.0)
    moved = np.sqrt(sum(((a.data - b.data) ** 2).sum() for a, b in zip(p, before) if a.name != "log_eta"))
    assert norm > 1 and moved <= 1.0 + 1e-9
    assert 0.01 <= p.eta.item() <= 1.0


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny()
    return cfg, out, run_pipeline(cfg, out)


def test_stage1_log_identity(tiny_run):
    cfg, _, res = tiny_run
    for r in res.stage1.log:
        l1, l2, l3 = r["weights"]
        assert r["total"] == pytest.approx(r["itc"] + l1 * r["gla"] + l2 * r["gd"] + l3 * r["ld"], rel=1e-12)
        assert r["gd"] == pytest.approx(r["gd_vision"] + r["gd_language"], rel=1e-12)
        assert {"rho", "tau_v", "tau_l", "eta"} <= set(r)
    assert res.stage1.log[0]["rho"] == 1.0 and res.stage1.log[-1]["rho"] == 0.0


def test_run_outputs(tiny_run):
    cfg, out, res = tiny_run
    for name in ("stage1", "stage2"):
        params, meta = load_params(out / name)
        assert meta["stage"] == int(name[-1])
        assert (out / f"report_{name}.json").exists()
    assert (out / "hard_negatives.jsonl").exists()
    assert set(res.mask_f1) == {"image", "text", "all", "tau_v", "tau_l"}
    assert res.stage2.log[-1]["groups"] >= 1


def test_stage2_freezes_projection_heads(tiny_run):
    _, _, res = tiny_run
    for name in ("proj_v.w", "proj_l.w"):
        np.testing.assert_array_equal(res.stage1.params[name].data, res.stage2.params[name].data)
    assert not np.array_equal(res.stage1.params["vl.0.attn.q.w"].data, res.stage2.params["vl.0.attn.q.w"].data)


def test_stage1_determinism_and_resume(tmp_path):
    cfg = tiny(stage1={"checkpoint_every": 3})
    data = load_data(cfg)
    a = train_stage1(cfg, data, tmp_path / "a")
    b = train_stage1(cfg, data)
    assert a.params.equals(b.params)
    resumed = resume_stage1(cfg, tmp_path / "a" / "stage1-step3", data, tmp_path / "r")
    assert resumed.params.equals(a.params)
    assert resumed.log == a.log[3:]


def test_numerical_abort_keeps_last_good(tmp_path):
    cfg = tiny(stage1={"lr": 1e308, "clip_norm": None})
    with pytest.raises(NumericalAbort):
        train_stage1(cfg, out_dir=tmp_path)
    params, meta = load_params(tmp_path / "stage1-last-good")
    assert meta["aborted"] and params.all_finite()


def test_embed_and_evaluate_composition(tiny_run, tmp_path):
    cfg, _, res = tiny_run
    data = load_data(cfg, with_benchmark=True)
    ids, E = embed_corpus(res.stage2.params, data.benchmark.samples, tmp_path / "emb")
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-12)
    loaded = load_embeddings(tmp_path / "emb")
    assert list(loaded) == ids and np.array_equal(np.stack(list(loaded.values())), E)
    rep, _ = evaluate(cfg, res.stage2.params, data.benchmark)
    manual, _ = evaluate_embeddings(loaded, data.benchmark.triplets, data.benchmark.pool_ids,
                                    cfg.benchmark.bootstrap_iters, cfg.benchmark.ci_level, cfg.seed)
    assert rep == manual == res.reports["stage2"]
    # order independence of content
    rev = data.benchmark.samples.subset(ids[::-1])
    _, E2 = embed_corpus(res.stage2.params, rev)
    np.testing.assert_allclose(E2[::-1], E, atol=1e-12)


def test_benchmark_dir_round_trip(tmp_path):
    cfg = tiny()
    bench = load_data(cfg, with_benchmark=True).benchmark
    save_benchmark_dir(bench, tmp_path / "b")
    back = load_benchmark_dir(tmp_path / "b")
    assert back.triplets == bench.triplets and back.pool_ids == bench.pool_ids
    assert back.samples == bench.samples
    (tmp_path / "b" / "pool.json").write_text(json.dumps(["ghost"]))
    with pytest.raises(FixtureError, match="ghost"):
        load_benchmark_dir(tmp_path / "b")


def test_cli_end_to_end(tmp_path, capsys):
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(TINY))
    run = tmp_path / "run"
    base = ["--config", str(cfgp), "--out", str(run)]
    assert main(["synth", *base]) == 0
    assert (run / "fixture" / "manifest.json").exists() and (run / "benchmark" / "pool.json").exists()
    assert main(["train-stage1", *base]) == 0
    assert main(["mine", *base, "--checkpoint", str(run / "stage1")]) == 0
    assert main(["train-stage2", *base, "--checkpoint", str(run / "stage1"),
                 "--index", str(run / "hard_negatives.jsonl")]) == 0
    assert main(["embed", *base, "--checkpoint", str(run / "stage2")]) == 0
    assert (run / "embeddings" / "embeddings.solt").exists()
    for name in ("stage1", "stage2"):
        assert main(["eval", *base, "--checkpoint", str(run / name), "--name", name]) == 0
    assert main(["report", str(run)]) == 0
    for svg in ("stage1_losses.svg", "stage2_losses.svg", "metrics.svg"):
        assert (run / svg).read_text().lstrip().startswith("<?xml")
    # fixture-backed evaluation reads the benchmark directory
    fx = ["--set", f"data.fixture={run / 'fixture'}", "--set", f"benchmark.path={run / 'benchmark'}"]
    assert main(["eval", *base, *fx, "--checkpoint", str(run / "stage2"), "--name", "fixture"]) == 0
    a = json.loads((run / "report_stage2.json").read_text())
    b = json.loads((run / "report_fixture.json").read_text())
    assert a == b


def test_cli_exit_codes(tmp_path):
    assert main(["train-stage1", "--set", "stage1.bogus=1"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none")]) == 2
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(TINY))
    code = main(["train-stage1", "--config", str(cfgp), "--out", str(tmp_path / "r"),
                 "--set", "stage1.lr=1e308", "--set", "stage1.clip_norm=null"])
    assert code == 3


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--instances", "1"]) == 0
    assert "stage1_total" in capsys.readouterr().out


def test_estimator_api():
    from solar import SynthConfig, synth_generate
    X = synth_generate(SynthConfig(patch_grid=(4, 4), text_length=8, seed=2), 24)
    est = SolarEmbedder(d=8, hidden=12, layers=2, stage1_steps=3, stage1_batch_size=8,
                        stage2_steps=2, stage2_batch_size=4)
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(seed=3).seed == 3
    E = est.fit(X).transform(X[:5])
    assert E.shape == (5, 8)
    masks = est.predict_masks(X[:4])
    assert len(masks) == 4 and masks[0][0].shape == (16,)
    assert set(est.mask_f1(X[:4])) >= {"image", "text", "all"}
    with pytest.raises(TypeError):
        est.transform(np.zeros((3, 3)))
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        SolarEmbedder().transform(X)

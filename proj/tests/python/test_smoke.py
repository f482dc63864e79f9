"""End-to-end smoke checks for the python surface of the workbench."""

import json
import os

import pytest

import protosteer


def tiny_config(out_dir):
    cfg = json.loads(protosteer.default_config())
    cfg["out_dir"] = out_dir
    cfg["corpus"].update(
        {
            "num_classes": 3,
            "content_tokens": 24,
            "marker_block": 4,
            "corpus_size": 120,
            "prompt_len_min": 3,
            "prompt_len_max": 5,
            "response_len_min": 6,
            "response_len_max": 10,
        }
    )
    cfg["lm"].update({"dim": 16, "layers": 2, "heads": 2, "head_dim": 8, "context": 32, "hook_layer": 1})
    cfg["lm_train"].update({"epochs": 1, "batch": 8, "val_batch": 16})
    cfg["sae"].update({"latent": 12, "epochs": 2, "batch": 32, "max_vectors": 512, "lr": 1e-3})
    cfg["steer"]["max_iters"] = 50
    cfg["eval"].update({"support_per_class": 5, "prompts_per_cell": 4, "max_new": 16})
    return cfg


@pytest.fixture(scope="session")
def finished_run(tmp_path_factory):
    out_dir = str(tmp_path_factory.mktemp("run") / "tiny")
    cfg = tiny_config(out_dir)
    protosteer.run_all(json.dumps(cfg))
    return cfg


def test_module_surface():
    assert protosteer.__version__
    for name in ("Session", "apply_override", "default_config", "run_all", "run_stage", "run_sweep"):
        assert hasattr(protosteer, name)


def test_default_config_is_json():
    cfg = json.loads(protosteer.default_config())
    for key in ("seed", "out_dir", "mode", "corpus", "lm", "sae", "steer", "eval", "sweep"):
        assert key in cfg
    assert cfg["mode"] == "recode"


def test_apply_override_sets_nested_keys():
    cfg = protosteer.default_config()
    out = json.loads(protosteer.apply_override(cfg, "corpus.mix_rho=0.55"))
    assert out["corpus"]["mix_rho"] == 0.55
    with pytest.raises(Exception):
        protosteer.apply_override(cfg, "no-equals-sign")


def test_unknown_stage_rejected():
    with pytest.raises(Exception):
        protosteer.run_stage("bogus", protosteer.default_config())


def test_stage_gating(tmp_path):
    cfg = tiny_config(str(tmp_path / "empty"))
    with pytest.raises(Exception, match="missing artifact"):
        protosteer.run_stage("train-lm", json.dumps(cfg))


def test_run_all_writes_artifacts(finished_run):
    out_dir = finished_run["out_dir"]
    for name in ("config.json", "manifest.json", "lm.ckpt", "sae.ckpt", "protos.ckpt",
                 "fewshot.csv", "steer_report.csv", "baseline_compare.csv"):
        assert os.path.exists(os.path.join(out_dir, name)), name


def test_session_generate_and_judge(finished_run):
    session = protosteer.Session(json.dumps(finished_run))
    names = session.class_names()
    assert len(names) == 3

    tokens = session.generate([1, 2, 3], 12)
    vocab = finished_run["corpus"]["content_tokens"] + 3
    assert 0 < len(tokens) <= 12
    assert all(0 <= t < vocab for t in tokens)
    assert 0 <= session.judge(tokens) < 3


def test_session_steer_reports_outcome(finished_run):
    session = protosteer.Session(json.dumps(finished_run))
    out = session.steer([1, 2, 3], 1, "gradient", 12)
    assert set(out) == {"tokens", "steps", "skipped", "judged"}
    assert isinstance(out["skipped"], bool)
    assert 0 <= out["judged"] < 3

    direct = session.steer([1, 2, 3], 1, "direct", 12)
    assert all(isinstance(t, int) for t in direct["tokens"])


def test_session_codes_and_prototypes(finished_run):
    session = protosteer.Session(json.dumps(finished_run))
    protos = session.prototypes()
    assert len(protos) == 3
    width = len(protos[0])
    assert width == 2 * finished_run["sae"]["latent"]  # heads x latent

    code = session.embed([1, 2, 3], [4, 5, 6, 7])
    assert len(code) == width
    assert all(v >= 0.0 for v in code)

    probs = session.classify(code)
    assert len(probs) == 3
    assert abs(sum(probs) - 1.0) < 1e-9
    assert all(p > 0.0 for p in probs)


def test_session_requires_finished_run(tmp_path):
    cfg = tiny_config(str(tmp_path / "nowhere"))
    with pytest.raises(Exception, match="missing artifact"):
        protosteer.Session(json.dumps(cfg))

import json

import pytest

from cfaug.corpus import dump_jsonl, generate_synthetic
from cfaug.generation import BackendTransportError
from cfaug.pipeline import ARTIFACTS, MANIFEST, ConfigError, Pipeline, PipelineConfig, load_merged, run_augment
from cfaug.stub_server import StubInfillServer


@pytest.fixture
def workdir(tmp_path):
    dump_jsonl(generate_synthetic(60, seed=3), tmp_path / "train.jsonl")
    dump_jsonl(generate_synthetic(30, seed=3, split="test"), tmp_path / "test.jsonl")
    return tmp_path


def config(workdir, **extra):
    raw = {"dataset": {"train": "train.jsonl", "test": "test.jsonl"}, "classifier": {"epochs": 30},
           "ig": {"steps": 16}, "output": {"dir": "out"}}
    for k, v in extra.items():
        raw[k] = {**raw.get(k, {}), **v} if isinstance(v, dict) else v
    return PipelineConfig.from_dict(raw, workdir)


def read(path):
    return path.read_bytes()


@pytest.mark.parametrize("raw,match", [
    ({}, "dataset.train is required"),
    ({"dataset": {"train": "missing.jsonl"}}, "file not found"),
    ({"dataset": {"train": "train.jsonl"}, "colour": 1}, "unknown config key 'colour'"),
    ({"dataset": {"train": "train.jsonl"}, "ig": {"stepz": 3}}, "unknown config key 'ig.stepz'"),
    ({"dataset": {"train": "train.jsonl"}, "backend": {"kind": "remote"}}, "base_url"),
    ({"dataset": {"train": "train.jsonl"}, "mask": {"strategy": "greedy"}}, "greedy"),
    ({"dataset": {"train": "train.jsonl"}, "relabel": {"prob_threshold": 1.2}}, "prob_threshold"),
    ({"dataset": {"train": "train.jsonl"}, "workers": 0}, "workers"),
])
def test_config_errors(workdir, raw, match):
    with pytest.raises(ConfigError, match=match):
        PipelineConfig.from_dict(raw, workdir)


def test_config_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        PipelineConfig.load(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        PipelineConfig.load(bad)


def test_fingerprint(workdir):
    base = config(workdir)
    before = base.fingerprint()
    assert before == config(workdir).fingerprint()
    assert base.fingerprint() == config(workdir, workers=3, output={"dir": "elsewhere"}).fingerprint()
    assert base.fingerprint() != config(workdir, seed=2).fingerprint()
    assert base.fingerprint() != config(workdir, relabel={"prob_threshold": 0.6}).fingerprint()
    (workdir / "train.jsonl").write_text((workdir / "train.jsonl").read_text().replace("the", "a"))
    assert before != config(workdir).fingerprint()


def test_fingerprint_ignores_transport_settings(workdir):
    remote = {"kind": "remote", "base_url": "http://127.0.0.1:1"}
    a = config(workdir, backend=remote)
    b = config(workdir, backend={**remote, "timeout_secs": 3.0, "max_in_flight": 9})
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != config(workdir, backend={**remote, "base_url": "http://127.0.0.1:2"}).fingerprint()


def test_full_run_outputs(workdir):
    cfg = config(workdir)
    manifest = run_augment(cfg)
    out = cfg.output_dir
    assert manifest["last_completed"] == "merge"
    assert all(manifest["stages"][s]["done"] for s in ARTIFACTS)
    c = manifest["counts"]
    assert c["sources"] == 60 and c["candidates"] == 60 * 2 * 2
    assert c["augmented"] == c["kept_target"] + c["overridden"] == 120
    merged = [json.loads(line) for line in (out / ARTIFACTS["merge"]).read_text().splitlines()]
    assert len(merged) == 180
    assert sum(r["provenance"]["origin"] == "original" for r in merged) == 60
    aug = [r for r in merged if r["provenance"]["origin"] == "augmented"]
    sources = {json.loads(line)["id"]: json.loads(line) for line in (workdir / "train.jsonl").read_text().splitlines()}
    for r in aug:
        p = r["provenance"]
        assert p["target"] != sources[p["source_id"]]["polarity"]
        assert r["aspect"] == sources[p["source_id"]]["aspect"]
        assert p["rule"] in ("kept_target", "argmax_override")
        if p["rule"] == "kept_target":
            assert r["polarity"] == p["target"]
    assert len(load_merged(cfg)) == 180


def test_resume_reuses_completed_stages(workdir):
    cfg = config(workdir)
    Pipeline(cfg).run("corrupt")
    out = cfg.output_dir
    first = {s: read(out / ARTIFACTS[s]) for s in ("train", "attribute", "corrupt")}
    mtimes = {s: (out / ARTIFACTS[s]).stat().st_mtime_ns for s in first}
    manifest = json.loads((out / MANIFEST).read_text())
    assert manifest["last_completed"] == "corrupt" and not manifest["stages"]["generate"]["done"]

    Pipeline(cfg).run("merge")
    for s in first:
        assert (out / ARTIFACTS[s]).stat().st_mtime_ns == mtimes[s]
    fresh = workdir / "fresh"
    fresh_cfg = cfg.with_overrides(output={"dir": str(fresh)})
    run_augment(fresh_cfg)
    for s in ARTIFACTS:
        assert read(out / ARTIFACTS[s]) == read(fresh / ARTIFACTS[s]), s


def test_tampered_artifact_reruns_from_that_stage(workdir):
    cfg = config(workdir)
    run_augment(cfg)
    out = cfg.output_dir
    ckpt_mtime = (out / ARTIFACTS["train"]).stat().st_mtime_ns
    good = read(out / ARTIFACTS["merge"])
    (out / ARTIFACTS["generate"]).write_text("garbage\n")
    run_augment(cfg)
    assert (out / ARTIFACTS["train"]).stat().st_mtime_ns == ckpt_mtime
    assert read(out / ARTIFACTS["merge"]) == good


def test_config_change_restarts(workdir):
    cfg = config(workdir)
    run_augment(cfg)
    ckpt = cfg.output_dir / ARTIFACTS["train"]
    before = ckpt.stat().st_mtime_ns
    run_augment(cfg.with_overrides(seed=5))
    assert ckpt.stat().st_mtime_ns != before


def test_workers_do_not_change_output(workdir):
    a = config(workdir, output={"dir": "a"})
    b = config(workdir, output={"dir": "b"}, workers=4)
    run_augment(a)
    run_augment(b)
    for s in ARTIFACTS:
        assert read(a.output_dir / ARTIFACTS[s]) == read(b.output_dir / ARTIFACTS[s]), s


def test_label_preserve_and_best_only(workdir):
    cfg = config(workdir, prompt={"mode": "label_preserve"}, relabel={"best_only": True})
    run_augment(cfg)
    rows = [json.loads(line) for line in (cfg.output_dir / ARTIFACTS["relabel"]).read_text().splitlines()]
    sources = {s.id: s for s in generate_synthetic(60, seed=3)}
    assert len(rows) == len({r["provenance"]["source_id"] for r in rows}) == 60
    assert all(r["provenance"]["target"] == sources[r["provenance"]["source_id"]].label.label for r in rows)


def test_random_masking_run(workdir):
    cfg = config(workdir, mask={"strategy": "random"})
    run_augment(cfg)
    rows = [json.loads(line) for line in (cfg.output_dir / ARTIFACTS["corrupt"]).read_text().splitlines()]
    assert {r["strategy"] for r in rows} == {"random"}


def test_remote_backend_down_leaves_resumable_manifest(workdir):
    server = StubInfillServer()
    url, port = server.base_url, server._httpd.server_address[1]
    server.stop()
    cfg = config(workdir, backend={"kind": "remote", "base_url": url, "timeout_secs": 1.0})
    with pytest.raises(BackendTransportError):
        run_augment(cfg)
    manifest = json.loads((cfg.output_dir / MANIFEST).read_text())
    assert manifest["last_completed"] == "corrupt"
    assert not manifest["stages"]["generate"]["done"]
    ckpt = cfg.output_dir / ARTIFACTS["train"]
    trained_at = ckpt.stat().st_mtime_ns

    with StubInfillServer(fill_word="superb", port=port) as live:
        manifest = run_augment(cfg)
        assert manifest["last_completed"] == "merge"
        assert len(live.requests) == 60 * 2 * 2  # two counterfactual targets, two templates each
    assert ckpt.stat().st_mtime_ns == trained_at

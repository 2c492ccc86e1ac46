# SPDX-License-Identifier: Apache-2.0
import json
import os
import pathlib
import socket
import subprocess
import time

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fpe_toolkit as fpe

REPO = pathlib.Path(__file__).resolve().parents[2]


def edit_request(target="a photo of a leopard", seed=3, steps=3):
    return {
        "source": {"type": "seeded_prompt", "seed": seed, "prompt": "a photo of a sheep"},
        "target_prompt": target,
        "sampler": {"step_count": steps},
    }


def validator(name):
    doc = fpe.schemas()
    schema = dict(doc["schemas"][name])
    return jsonschema.Draft202012Validator(schema)


def test_schemas_are_valid_draft_2020_12():
    doc = fpe.schemas()
    assert set(doc["schemas"]) == {"job", "edit", "sweep", "harvest", "probe", "benchmark"}
    for name, schema in doc["schemas"].items():
        jsonschema.Draft202012Validator.check_schema(schema)
        assert schema["$id"] == f"fpe:{name}:v1"


def test_valid_requests_pass_both_validators():
    requests = {
        "edit": edit_request(),
        "sweep": {"base": edit_request(), "grid": {"kinds": [["self"]], "ratios": [0.4, 0.6]}},
        "harvest": {"family": "color_car", "seeds": [0, 1], "dataset": "cars"},
        "probe": {"mode": "sanity"},
        "benchmark": {"dataset": "car_fake", "limit": 2},
    }
    for kind, req in requests.items():
        assert fpe.check_request(kind, req) is None, kind
        validator(kind).validate(req)


@settings(max_examples=40, deadline=None)
@given(steps=st.integers(min_value=-5, max_value=1200), ratio=st.floats(min_value=-1, max_value=2))
def test_schema_checker_agrees_with_jsonschema(steps, ratio):
    req = edit_request(steps=steps)
    req["policy"] = {"kinds": ["self"], "replace_ratio": ratio}
    ours = fpe.check_request("edit", req)
    theirs = list(validator("edit").iter_errors(req))
    assert (ours is None) == (not theirs)


def test_invalid_request_reports_pointer():
    req = edit_request(steps=0)
    pointer, message = fpe.check_request("edit", req)
    assert pointer == "/sampler/step_count"
    assert message


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 24), m=st.integers(1, 24), d=st.integers(1, 32), seed=st.integers(0, 2**31))
def test_compute_attention_matches_numpy(n, m, d, seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, d)).astype(np.float32) * 2
    k = rng.standard_normal((m, d)).astype(np.float32)
    logits = q.astype(np.float64) @ k.astype(np.float64).T / np.sqrt(d)
    ref = np.exp(logits - logits.max(axis=1, keepdims=True))
    ref /= ref.sum(axis=1, keepdims=True)
    got = fpe.compute_attention(q, k, d)
    assert got.shape == (n, m)
    assert np.max(np.abs(got - ref)) <= 1e-5
    assert np.max(np.abs(got.sum(axis=1) - 1)) <= 1e-4


def test_metrics_match_numpy():
    rng = np.random.default_rng(7)
    for _ in range(50):
        si, di, st_, dt = (rng.standard_normal(32).astype(np.float32) for _ in range(4))
        cos = float(di.astype(np.float64) @ dt / (np.linalg.norm(di.astype(np.float64)) * np.linalg.norm(dt.astype(np.float64))))
        assert abs(fpe.clip_score(di, dt) - 100 * max(cos, 0.0)) <= 1e-6
        u = lambda v: v.astype(np.float64) / np.linalg.norm(v.astype(np.float64))
        a, b = u(di) - u(si), u(dt) - u(st_)
        ref = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert abs(fpe.clip_directional_similarity(si, di, st_, dt) - ref) <= 1e-6
    img = rng.standard_normal(16).astype(np.float32)
    assert fpe.clip_directional_similarity(img, img, rng.standard_normal(16).astype(np.float32), img) is None


def test_site_tables(tmp_path):
    assert len(fpe.sites(storage_root=str(tmp_path))["sites"]) == 8
    sd = fpe.sites("sd15", storage_root=str(tmp_path))["sites"]
    assert len(sd) == 32
    assert sorted({s["index"] for s in sd}) == list(range(1, 17))
    with pytest.raises(Exception):
        fpe.sites("no-such-backbone", storage_root=str(tmp_path))


def test_generation_is_deterministic_and_ratio_zero_is_direct():
    a = fpe.generate("a photo of a leopard", seed=5, steps=4)
    b = fpe.generate("a photo of a leopard", seed=5, steps=4)
    assert a.dtype == np.uint8 and a.ndim == 3 and a.shape[2] == 3
    assert np.array_equal(a, b)
    out = fpe.edit("a photo of a sheep", "a photo of a leopard", seed=5, steps=4, ratio=0.0)
    assert out["injections"] == 0
    assert np.array_equal(out["edited"], a)
    same = fpe.edit("a photo of a sheep", "a photo of a sheep", seed=5, steps=4, ratio=1.0)
    assert np.array_equal(same["edited"], same["source"])


def test_run_job_writes_artifacts(tmp_path):
    record = fpe.run_job("edit", edit_request(), storage_root=tmp_path)
    assert record["status"] == "done"
    folder = pathlib.Path(record["artifacts_dir"])
    for name in record["artifact_paths"]:
        assert (folder / name).exists()
    assert "dst.png" in record["artifact_paths"]
    with pytest.raises(ValueError):
        fpe.run_job("edit", edit_request(steps=0), storage_root=tmp_path)


def test_dataset_and_probe_gate():
    manifest = fpe.dataset_manifest("car_fake")
    assert manifest["count"] == 756
    with pytest.raises(ValueError, match="car_real.json"):
        fpe.dataset_manifest("car_real", "/nonexistent")
    gate = fpe.probe_sanity_gate()
    assert gate["pass"]
    assert min(gate["planted_per_class"]) >= 0.95


def _bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return [chr(c) for c in cs]


def test_bpe_matches_transformers_on_toy_vocab(tmp_path):
    transformers = pytest.importorskip("transformers")
    chars = _bytes_to_unicode()
    vocab = chars + [c + "</w>" for c in chars]
    merges = [("c", "a"), ("ca", "r</w>"), ("r", "e"), ("re", "d</w>"), ("o", "f</w>"),
              ("p", "h"), ("ph", "o"), ("t", "o</w>"), ("pho", "to</w>"), ("s", "h"), ("sh", "e"),
              ("e", "p</w>"), ("she", "ep</w>")]
    for a, b in merges:
        vocab.append(a + b)
    vocab += ["<|startoftext|>", "<|endoftext|>"]
    (tmp_path / "vocab.json").write_text(json.dumps({tok: i for i, tok in enumerate(vocab)}))
    (tmp_path / "merges.txt").write_text("#version: 0.2\n" + "\n".join(f"{a} {b}" for a, b in merges) + "\n")
    ref = transformers.CLIPTokenizer(str(tmp_path / "vocab.json"), str(tmp_path / "merges.txt"))
    for text in ["a red car", "a photo of a sheep", "A Photo of a RED car, parked!", "cars carred 42 sheeps",
                 "a  photo\tof  a  red   car"]:
        ours = fpe.bpe_encode(str(tmp_path / "vocab.json"), str(tmp_path / "merges.txt"), text)
        assert ours == ref(text)["input_ids"], text


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_served_schema_validates(tmp_path):
    cli = pathlib.Path(os.environ.get("FPE_CLI", REPO / "build" / "tools" / "fpe_cli"))
    if not cli.exists():
        pytest.skip("fpe_cli is not built")
    requests = pytest.importorskip("requests")
    port = _free_port()
    proc = subprocess.Popen([str(cli), "--storage", str(tmp_path), "serve", "--port", str(port)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        base = f"http://127.0.0.1:{port}"
        for _ in range(100):
            try:
                served = requests.get(base + "/schema", timeout=1).json()
                break
            except requests.ConnectionError:
                time.sleep(0.05)
        else:
            pytest.fail("service did not start")
        assert served == fpe.schemas()
        for schema in served["schemas"].values():
            jsonschema.Draft202012Validator.check_schema(schema)
        job = {"kind": "edit", "request": edit_request()}
        jsonschema.Draft202012Validator(served["schemas"]["job"]).validate(job)
        reply = requests.post(base + "/jobs", json=job, timeout=5)
        assert reply.status_code == 202
        job_id = reply.json()["id"]
        for _ in range(400):
            status = requests.get(f"{base}/jobs/{job_id}", timeout=5).json()["status"]
            if status in ("done", "failed"):
                break
            time.sleep(0.05)
        assert status == "done"
        png = requests.get(f"{base}/jobs/{job_id}/artifacts/dst.png", timeout=5)
        assert png.headers["Content-Type"] == "image/png"
        assert png.content[:8] == b"\x89PNG\r\n\x1a\n"
    finally:
        proc.terminate()
        proc.wait(timeout=10)
